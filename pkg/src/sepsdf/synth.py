"""Analytic two-object scenes, sphere-traced ground truth and the on-disk ScenePack."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (Camera, camera_rays, check_image, fibonacci_sphere, load_cameras, look_at,
                       read_png, save_cameras, write_png)

log = logging.getLogger(__name__)

SCENE_IDS = ("two-spheres-touching", "sphere-on-box", "capsule-grip-torus")
CONTACT_RANGE = (-0.05, 0.02)


# -- primitives (vectorised over (..., 3) points) ---------------------------------

def sd_sphere(p, centre, radius):
    return np.linalg.norm(p - np.asarray(centre), axis=-1) - radius


def sd_box(p, centre, half, rounding=0.0):
    q = np.abs(p - np.asarray(centre)) - (np.asarray(half) - rounding)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside - rounding


def sd_torus(p, centre, major, minor, axis=0):
    q = p - np.asarray(centre)
    along = q[..., axis]
    radial = np.sqrt(np.maximum((q * q).sum(axis=-1) - along * along, 0.0))
    return np.hypot(radial - major, along) - minor


def sd_capsule(p, a, b, radius):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    pa, ba = p - a, b - a
    h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - radius


_PRIMITIVES = {
    "sphere": lambda p, d: sd_sphere(p, d["centre"], d["radius"]),
    "box": lambda p, d: sd_box(p, d["centre"], d["half"], d.get("rounding", 0.0)),
    "torus": lambda p, d: sd_torus(p, d["centre"], d["major"], d["minor"], d.get("axis", 0)),
    "capsule": lambda p, d: sd_capsule(p, d["a"], d["b"], d["radius"]),
}


@dataclass
class AnalyticObject:
    primitives: list[dict]
    albedo: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.min([_PRIMITIVES[d["type"]](p, d) for d in self.primitives], axis=0)


@dataclass
class AnalyticScene:
    scene_id: str
    objects: tuple[AnalyticObject, AnalyticObject]
    contact: float = 0.0
    light_dir: tuple[float, float, float] = (0.36, 0.48, 0.8)
    ambient: float = 0.35

    def sdf(self, obj: int, p) -> np.ndarray:
        return self.objects[obj - 1].sdf(p)

    def scene_sdf(self, p) -> np.ndarray:
        return np.minimum(self.sdf(1, p), self.sdf(2, p))

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "contact": self.contact,
            "light_dir": list(self.light_dir),
            "ambient": self.ambient,
            "objects": [{"primitives": o.primitives, "albedo": list(o.albedo)} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        objs = tuple(AnalyticObject(o["primitives"], tuple(o["albedo"])) for o in d["objects"])
        return cls(d["scene_id"], objs, d["contact"], tuple(d["light_dir"]), d["ambient"])


ALBEDO_1 = (0.85, 0.45, 0.25)
ALBEDO_2 = (0.25, 0.55, 0.9)


def make_scene(scene_id: str, contact: float = 0.0, angle_deg: float = 0.0) -> AnalyticScene:
    """Canonical scenes.  ``contact`` > 0 forces overlap, < 0 leaves a gap.

    ``angle_deg`` swings object 2 around object 1 about the z axis while keeping
    the contact distance, which produces moving-contact sequences.
    """
    if not CONTACT_RANGE[0] <= contact <= CONTACT_RANGE[1]:
        raise ValueError(f"contact depth must lie in {CONTACT_RANGE}, got {contact}")
    if scene_id == "two-spheres-touching":
        ra, rb = 0.2, 0.17
        dist = ra + rb - contact
        left = 0.5 - (ra + dist + rb) / 2
        ca = np.array([left + ra, 0.5, 0.5])
        th = math.radians(angle_deg)
        cb = ca + dist * np.array([math.cos(th), math.sin(th), 0.0])
        o1 = AnalyticObject([{"type": "sphere", "centre": ca.tolist(), "radius": ra}], ALBEDO_1)
        o2 = AnalyticObject([{"type": "sphere", "centre": cb.tolist(), "radius": rb}], ALBEDO_2)
    elif scene_id == "sphere-on-box":
        half = [0.3, 0.3, 0.12]
        cbox = [0.5, 0.5, 0.3]
        r = 0.17
        top = cbox[2] + half[2]
        th = math.radians(angle_deg)
        cs = [0.5 + 0.1 * math.sin(th), 0.5, top + r - contact]
        o1 = AnalyticObject([{"type": "box", "centre": cbox, "half": half, "rounding": 0.02}], ALBEDO_1)
        o2 = AnalyticObject([{"type": "sphere", "centre": cs, "radius": r}], ALBEDO_2)
    elif scene_id == "capsule-grip-torus":
        rc, minor = 0.13, 0.05
        shift = 0.1 * math.sin(math.radians(angle_deg))
        o1 = AnalyticObject([{"type": "capsule", "a": [0.28, 0.5, 0.5], "b": [0.72, 0.5, 0.5],
                              "radius": rc}], ALBEDO_1)
        o2 = AnalyticObject([{"type": "torus", "centre": [0.5 + shift, 0.5, 0.5],
                              "major": rc + minor - contact, "minor": minor, "axis": 0}], ALBEDO_2)
    else:
        raise ValueError(f"unknown scene id {scene_id!r}; expected one of {SCENE_IDS}")
    return AnalyticScene(scene_id, (o1, o2), contact)


# -- sphere tracing ------------------------------------------------------------------

@dataclass
class TraceResult:
    image: np.ndarray  # (H, W, 3)
    mask1: np.ndarray  # (H, W) bool
    mask2: np.ndarray
    depth: np.ndarray  # (H, W), inf for background
    failed: int


def _normals(scene: AnalyticScene, obj: int, p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    n = np.stack([scene.sdf(obj, p + eps * e) - scene.sdf(obj, p - eps * e) for e in np.eye(3)], axis=-1)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def trace_rays(scene: AnalyticScene, origins, dirs, near, far, eps: float = 1e-6,
               max_iter: int = 1024):
    """First hit along each ray.  Returns (t, object id 0/1/2, converged flag)."""
    t = near.copy()
    obj = np.zeros(len(t), dtype=np.int64)
    active = far > near
    done = ~active
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        d1, d2 = scene.sdf(1, p), scene.sdf(2, p)
        d = np.minimum(d1, d2)
        hit = d < eps
        obj[idx[hit]] = np.where(d1[hit] <= d2[hit], 1, 2)
        t[idx] += np.where(hit, 0.0, d)
        out = t[idx] > far[idx]
        finished = hit | out
        done[idx[finished]] = True
        active[idx[finished]] = False
    return t, obj, done


def shade(scene: AnalyticScene, obj: int, p: np.ndarray) -> np.ndarray:
    n = _normals(scene, obj, p)
    light = np.asarray(scene.light_dir) / np.linalg.norm(scene.light_dir)
    lam = np.clip(n @ light, 0.0, 1.0)
    albedo = np.asarray(scene.objects[obj - 1].albedo)
    return albedo[None] * (scene.ambient + (1 - scene.ambient) * lam)[:, None]


def trace_view(scene: AnalyticScene, cam: Camera) -> TraceResult:
    H, W = cam.height, cam.width
    cols, rows = np.meshgrid(np.arange(W), np.arange(H))
    o, d, near, far = camera_rays(cam, np.stack([cols.ravel(), rows.ravel()], axis=1))
    t, obj, ok = trace_rays(scene, o, d, near, far)
    img = np.zeros((H * W, 3))
    for k in (1, 2):
        sel = obj == k
        if sel.any():
            img[sel] = shade(scene, k, o[sel] + t[sel, None] * d[sel])
    depth = np.where(obj > 0, t, np.inf)
    failed = int((~ok).sum())
    return TraceResult(img.reshape(H, W, 3), (obj == 1).reshape(H, W), (obj == 2).reshape(H, W),
                       depth.reshape(H, W), failed)


# -- scene packs -----------------------------------------------------------------------

@dataclass
class ScenePack:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    masks1: np.ndarray  # (N, H, W) bool
    masks2: np.ndarray
    cameras: list[Camera]
    meta: dict = field(default_factory=dict)
    scene: AnalyticScene | None = None

    def __post_init__(self):
        n = len(self.cameras)
        if not (len(self.images) == len(self.masks1) == len(self.masks2) == n):
            raise ValueError("images, masks and cameras must have equal counts")
        if np.any(self.masks1 & self.masks2):
            raise ValueError("object masks overlap")
        for img, cam in zip(self.images, self.cameras):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError("image size does not match its camera")

    @property
    def train_ids(self) -> list[int]:
        return list(self.meta.get("train_ids", range(len(self.cameras))))

    @property
    def test_ids(self) -> list[int]:
        return list(self.meta.get("test_ids", []))

    @property
    def foreground(self) -> np.ndarray:
        return self.masks1 | self.masks2

    def subset(self, ids) -> "ScenePack":
        ids = list(ids)
        meta = dict(self.meta, train_ids=list(range(len(ids))), test_ids=[])
        return ScenePack(self.images[ids], self.masks1[ids], self.masks2[ids],
                         [self.cameras[i] for i in ids], meta, self.scene)


def render_ground_truth(scene: AnalyticScene, cameras: list[Camera], seed: int = 0,
                        test_ids=(), max_fail_frac: float = 1e-4) -> ScenePack:
    if len(cameras) < 8:
        raise ValueError("need at least 8 cameras")
    views = [trace_view(scene, c) for c in cameras]
    failed = sum(v.failed for v in views)
    total = sum(c.width * c.height for c in cameras)
    if failed > max_fail_frac * total:
        raise RuntimeError(f"sphere tracing failed on {failed} of {total} pixels")
    if failed:
        log.warning("%d pixels did not converge and were marked background", failed)
    test_ids = sorted(test_ids)
    meta = {
        "scene_id": scene.scene_id,
        "seed": seed,
        "scene": scene.to_dict(),
        "normalisation": {"scale": 1.0, "translation": [0.0, 0.0, 0.0]},
        "train_ids": [i for i in range(len(cameras)) if i not in test_ids],
        "test_ids": test_ids,
        "trace_failures": failed,
    }
    return ScenePack(np.stack([v.image for v in views]), np.stack([v.mask1 for v in views]),
                     np.stack([v.mask2 for v in views]), list(cameras), meta, scene)


def dome_cameras(n: int, resolution: int = 128, seed: int = 0, radius: float = 1.6,
                 fov_deg: float = 40.0) -> list[Camera]:
    """Fibonacci-sphere cameras, the whole layout randomly rotated by ``seed``."""
    rot = Rotation.random(random_state=seed).as_matrix()
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    centre = np.full(3, 0.5)
    cams = []
    for p in fibonacci_sphere(n) @ rot.T:
        eye = centre + radius * p
        cams.append(Camera(f, f, resolution / 2, resolution / 2, look_at(eye, centre), eye,
                           resolution, resolution))
    return cams


def generate_pack(scene_id: str, contact: float = 0.0, n_train: int = 20, n_test: int = 4,
                  resolution: int = 128, seed: int = 0, angle_deg: float = 0.0) -> ScenePack:
    scene = make_scene(scene_id, contact, angle_deg)
    n = n_train + n_test
    cams = dome_cameras(n, resolution, seed)
    test_ids = [int(round((i + 0.5) * n / n_test)) for i in range(n_test)] if n_test else []
    return render_ground_truth(scene, cams, seed, test_ids)


def save_pack(pack: ScenePack, out_dir: str | Path, meshes: dict | None = None) -> None:
    out = Path(out_dir)
    for sub in ("images", "masks1", "masks2"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_cameras(out / "cameras.json", pack.cameras)
    for i in range(len(pack.cameras)):
        write_png(out / "images" / f"{i:04d}.png", pack.images[i])
        write_png(out / "masks1" / f"{i:04d}.png", pack.masks1[i].astype(np.float64))
        write_png(out / "masks2" / f"{i:04d}.png", pack.masks2[i].astype(np.float64))
    (out / "meta.json").write_text(json.dumps(pack.meta, indent=1, sort_keys=True))
    if meshes:
        (out / "gt").mkdir(exist_ok=True)
        for k, mesh in meshes.items():
            mesh.save_obj(out / "gt" / f"object{k}.obj")


def load_pack(path: str | Path) -> ScenePack:
    p = Path(path)
    if not (p / "cameras.json").exists():
        raise FileNotFoundError(f"{p} is not a scene pack (cameras.json missing)")
    cams = load_cameras(p / "cameras.json")
    meta = json.loads((p / "meta.json").read_text()) if (p / "meta.json").exists() else {}
    n = len(cams)
    images = np.stack([read_png(p / "images" / f"{i:04d}.png")[..., :3] for i in range(n)])
    m1 = np.stack([check_image(read_png(p / "masks1" / f"{i:04d}.png"), binary=True) > 0.5
                   for i in range(n)])
    m2 = np.stack([check_image(read_png(p / "masks2" / f"{i:04d}.png"), binary=True) > 0.5
                   for i in range(n)])
    scene = AnalyticScene.from_dict(meta["scene"]) if "scene" in meta else None
    return ScenePack(images, m1, m2, cams, meta, scene)


def gt_mesh_paths(path: str | Path) -> dict[int, Path]:
    gt = Path(path) / "gt"
    return {k: gt / f"object{k}.obj" for k in (1, 2) if (gt / f"object{k}.obj").exists()}
