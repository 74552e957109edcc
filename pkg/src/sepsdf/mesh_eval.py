"""Mesh extraction from SDFs, Chamfer distance, penetration IoU and image metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward-facing triangles)."""
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def cleaned(self, eps: float = 1e-14) -> "TriangleMesh":
        """Drop zero-area triangles and unreferenced vertices."""
        faces = self.faces[self.face_areas() > eps]
        used, inv = np.unique(faces.reshape(-1), return_inverse=True)
        return TriangleMesh(self.vertices[used], inv.reshape(-1, 3))

    def largest_component(self) -> "TriangleMesh":
        if self.is_empty:
            return self
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        n = len(self.vertices)
        _, labels = connected_components(coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)),
                                         directed=False)
        face_label = labels[f[:, 0]]
        best = np.bincount(face_label).argmax()
        faces = f[face_label == best]
        used, inv = np.unique(faces.reshape(-1), return_inverse=True)
        return TriangleMesh(self.vertices[used], inv.reshape(-1, 3))

    def save_obj(self, path) -> None:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_obj(cls, path) -> "TriangleMesh":
        verts, faces = [], []
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
        return cls(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# -- extraction ----------------------------------------------------------------------

def grid_points(resolution: int) -> np.ndarray:
    """(res+1)^3 lattice points over the unit cube in 'ij' order."""
    ax = np.linspace(0.0, 1.0, resolution + 1)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def sample_sdf_grid(sdf_fn, resolution: int, chunk: int = 1 << 16) -> np.ndarray:
    """Evaluate ``sdf_fn`` (numpy (N,3) -> (N,)) on the lattice, shape (res+1,)*3."""
    pts = grid_points(resolution)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = np.asarray(sdf_fn(pts[s:s + chunk]), dtype=np.float64).reshape(-1)
    n = resolution + 1
    return out.reshape(n, n, n)


def marching_cubes(values: np.ndarray, spacing: float, level: float = 0.0) -> TriangleMesh:
    """Isosurface of a lattice whose first sample sits at the origin; negative = inside."""
    if not np.isfinite(values).all():
        raise FloatingPointError("non-finite SDF values on the extraction grid")
    if values.min() > level or values.max() < level:
        log.warning("empty level set; returning an empty mesh")
        return TriangleMesh.empty()
    # 'descent' winds triangles counter-clockwise seen from the positive (outer) side
    verts, faces, _, _ = measure.marching_cubes(values, level=level, spacing=(spacing,) * 3,
                                                gradient_direction="descent")
    return TriangleMesh(verts, faces).cleaned()


def mesh_from_sdf(sdf_fn, resolution: int = 256, largest_component: bool = False) -> TriangleMesh:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    mesh = marching_cubes(sample_sdf_grid(sdf_fn, resolution), 1.0 / resolution)
    return mesh.largest_component() if largest_component else mesh


def field_sdf_fn(fields, which: str):
    """numpy closure for phi1, phi2 or the union of a trained model."""
    idx = {"object1": 0, "object2": 1, "scene": 2}
    if which not in idx:
        raise ValueError(f"which must be one of {tuple(idx)}, got {which!r}")
    dtype = fields.log_beta.dtype

    @torch.no_grad()
    def fn(p):
        x = torch.as_tensor(np.asarray(p), dtype=dtype)
        return fields.eval_sdfs(x)[idx[which]].double().numpy()

    return fn


def extract_mesh(fields, which: str = "scene", resolution: int = 256,
                 largest_component: bool = False) -> TriangleMesh:
    if resolution < 64:
        raise ValueError("extraction resolution must be >= 64")
    return mesh_from_sdf(field_sdf_fn(fields, which), resolution, largest_component)


# -- Chamfer -------------------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the surface."""
    areas = mesh.face_areas()
    if mesh.is_empty or areas.sum() <= 0:
        raise ValueError("cannot sample an empty mesh")
    tri = mesh.triangles()[rng.choice(len(areas), size=n, p=areas / areas.sum())]
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def _as_points(x, n: int, rng) -> np.ndarray:
    if isinstance(x, TriangleMesh):
        return sample_surface(x, n, rng)
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point set")
    return pts


def chamfer(a, b, n_samples: int = 100_000, seed: int = 0) -> float:
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2 (squared distances, both directions)."""
    # same stream for both sides, so identical meshes yield identical samples
    pa = _as_points(a, n_samples, np.random.default_rng(seed))
    pb = _as_points(b, n_samples, np.random.default_rng(seed))
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def chamfer_brute(pa, pb) -> float:
    pa, pb = np.asarray(pa, dtype=np.float64), np.asarray(pb, dtype=np.float64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


# -- penetration IoU -----------------------------------------------------------------

# tiny irrational offsets keep casting rays off shared mesh edges and vertices
_RAY_JITTER = (math.sqrt(2) * 1e-7, math.sqrt(3) * 1e-7)


def _crossings(mesh: TriangleMesh, lo: np.ndarray, hi: np.ndarray, resolution: int):
    """Hits of the +x rays through the (y, z) voxel-centre lattice: (j, k, x) arrays."""
    h = (hi - lo) / resolution
    cy = lo[1] + (np.arange(resolution) + 0.5) * h[1] + _RAY_JITTER[0]
    cz = lo[2] + (np.arange(resolution) + 0.5) * h[2] + _RAY_JITTER[1]
    tri = mesh.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    # 2D barycentrics of each (y, z) ray against each triangle's projection
    det = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (b[:, 2] - a[:, 2])
    ok = np.abs(det) > 1e-18
    a, b, c, det = a[ok], b[ok], c[ok], det[ok]
    ymin, ymax = np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1]), np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1])
    zmin, zmax = np.minimum(np.minimum(a[:, 2], b[:, 2]), c[:, 2]), np.maximum(np.maximum(a[:, 2], b[:, 2]), c[:, 2])
    j0 = np.clip(np.ceil((ymin - lo[1] - _RAY_JITTER[0]) / h[1] - 0.5), 0, resolution).astype(int)
    j1 = np.clip(np.floor((ymax - lo[1] - _RAY_JITTER[0]) / h[1] - 0.5), -1, resolution - 1).astype(int)
    k0 = np.clip(np.ceil((zmin - lo[2] - _RAY_JITTER[1]) / h[2] - 0.5), 0, resolution).astype(int)
    k1 = np.clip(np.floor((zmax - lo[2] - _RAY_JITTER[1]) / h[2] - 0.5), -1, resolution - 1).astype(int)
    nj, nk = j1 - j0 + 1, k1 - k0 + 1
    idx = np.nonzero((nj > 0) & (nk > 0))[0]
    counts = (nj * nk)[idx]
    tri_id = np.repeat(idx, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    jj = j0[tri_id] + local // nk[tri_id]
    kk = k0[tri_id] + local % nk[tri_id]
    py, pz = cy[jj], cz[kk]
    A, B, C, D = a[tri_id], b[tri_id], c[tri_id], det[tri_id]
    w1 = ((py - A[:, 1]) * (C[:, 2] - A[:, 2]) - (C[:, 1] - A[:, 1]) * (pz - A[:, 2])) / D
    w2 = ((B[:, 1] - A[:, 1]) * (pz - A[:, 2]) - (py - A[:, 1]) * (B[:, 2] - A[:, 2])) / D
    inside = (w1 >= 0) & (w2 >= 0) & (w1 + w2 <= 1)
    xhit = A[:, 0] + w1 * (B[:, 0] - A[:, 0]) + w2 * (C[:, 0] - A[:, 0])
    return jj[inside], kk[inside], xhit[inside]


def voxelize(mesh: TriangleMesh, lo: np.ndarray, hi: np.ndarray, resolution: int) -> np.ndarray:
    """Interior occupancy of voxel centres by parity of crossings along +x."""
    h = (hi - lo) / resolution
    jj, kk, xhit = _crossings(mesh, lo, hi, resolution)
    # crossings per (j, k, voxel) counted by a histogram along x, then parity by cumsum
    ix = np.clip(np.floor((xhit - lo[0]) / h[0] - 0.5).astype(int) + 1, 0, resolution)
    hist = np.zeros((resolution, resolution, resolution + 1), dtype=np.int32)
    np.add.at(hist, (jj, kk, ix), 1)
    parity = (np.cumsum(hist, axis=2)[:, :, :resolution] % 2).astype(bool)
    return np.ascontiguousarray(parity.transpose(2, 0, 1))  # (x, y, z)


def _ray_overlap_lengths(m1: TriangleMesh, m2: TriangleMesh, lo, hi, resolution: int):
    """Inside lengths (|A|, |B|, |A and B|) summed over the ray lattice, exact along x."""
    events = []
    for which, m in enumerate((m1, m2)):
        jj, kk, x = _crossings(m, lo, hi, resolution)
        events.append((jj * resolution + kk, x, np.full(len(x), which)))
    ray, x, which = (np.concatenate(v) for v in zip(*events))
    order = np.lexsort((x, ray))
    ray, x, which = ray[order], x[order], which[order]
    # parity of each solid after every event, restarting on each ray
    state = np.zeros((len(x), 2), dtype=np.int64)
    state[np.arange(len(x)), which] = 1
    csum = np.cumsum(state, axis=0)
    first = np.r_[True, ray[1:] != ray[:-1]]
    starts = np.maximum.accumulate(np.where(first, np.arange(len(x)), 0))
    base = np.where(starts[:, None] > 0, csum[np.maximum(starts - 1, 0)], 0)
    inside = (csum - base) % 2 == 1
    seg = np.zeros(len(x))
    same = ~first[1:]
    seg[:-1] = np.where(same, x[1:] - x[:-1], 0.0)
    in1, in2 = inside[:, 0], inside[:, 1]
    return float((seg * in1).sum()), float((seg * in2).sum()), float((seg * (in1 & in2)).sum())


def voxelize_sdf(sdf_fn, lo, hi, resolution: int) -> np.ndarray:
    h = (hi - lo) / resolution
    axes = [lo[i] + (np.arange(resolution) + 0.5) * h[i] for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    chunk = 1 << 18
    out = np.concatenate([np.asarray(sdf_fn(pts[s:s + chunk])) for s in range(0, len(pts), chunk)])
    return (out < 0).reshape(resolution, resolution, resolution)


def _bounds(*meshes) -> tuple[np.ndarray, np.ndarray]:
    pts = np.concatenate([m.vertices for m in meshes if not m.is_empty])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 1e-3 * max(float((hi - lo).max()), 1e-6)
    return lo - pad, hi + pad


def iou3d(m1: TriangleMesh, m2: TriangleMesh, resolution: int = 256, sdf1=None, sdf2=None) -> float:
    """Volume IoU of two solids probed on a lattice spanning their joint bounding box.

    Watertight pairs are measured with resolution^2 parity rays along x whose inside
    intervals are integrated exactly; otherwise both solids are voxelised (SDF sign for
    open meshes) and voxels are counted.
    """
    if m1.is_empty and m2.is_empty:
        return 0.0
    lo, hi = _bounds(m1, m2)
    if not m1.is_empty and not m2.is_empty and m1.is_watertight() and m2.is_watertight():
        la, lb, lab = _ray_overlap_lengths(m1, m2, lo, hi, resolution)
        union = la + lb - lab
        return float(min(max(lab / union, 0.0), 1.0)) if union > 0 else 0.0
    occ = []
    for m, fn in ((m1, sdf1), (m2, sdf2)):
        if m.is_empty:
            occ.append(np.zeros((resolution,) * 3, dtype=bool))
        elif m.is_watertight():
            occ.append(voxelize(m, lo, hi, resolution))
        elif fn is not None:
            log.warning("mesh not watertight; using the SDF sign instead")
            occ.append(voxelize_sdf(fn, lo, hi, resolution))
        else:
            raise ValueError("mesh is not watertight and no SDF closure was given")
    union = np.logical_or(*occ).sum()
    return float(np.logical_and(*occ).sum() / union) if union else 0.0


# -- image metrics -------------------------------------------------------------------

def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM, Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03, valid region, channel mean."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    w = _gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    pad = w.shape[0] // 2
    vals = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]

        def filt(im):
            return ndimage.correlate(im, w, mode="constant")[pad:-pad, pad:-pad]

        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        vxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def image_metrics(pred, gt) -> tuple[float, float]:
    return psnr(pred, gt), ssim(pred, gt)


# -- report --------------------------------------------------------------------------

@dataclass
class ViewMetrics:
    view: int
    psnr: float
    ssim: float


@dataclass
class ReconReport:
    chamfer_obj1: float | None = None
    chamfer_obj2: float | None = None
    chamfer_scene: float | None = None
    iou3d: float | None = None
    views: list[ViewMetrics] = field(default_factory=list)
    units: str = "squared scene units x 1e-3"
    extraction_resolution: int = 256

    def __post_init__(self):
        if self.iou3d is not None and not 0.0 <= self.iou3d <= 1.0:
            raise ValueError("iou3d must lie in [0, 1]")
        self.views = [v if isinstance(v, ViewMetrics) else ViewMetrics(**v) for v in self.views]

    @property
    def mean_psnr(self) -> float | None:
        return float(np.mean([v.psnr for v in self.views])) if self.views else None

    @property
    def mean_ssim(self) -> float | None:
        return float(np.mean([v.ssim for v in self.views])) if self.views else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconReport":
        d = {k: v for k, v in d.items() if k not in ("mean_psnr", "mean_ssim")}
        return cls(**d)

    def table(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.3f}"

        rows = [
            f"{'':18s}{'scene':>10s}{'object1':>10s}{'object2':>10s}",
            f"{'chamfer (x1e-3)':18s}{fmt(self.chamfer_scene):>10s}{fmt(self.chamfer_obj1):>10s}"
            f"{fmt(self.chamfer_obj2):>10s}",
            f"{'iou3d':18s}{fmt(self.iou3d):>10s}",
            f"{'psnr (dB)':18s}{fmt(self.mean_psnr):>10s}",
            f"{'ssim':18s}{fmt(self.mean_ssim):>10s}",
        ]
        return "\n".join(rows)


_NUM_OR_NULL = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["chamfer_obj1", "chamfer_obj2", "chamfer_scene", "iou3d", "views", "units"],
    "properties": {
        "chamfer_obj1": _NUM_OR_NULL,
        "chamfer_obj2": _NUM_OR_NULL,
        "chamfer_scene": _NUM_OR_NULL,
        "iou3d": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "units": {"type": "string"},
        "extraction_resolution": {"type": "integer"},
        "mean_psnr": _NUM_OR_NULL,
        "mean_ssim": _NUM_OR_NULL,
        "views": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["view", "psnr", "ssim"],
                "properties": {"view": {"type": "integer"}, "psnr": {"type": "number"},
                               "ssim": {"type": "number"}},
            },
        },
    },
}


# -- evaluation of a trained model ---------------------------------------------------

def analytic_gt_meshes(scene, resolution: int = 256) -> dict:
    """Marching-cubes meshes of an analytic scene: keys 1, 2 and "scene"."""
    return {1: mesh_from_sdf(lambda p: scene.sdf(1, p), resolution),
            2: mesh_from_sdf(lambda p: scene.sdf(2, p), resolution),
            "scene": mesh_from_sdf(scene.scene_sdf, resolution)}


def evaluate(fields, occupancy, pack, gt_meshes: dict | None = None, resolution: int = 256,
             n_samples: int = 100_000, views=None, object_fields: dict | None = None):
    """Chamfer, penetration IoU and held-out image metrics of a trained model.

    ``gt_meshes`` maps 1, 2 (and optionally "scene") to meshes; when omitted the pack's
    analytic scene is meshed at ``resolution``.  ``object_fields`` overrides the model
    used per object as ``{obj: (fields, which)}``, e.g. for two isolated single-object
    models.  Returns ``(ReconReport, artefacts)`` where artefacts holds the extracted
    meshes and rendered held-out views.
    """
    from .renderer import render_view

    if gt_meshes is None and pack.scene is not None:
        gt_meshes = analytic_gt_meshes(pack.scene, resolution)
    gt_meshes = gt_meshes or {}
    sources = {1: (fields, "object1"), 2: (fields, "object2"), "scene": (fields, "scene")}
    sources.update(object_fields or {})
    meshes, closures = {}, {}
    for key, (f, which) in sources.items():
        if f is None:
            continue
        closures[key] = field_sdf_fn(f, which)
        meshes[key] = mesh_from_sdf(closures[key], resolution)
    if "scene" not in gt_meshes and 1 in gt_meshes and 2 in gt_meshes and pack.scene is not None:
        gt_meshes["scene"] = mesh_from_sdf(pack.scene.scene_sdf, resolution)

    def cd(key):
        if key not in meshes or key not in gt_meshes:
            return None
        if meshes[key].is_empty:
            log.warning("extracted %s mesh is empty; chamfer undefined", key)
            return None
        return chamfer(meshes[key], gt_meshes[key], n_samples) * 1e3

    iou = None
    if 1 in meshes and 2 in meshes:
        iou = iou3d(meshes[1], meshes[2], resolution, closures[1], closures[2])
    ids = pack.test_ids if views is None else list(views)
    view_metrics, images = [], {}
    for v in ids:
        img = render_view(fields, occupancy, pack.cameras[v], "scene")
        images[v] = img
        p, s = image_metrics(img, pack.images[v])
        view_metrics.append(ViewMetrics(int(v), p, s))
    report = ReconReport(cd(1), cd(2), cd("scene"), iou, view_metrics,
                         extraction_resolution=resolution)
    return report, {"meshes": meshes, "images": images}
