"""Cameras, rays, image buffers and the spherical-harmonics direction encoding.

Scene coordinates live in the unit cube [0, 1]^3.  Cameras follow the
OpenCV convention (x right, y down, z forward) and store the
world-from-camera pose, so a camera-space direction ``d`` maps to the world
as ``R @ d`` and the camera centre is ``t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

BOX_MIN = 0.0
BOX_MAX = 1.0


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-from-camera
    translation: np.ndarray  # (3,) camera centre in world coordinates
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def to_dict(self) -> dict:
        return {
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy},
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        k = d["intrinsics"]
        return cls(
            fx=float(k["fx"]),
            fy=float(k["fy"]),
            cx=float(k["cx"]),
            cy=float(k["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    @property
    def hits_scene(self) -> bool:
        """False for rays that miss the unit cube (``near == far == 0``)."""
        return self.far > self.near


def look_at(eye: Sequence[float], target: Sequence[float] = (0.5, 0.5, 0.5),
            up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera rotation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: float = BOX_MIN, hi: float = BOX_MAX):
    """Slab test against the axis-aligned box.  Returns (near, far, hit)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    # a direction component of exactly 0 outside the slab never enters it
    outside = (dirs == 0) & ((origins < lo) | (origins > hi))
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    hit = (far > near) & ~outside.any(axis=1)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    return near, far, hit


def camera_rays(cam: Camera, pixels: np.ndarray, jitter: np.ndarray | float = 0.5):
    """Batched rays through integer pixel coordinates ``(col, row)`` plus jitter.

    Returns origins (N, 3), unit directions (N, 3), near (N,), far (N,).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= cam.width) or np.any(pixels[:, 1] >= cam.height):
        raise ValueError("pixel coordinates outside the image")
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), pixels.shape)
    u = pixels[:, 0] + jitter[:, 0]
    v = pixels[:, 1] + jitter[:, 1]
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=1)
    dirs = d_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.translation, dirs.shape).copy()
    near, far, _ = ray_box(origins, dirs)
    return origins, dirs, near, far


def pixel_ray(cam: Camera, px: Sequence[int], jitter: Sequence[float] = (0.5, 0.5)) -> Ray:
    o, d, near, far = camera_rays(cam, np.asarray(px)[None], np.asarray(jitter)[None])
    return Ray(o[0], d[0], float(near[0]), float(far[0]))


def project(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Continuous pixel coordinates (u, v) of world points (pixel centres at +0.5)."""
    p_cam = (np.atleast_2d(points) - cam.translation) @ cam.rotation
    return np.stack([cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx,
                     cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy], axis=1)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def orbit_cameras(n: int, radius: float = 1.6, resolution: int = 128, fov_deg: float = 40.0,
                  centre: Sequence[float] = (0.5, 0.5, 0.5)) -> list[Camera]:
    """``n`` cameras on a Fibonacci sphere around ``centre``, all looking at it."""
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for p in fibonacci_sphere(n):
        eye = np.asarray(centre) + radius * p
        cams.append(Camera(f, f, resolution / 2, resolution / 2, look_at(eye, centre), eye,
                           resolution, resolution))
    return cams


def save_cameras(path: str | Path, cams: Iterable[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1))


def load_cameras(path: str | Path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- image buffers -----------------------------------------------------------

def check_image(img: np.ndarray, binary: bool = False) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3, 4)):
        raise ValueError(f"bad image shape {img.shape}")
    if np.any(img < 0) or np.any(img > 1):
        raise ValueError("image values must lie in [0, 1]")
    if binary and not np.all((img == 0) | (img == 1)):
        raise ValueError("mask values must be 0 or 1")
    return img


def write_png(path: str | Path, img: np.ndarray) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def read_png(path: str | Path) -> np.ndarray:
    """8-bit PNG to float64 in [0, 1]; no gamma handling."""
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


# -- spherical harmonics -----------------------------------------------------

# Real SH, bands l = 0..3, graphics ordering (l, m) for m = -l..l:
#   Y00 | Y1-1 Y10 Y11 | Y2-2 Y2-1 Y20 Y21 Y22 | Y3-3 .. Y33
# with the Condon-Shortley sign folded into the constants.
SH_C0 = 0.28209479177387814
SH_C1 = 0.48860251190291987
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525251999,
         -1.0925484305920792, 0.54627421529603959)
SH_C3 = (-0.59004358992664352, 2.8906114426405538, -0.45704579946446572,
         0.3731763325901154, -0.45704579946446572, 1.4453057213202769,
         -0.59004358992664352)
SH_BANDS = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3])


def sh_encode(v: torch.Tensor | np.ndarray, check: bool = True):
    """Degree-4 (16 coefficient) real spherical-harmonic basis of unit vectors.

    Accepts (..., 3) tensors or arrays and returns (..., 16) of the same kind.
    """
    as_numpy = not torch.is_tensor(v)
    t = torch.as_tensor(np.asarray(v, dtype=np.float64)) if as_numpy else v
    if check:
        norm = t.detach().norm(dim=-1)
        if torch.any((norm - 1).abs() > 1e-6):
            raise ValueError("sh_encode expects unit vectors")
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = torch.stack([
        torch.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (3 * zz - 1),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (5 * zz - 1),
        SH_C3[3] * z * (5 * zz - 3),
        SH_C3[4] * x * (5 * zz - 1),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3 * yy),
    ], dim=-1)
    return out.numpy() if as_numpy else out
