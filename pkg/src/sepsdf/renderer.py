"""Occupancy-skipping ray marcher and the occlusion-aware two-object compositor.

Samples live on a per-ray lattice ``t_k = near + (k + u) * step`` (``u`` is one
stratified offset per ray).  A sample's opacity uses the SDF at its lattice
successor ``k + 1``; when that successor is not itself a sample (end of an
occupied run, or the last sample) the SDF is evaluated there anyway, which
is the one-step forward extrapolation ``phi(x + step * d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .fields import ABSENT_SDF, NOVEL_VIEW, SceneFields, neus_alpha, union_sdf
from .geometry import Camera, camera_rays
from .hashgrid import OccupancyGrid

DEFAULT_STEP = math.sqrt(3.0) / 256
T_STOP = 1e-4


def composite_alpha(a1, a2):
    """Opacity of hitting either object: a1 + a2 - a1 * a2."""
    return a1 + a2 - a1 * a2


def exclusive_transmittance(alpha_s: torch.Tensor) -> torch.Tensor:
    """T_i = prod_{j<i} (1 - alpha_s_j) along the last axis."""
    log_t = torch.cumsum(torch.log1p(-alpha_s), dim=-1)
    log_t = torch.cat([torch.zeros_like(log_t[..., :1]), log_t[..., :-1]], dim=-1)
    return torch.exp(log_t)


@dataclass
class RaySampleBatch:
    """Padded per-ray samples; entries with ``mask == False`` carry zero opacity."""

    t: torch.Tensor  # (R, K)
    mask: torch.Tensor  # (R, K) bool
    alpha1: torch.Tensor
    alpha2: torch.Tensor
    colour: torch.Tensor  # (R, K, 3)
    phi1: torch.Tensor | None = None
    phi2: torch.Tensor | None = None
    points: torch.Tensor | None = None  # (R, K, 3)

    def __post_init__(self):
        self.alpha_s = composite_alpha(self.alpha1, self.alpha2) * self.mask
        self.trans = exclusive_transmittance(self.alpha_s)

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def n_samples(self) -> int:
        return int(self.mask.sum())

    @property
    def phi_s(self):
        return None if self.phi1 is None else union_sdf(self.phi1, self.phi2)

    @classmethod
    def empty(cls, n_rays: int, dtype=torch.float32) -> "RaySampleBatch":
        z = torch.zeros(n_rays, 1, dtype=dtype)
        return cls(z, torch.zeros(n_rays, 1, dtype=torch.bool), z, z.clone(),
                   torch.zeros(n_rays, 1, 3, dtype=dtype))


@dataclass
class RenderOutput:
    colour_s: torch.Tensor  # (R, 3)
    colour_1: torch.Tensor
    colour_2: torch.Tensor
    cross: torch.Tensor  # sum T_s a1 a2 c
    opacity_s: torch.Tensor  # (R,)
    opacity_1: torch.Tensor
    opacity_2: torch.Tensor
    depth: torch.Tensor


def render(batch: RaySampleBatch) -> RenderOutput:
    """Integrate colours; background is black.

    The scene colour is assembled as C1 + C2 - cross (in that order), so the
    decomposition identity holds exactly.
    """
    T = batch.trans
    w1 = T * batch.alpha1
    w2 = T * batch.alpha2
    w12 = T * batch.alpha1 * batch.alpha2
    c1 = (w1[..., None] * batch.colour).sum(dim=1)
    c2 = (w2[..., None] * batch.colour).sum(dim=1)
    cross = (w12[..., None] * batch.colour).sum(dim=1)
    ws = T * batch.alpha_s
    return RenderOutput(
        colour_s=c1 + c2 - cross,
        colour_1=c1,
        colour_2=c2,
        cross=cross,
        opacity_s=ws.sum(dim=1),
        opacity_1=w1.sum(dim=1),
        opacity_2=w2.sum(dim=1),
        depth=(ws * batch.t).sum(dim=1),
    )


def _shift_next(mask: torch.Tensor) -> torch.Tensor:
    """Lattice positions k + 1 of every True entry (mask has one spare column)."""
    out = torch.zeros_like(mask)
    out[:, 1:] = mask[:, :-1]
    return out


def _lattice_sdfs(fields: SceneFields, pts: torch.Tensor, need: torch.Tensor):
    """phi1, phi2 on the lattice at ``need`` positions; elsewhere the absent value."""
    R, K1 = need.shape
    rows, cols = need.nonzero(as_tuple=True)
    phi1, phi2, _ = fields.sdfs(pts[rows, cols].clamp(0.0, 1.0))
    base = torch.full((R, K1), ABSENT_SDF, dtype=pts.dtype)
    return base.index_put((rows, cols), phi1), base.index_put((rows, cols), phi2)


def march_rays(fields: SceneFields, occupancy: OccupancyGrid | None, origins, dirs, near, far,
               image_ids=None, generator: torch.Generator | None = None,
               step: float = DEFAULT_STEP, max_samples: int = 1024, stratified: bool = True,
               create_graph: bool = True, normal_graph: bool = False) -> RaySampleBatch:
    """March rays through occupied cells and evaluate per-object opacities and colours."""
    dtype = fields.log_beta.dtype
    origins = torch.as_tensor(origins, dtype=dtype)
    dirs = torch.as_tensor(dirs, dtype=dtype)
    near = torch.as_tensor(near, dtype=dtype)
    far = torch.as_tensor(far, dtype=dtype)
    R = origins.shape[0]
    if image_ids is None:
        image_ids = torch.full((R,), NOVEL_VIEW, dtype=torch.long)
    image_ids = torch.as_tensor(image_ids, dtype=torch.long)
    hit = far > near
    if R == 0 or not bool(hit.any()):
        return RaySampleBatch.empty(R, dtype)

    K = min(int(math.ceil(float((far - near).max()) / step)), max_samples)
    if stratified:
        u = torch.rand(R, 1, generator=generator, dtype=dtype)
    else:
        u = torch.full((R, 1), 0.5, dtype=dtype)
    k = torch.arange(K + 1, dtype=dtype)[None]
    t = near[:, None] + (k + u) * step  # one spare column for successors
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    valid = (t < far[:, None]) & hit[:, None]
    valid[:, K] = False
    cand = valid if occupancy is None else valid & occupancy.lookup(pts)

    beta = fields.beta
    # pass 1: SDFs only, without graph, to find where transmittance dies
    with torch.no_grad():
        p1, p2 = _lattice_sdfs(fields, pts, cand | _shift_next(cand))
        a1 = neus_alpha(p1[:, :-1], p1[:, 1:], beta) * cand[:, :-1]
        a2 = neus_alpha(p2[:, :-1], p2[:, 1:], beta) * cand[:, :-1]
        trans = exclusive_transmittance(composite_alpha(a1, a2))
        keep = cand[:, :-1] & (trans >= T_STOP)
    if not bool(keep.any()):
        return RaySampleBatch.empty(R, dtype)
    last = int(keep.any(dim=0).nonzero().max()) + 1
    keep = keep[:, :last]
    t, pts = t[:, :last + 1], pts[:, :last + 1]
    keep1 = torch.cat([keep, torch.zeros(R, 1, dtype=torch.bool)], dim=1)

    # pass 2: full evaluation at kept samples (normals, colour) and their successors
    rows, cols = keep.nonzero(as_tuple=True)
    x = pts[rows, cols].clamp(0.0, 1.0)
    fs = fields.sample(x, dirs[rows], image_ids[rows], create_graph=create_graph,
                       normal_graph=normal_graph)
    extra = _shift_next(keep1) & ~keep1
    erows, ecols = extra.nonzero(as_tuple=True)
    e1, e2, _ = fields.sdfs(pts[erows, ecols].clamp(0.0, 1.0))
    if not create_graph:
        e1, e2 = e1.detach(), e2.detach()
    lat1 = torch.full((R, last + 1), ABSENT_SDF, dtype=dtype)
    lat1 = lat1.index_put((rows, cols), fs.phi1).index_put((erows, ecols), e1)
    lat2 = torch.full((R, last + 1), ABSENT_SDF, dtype=dtype)
    lat2 = lat2.index_put((rows, cols), fs.phi2).index_put((erows, ecols), e2)
    alpha1 = neus_alpha(lat1[:, :-1], lat1[:, 1:], beta) * keep
    alpha2 = neus_alpha(lat2[:, :-1], lat2[:, 1:], beta) * keep
    colour = torch.zeros(R, last, 3, dtype=dtype).index_put((rows, cols), fs.colour)
    return RaySampleBatch(t[:, :-1], keep, alpha1, alpha2, colour,
                          phi1=lat1[:, :-1], phi2=lat2[:, :-1], points=pts[:, :-1])


def render_rays(fields, occupancy, origins, dirs, near, far, image_ids=None, chunk: int = 4096,
                step: float = DEFAULT_STEP) -> RenderOutput:
    """Deterministic (pixel-centre, unjittered lattice) rendering in chunks, no graph."""
    outs = []
    n = len(origins)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        ids = None if image_ids is None else torch.as_tensor(image_ids)[sl]
        batch = march_rays(fields, occupancy, origins[sl], dirs[sl], near[sl], far[sl], ids,
                           step=step, stratified=False, create_graph=False)
        with torch.no_grad():
            outs.append(render(batch))
    return RenderOutput(*[torch.cat([getattr(o, f) for o in outs]).detach()
                          for f in RenderOutput.__dataclass_fields__])


def render_view(fields: SceneFields, occupancy: OccupancyGrid | None, cam: Camera,
                mode: str = "scene", image_id: int = NOVEL_VIEW, chunk: int = 4096,
                step: float = DEFAULT_STEP) -> np.ndarray:
    """Full image.  ``scene`` gives (H, W, 3); object modes give RGBA with their opacity."""
    if mode not in ("scene", "object1", "object2"):
        raise ValueError(f"unknown render mode {mode!r}")
    out = render_full(fields, occupancy, cam, image_id, chunk, step)
    return out[mode]


def render_full(fields: SceneFields, occupancy: OccupancyGrid | None, cam: Camera,
                image_id: int = NOVEL_VIEW, chunk: int = 4096, step: float = DEFAULT_STEP) -> dict:
    """All three renders of one camera plus opacities and the cross term."""
    H, W = cam.height, cam.width
    cols, rows = np.meshgrid(np.arange(W), np.arange(H))
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
    o, d, near, far = camera_rays(cam, pix)
    ids = torch.full((len(o),), int(image_id), dtype=torch.long)
    out = render_rays(fields, occupancy, torch.from_numpy(o), torch.from_numpy(d),
                      torch.from_numpy(near), torch.from_numpy(far), ids, chunk, step)

    def img(v, c=3):
        return v.double().numpy().reshape(H, W, c)

    return {
        "scene": img(out.colour_s).clip(0, 1),
        "object1": np.concatenate([img(out.colour_1), img(out.opacity_1, 1)], axis=2).clip(0, 1),
        "object2": np.concatenate([img(out.colour_2), img(out.opacity_2, 1)], axis=2).clip(0, 1),
        "cross": img(out.cross),
        "opacity_s": img(out.opacity_s, 1)[..., 0],
        "opacity_1": img(out.opacity_1, 1)[..., 0],
        "opacity_2": img(out.opacity_2, 1)[..., 0],
        "depth": img(out.depth, 1)[..., 0],
    }
