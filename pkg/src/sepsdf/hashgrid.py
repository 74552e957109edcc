"""Multi-resolution hash-grid encoding and the occupancy grid for empty-space skipping."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)

# corner offsets in (i, j, k) order, bit b of the corner id selects +1 on axis b
_CORNERS = torch.tensor([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])


@dataclass
class HashGridConfig:
    levels: int = 18
    features: int = 2
    log2_table: int = 19
    base_resolution: int = 16
    max_resolution: int = 8192

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ValueError("levels and features must be >= 1")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")

    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> list[int]:
        """R_l = floor(base * b^l) with b chosen so the last level hits max_resolution."""
        if self.levels == 1:
            return [self.base_resolution]
        b = math.exp(math.log(self.max_resolution / self.base_resolution) / (self.levels - 1))
        # the small epsilon keeps floor() from dropping the exact endpoint
        return [int(math.floor(self.base_resolution * b ** l + 1e-9)) for l in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)


def hash_index(resolution: int, ijk, table_size: int):
    """Table slot for integer corner coordinates (works on ints, arrays and int64 tensors)."""
    if torch.is_tensor(ijk):
        i, j, k = ijk[..., 0], ijk[..., 1], ijk[..., 2]
    else:
        arr = np.asarray(ijk, dtype=np.int64)
        i, j, k = arr[..., 0], arr[..., 1], arr[..., 2]
    side = resolution + 1
    if side ** 3 <= table_size:
        idx = i + j * side + k * side * side
    else:
        idx = (i * PRIMES[0]) ^ (j * PRIMES[1]) ^ (k * PRIMES[2])
        idx = idx % table_size
    if not torch.is_tensor(idx) and np.ndim(idx) == 0:
        return int(idx)
    return idx


class HashGrid(nn.Module):
    """Learnable feature lattice; ``forward(x)`` returns (N, levels * features)."""

    def __init__(self, config: HashGridConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        res = config.resolutions()
        self.register_buffer("res", torch.tensor(res, dtype=torch.int64), persistent=False)
        T = config.table_size
        # dense levels get exactly (R+1)^3 rows, hashed levels get T rows
        sizes = [min((r + 1) ** 3, T) for r in res]
        self.dense = [(r + 1) ** 3 <= T for r in res]
        self.register_buffer("is_dense", torch.tensor(self.dense), persistent=False)
        # resolutions grow with the level, so dense levels always come first
        self.n_dense = sum(self.dense)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.register_buffer("offsets", torch.tensor(offsets[:-1], dtype=torch.int64), persistent=False)
        self.table = nn.Parameter(
            torch.empty(int(offsets[-1]), config.features).uniform_(-1e-4, 1e-4, generator=generator))
        self._warned = False

    def corner_rows(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Global table rows (N, L, 8) of the cell corners around ``x``, plus the fractional offsets."""
        N = x.shape[0]
        T = self.config.table_size
        scaled = x[:, None, :] * self.res.to(x.dtype)[None, :, None]  # (N, L, 3)
        base = torch.floor(scaled.detach()).long()
        base = torch.minimum(base, (self.res - 1).view(1, -1, 1))
        frac = scaled - base.to(x.dtype)  # carries d/dx = R
        ax = torch.stack([base, base + 1], dim=-1)  # (N, L, 3, 2)
        nd = self.n_dense
        out = []
        # corner id = i + 2j + 4k, so broadcasting lays corners out as (k, j, i)
        if nd:
            a = ax[:, :nd]
            side = (self.res[:nd] + 1).view(1, -1, 1)
            i, j, k = a[:, :, 0], a[:, :, 1] * side, a[:, :, 2] * side * side
            out.append((k[:, :, :, None, None] + j[:, :, None, :, None]
                        + i[:, :, None, None, :]).reshape(N, nd, 8))
        if nd < self.config.levels:
            a = ax[:, nd:]
            i, j, k = a[:, :, 0] * PRIMES[0], a[:, :, 1] * PRIMES[1], a[:, :, 2] * PRIMES[2]
            h = (k[:, :, :, None, None] ^ j[:, :, None, :, None] ^ i[:, :, None, None, :]) & (T - 1)
            out.append(h.reshape(N, self.config.levels - nd, 8))
        rows = torch.cat(out, dim=1) if len(out) > 1 else out[0]
        return rows + self.offsets.view(1, -1, 1), frac

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if (x.detach() < 0).any() or (x.detach() > 1).any():
            if not self._warned:
                log.warning("hash-grid input outside the unit cube; clamping")
                self._warned = True
            x = x.clamp(0.0, 1.0)
        L, F = self.config.levels, self.config.features
        rows, frac = self.corner_rows(x)
        feats = _gather_rows(self.table, rows.reshape(-1)).reshape(-1, 8, F)
        w1 = torch.stack([1 - frac, frac], dim=-1)  # (N, L, 3, 2)
        wx, wy, wz = w1[:, :, 0], w1[:, :, 1], w1[:, :, 2]
        w = wz[:, :, :, None, None] * wy[:, :, None, :, None] * wx[:, :, None, None, :]
        return torch.bmm(w.reshape(-1, 1, 8), feats).reshape(x.shape[0], L * F)


class _GatherRows(torch.autograd.Function):
    """table[rows] with an index_add backward (faster than the generic index backward on CPU).

    The backward is built from differentiable ops, so second-order passes work.
    """

    @staticmethod
    def forward(ctx, table, rows):
        ctx.save_for_backward(rows)
        ctx.n_rows = table.shape[0]
        return table.index_select(0, rows)

    @staticmethod
    def backward(ctx, grad):
        (rows,) = ctx.saved_tensors
        out = torch.zeros(ctx.n_rows, grad.shape[1], dtype=grad.dtype).index_add(0, rows, grad)
        return out, None


def _gather_rows(table: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
    return _GatherRows.apply(table, rows)


class OccupancyGrid:
    """Binary occupancy over the unit cube driven by a max-opacity estimate per cell.

    Cells are occupied iff their estimate is >= ``threshold``.  The estimate
    is the NeuS opacity of one virtual step of length ``step`` taken towards
    the surface from the smallest SDF value the cell can contain (the sample
    value minus the cell diagonal, since the SDF is 1-Lipschitz).
    """

    def __init__(self, resolution: int = 128, threshold: float = 1e-4, decay: float = 0.95,
                 step: float = 1.0 / 256):
        self.resolution = resolution
        self.threshold = threshold
        self.decay = decay
        self.step = step
        self.estimate = torch.zeros(resolution ** 3)
        self.occupied = torch.zeros(resolution ** 3, dtype=torch.bool)

    def cell_index(self, x: torch.Tensor) -> torch.Tensor:
        R = self.resolution
        ijk = (x.detach() * R).floor().long().clamp(0, R - 1)
        return ijk[..., 0] + R * ijk[..., 1] + R * R * ijk[..., 2]

    def lookup(self, x: torch.Tensor) -> torch.Tensor:
        return self.occupied[self.cell_index(x)]

    def proxy(self, phi: torch.Tensor, beta: float) -> torch.Tensor:
        from .fields import neus_alpha

        phi_min = phi - math.sqrt(3.0) / self.resolution
        return neus_alpha(phi_min, phi_min - self.step, torch.as_tensor(beta, dtype=phi.dtype))

    @torch.no_grad()
    def update(self, sdf_fn, beta: float, generator: torch.Generator | None = None,
               chunk: int = 1 << 16, fraction: float = 1.0, dtype=torch.float32) -> None:
        """Decay old estimates, max-merge fresh ones from jittered cell samples of ``sdf_fn``.

        With ``fraction`` < 1 only a random subset of cells is re-sampled; the rest
        just decay.
        """
        R = self.resolution
        n = R ** 3
        if fraction >= 1.0:
            idx = torch.arange(n)
        else:
            idx = torch.randperm(n, generator=generator)[:max(1, int(round(fraction * n)))]
        ijk = torch.stack([idx % R, (idx // R) % R, idx // (R * R)], dim=1).to(dtype)
        jitter = torch.rand(len(idx), 3, generator=generator, dtype=dtype)
        fresh = torch.empty(len(idx))
        for s in range(0, len(idx), chunk):
            pts = (ijk[s:s + chunk] + jitter[s:s + chunk]) / R
            phi = sdf_fn(pts).reshape(-1).float()
            fresh[s:s + chunk] = self.proxy(phi, beta)
        est = self.estimate * self.decay
        est[idx] = torch.maximum(est[idx], fresh)
        self.estimate = est
        self.occupied = self.estimate >= self.threshold

    def fill(self, value: float = 1.0) -> None:
        self.estimate.fill_(value)
        self.occupied = self.estimate >= self.threshold

    def state_blocks(self) -> dict[str, np.ndarray]:
        return {"occupancy.estimate": self.estimate.numpy().reshape(self.resolution, self.resolution,
                                                                    self.resolution)}

    def load_state_blocks(self, blocks) -> None:
        if "occupancy.estimate" in blocks:
            est = torch.as_tensor(blocks["occupancy.estimate"]).reshape(-1).float()
            if est.numel() == self.resolution ** 3:
                self.estimate = est.clone()
                self.occupied = self.estimate >= self.threshold
