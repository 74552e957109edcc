"""Reverse-mode differentiation helpers, MLP layers, Adam and checkpoint I/O.

Gradients come from torch autograd; this module pins down the small surface
the rest of the package relies on: a single-use :class:`Tape`, the
:class:`Mlp` building block, spatial gradients with double-backward support
for the Eikonal term, an Adam variant that skips non-finite parameter blocks,
and the versioned binary checkpoint format.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)


class TapeError(RuntimeError):
    pass


class Tape:
    """Records one forward result and allows exactly one backward pass over it."""

    def __init__(self):
        self._output: torch.Tensor | None = None
        self._consumed = False

    def record(self, output: torch.Tensor) -> torch.Tensor:
        self._output = output
        self._consumed = False
        return output

    def backward(self, output_grad: torch.Tensor | None = None) -> None:
        if self._output is None:
            raise TapeError("backward called before any forward was recorded")
        if self._consumed:
            raise TapeError("tape already consumed; run forward again before backward")
        self._consumed = True
        self._output.backward(output_grad)


_ACTIVATIONS = {
    "softplus": lambda: nn.Softplus(beta=100.0),
    "relu": nn.ReLU,
    "silu": nn.SiLU,
    "none": nn.Identity,
    "sigmoid": nn.Sigmoid,
}


class Mlp(nn.Module):
    """Fully connected net: ``widths = [in, hidden..., out]``."""

    def __init__(self, widths: Sequence[int], activation: str = "softplus",
                 output_activation: str = "none", generator: torch.Generator | None = None):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.act = _ACTIVATIONS[activation]()
        self.out_act = _ACTIVATIONS[output_activation]()
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Activations of the last hidden layer."""
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out_act(self.layers[-1](self.hidden(x)))


def spatial_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                     create_graph: bool = True):
    """Evaluate ``fn`` at ``x`` and return ``(value, d value / d x)``.

    With ``create_graph`` the gradient stays differentiable, so losses on it
    (Eikonal, normals fed to the colour net) backpropagate into the weights.
    """
    with torch.enable_grad():
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        y = fn(x)
        (g,) = torch.autograd.grad(y.sum(), x, create_graph=create_graph)
    return y, g


def cosine_lr_factor(step: int, total: int, floor: float = 0.1) -> float:
    """Cosine decay from 1 to ``floor`` over ``total`` steps."""
    if total <= 0:
        return 1.0
    frac = min(max(step / total, 0.0), 1.0)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Bias-corrected Adam over parameter groups ``[(params, lr), ...]``.

    A block whose gradient contains NaN/inf is left untouched for that step
    (with a warning) instead of poisoning the moments.
    """

    def __init__(self, groups: Iterable[tuple[Iterable[nn.Parameter], float]],
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-15):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.betas = betas
        self.eps = eps
        self.state: dict[int, dict] = {}
        for params, _ in self.groups:
            for p in params:
                self.state[id(p)] = {"t": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}

    def params(self):
        for params, _ in self.groups:
            yield from params

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    @torch.no_grad()
    def step(self, lr_scale: float = 1.0) -> int:
        """Apply one update and clear gradients.  Returns the number of skipped blocks."""
        b1, b2 = self.betas
        skipped = 0
        for params, lr in self.groups:
            for p in params:
                g = p.grad
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    log.warning("non-finite gradient in parameter block of shape %s; update skipped",
                                tuple(p.shape))
                    skipped += 1
                    continue
                st = self.state[id(p)]
                st["t"] += 1
                st["m"].mul_(b1).add_(g, alpha=1 - b1)
                st["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
                mhat = st["m"] / (1 - b1 ** st["t"])
                vhat = st["v"] / (1 - b2 ** st["t"])
                p.sub_(lr * lr_scale * mhat / (vhat.sqrt() + self.eps))
        self.zero_grad()
        return skipped

    def state_blocks(self, names: Mapping[int, str]) -> dict[str, np.ndarray]:
        out = {}
        for p in self.params():
            st = self.state[id(p)]
            name = names[id(p)]
            out[f"adam.m/{name}"] = st["m"].detach().cpu().numpy()
            out[f"adam.v/{name}"] = st["v"].detach().cpu().numpy()
            out[f"adam.t/{name}"] = np.array([st["t"]], dtype=np.float32)
        return out

    def load_state_blocks(self, blocks: Mapping[str, np.ndarray], names: Mapping[int, str]) -> None:
        for p in self.params():
            name = names[id(p)]
            if f"adam.m/{name}" not in blocks:
                continue
            st = self.state[id(p)]
            st["m"] = torch.as_tensor(blocks[f"adam.m/{name}"], dtype=p.dtype).reshape(p.shape).clone()
            st["v"] = torch.as_tensor(blocks[f"adam.v/{name}"], dtype=p.dtype).reshape(p.shape).clone()
            st["t"] = int(blocks[f"adam.t/{name}"][0])


# -- checkpoint format ---------------------------------------------------------
#
#   magic "SEPSDFCK" | u32 version | 32-byte sha256 of the config JSON
#   | u32 meta length | meta JSON (utf-8) | u32 block count
#   | per block: u16 name length, name, u8 ndim, u32 dims..., float32 LE data

MAGIC = b"SEPSDFCK"
VERSION = 1


def config_hash(config: Mapping) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


def save_checkpoint(path: str | Path, blocks: Mapping[str, np.ndarray | torch.Tensor],
                    config: Mapping, meta: Mapping | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("config", config)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), config_hash(config),
             struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        if torch.is_tensor(arr):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path):
    """Returns ``(blocks, config_hash_bytes, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    chash = buf[12:44]
    (mlen,) = struct.unpack_from("<I", buf, 44)
    off = 48
    meta = json.loads(buf[off:off + mlen].decode())
    off += mlen
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    blocks = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if config_hash(meta["config"]) != chash:
        raise ValueError(f"{path}: config hash mismatch")
    return blocks, chash, meta


def generator_state_to_str(g: torch.Generator) -> str:
    return base64.b64encode(g.get_state().numpy().tobytes()).decode()


def generator_state_from_str(s: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())
