"""Shared hash encoding decoded into two SDFs and one scene colour field."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import Mlp
from .geometry import sh_encode
from .hashgrid import HashGrid, HashGridConfig

# SDF value reported for an absent second object ("single" head mode)
ABSENT_SDF = 10.0
NOVEL_VIEW = -1

HEAD_MODES = ("dual", "shared", "single")


@dataclass
class FieldConfig:
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    feature_width: int = 64
    feature_layers: int = 2
    feature_dim: int = 15
    sdf_width: int = 64
    sdf_layers: int = 2
    colour_width: int = 128
    colour_layers: int = 2
    latent_dim: int = 8
    beta_init: float = 30.0
    head: str = "dual"
    # single-head models stand in for this object id at initialisation
    single_object: int = 1
    init_radius: float = 0.25
    init_offset: float = 0.1
    init_axis: int = 0

    def __post_init__(self):
        if isinstance(self.hash, dict):
            self.hash = HashGridConfig(**self.hash)
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def init_centre(self, obj: int) -> torch.Tensor:
        c = torch.full((3,), 0.5, dtype=torch.float64)
        c[self.init_axis] += self.init_offset * (-1 if obj == 1 else 1)
        return c


class FieldSample(NamedTuple):
    phi1: torch.Tensor
    phi2: torch.Tensor
    phi_s: torch.Tensor
    normal: torch.Tensor  # raw gradient of phi_s
    colour: torch.Tensor | None
    g: torch.Tensor


def union_sdf(phi1: torch.Tensor, phi2: torch.Tensor) -> torch.Tensor:
    """min(phi1, phi2); on ties the value and its gradient come from phi1."""
    return torch.where(phi1 <= phi2, phi1, phi2)


def neus_alpha(phi_i: torch.Tensor, phi_next: torch.Tensor, beta) -> torch.Tensor:
    """Discrete NeuS opacity max((s(phi_i) - s(phi_next)) / s(phi_i), 0), s = sigmoid(beta * .).

    Evaluated as ``-expm1(logsig(b*phi_next) - logsig(b*phi_i))`` for stability and
    clamped to [0, 1 - 1e-6] so log-transmittance stays finite.
    """
    beta = torch.as_tensor(beta, dtype=phi_i.dtype)
    ratio = F.logsigmoid(beta * phi_next) - F.logsigmoid(beta * phi_i)
    return (-torch.expm1(ratio)).clamp(0.0, 1.0 - 1e-6)


class SceneFields(nn.Module):
    def __init__(self, config: FieldConfig, n_images: int, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        self.grid = HashGrid(config.hash, generator=gen)
        enc_dim = 3 + config.hash.out_dim
        self.enc_dim = enc_dim
        self.feature_net = Mlp([enc_dim] + [config.feature_width] * config.feature_layers
                               + [config.feature_dim], "softplus", generator=gen)
        head_in = enc_dim + config.feature_dim
        hidden = [config.sdf_width] * config.sdf_layers
        if config.head == "dual":
            self.heads = nn.ModuleList(
                Mlp([head_in] + hidden + [1], "softplus", generator=gen) for _ in range(2))
        else:
            n_out = 2 if config.head == "shared" else 1
            self.heads = nn.ModuleList([Mlp([head_in] + hidden + [n_out], "softplus", generator=gen)])
        colour_in = 3 + 16 + 3 + 1 + config.feature_dim + config.latent_dim
        self.colour_net = Mlp([colour_in] + [config.colour_width] * config.colour_layers + [3],
                              "softplus", "sigmoid", generator=gen)
        self.log_beta = nn.Parameter(torch.tensor(math.log(config.beta_init)))
        self.latents = nn.Parameter(torch.zeros(max(n_images, 1), config.latent_dim))
        self.n_images = n_images
        self._geometric_init(gen)

    # -- parameter groups ---------------------------------------------------
    def named_blocks(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def param_groups(self):
        """(hash table, sharpness, everything else)."""
        grid = [self.grid.table]
        rest = [p for n, p in self.named_parameters() if not n.startswith("grid.") and n != "log_beta"]
        return grid, [self.log_beta], rest

    @property
    def beta(self) -> torch.Tensor:
        return self.log_beta.exp()

    # -- geometry -----------------------------------------------------------
    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        e = torch.cat([x, self.grid(x)], dim=-1)
        g = self.feature_net(e)
        return e, g

    def _head_outputs(self, e, g):
        h_in = torch.cat([e, g], dim=-1)
        if self.config.head == "dual":
            return self.heads[0](h_in)[:, 0], self.heads[1](h_in)[:, 0]
        out = self.heads[0](h_in)
        if self.config.head == "shared":
            return out[:, 0], out[:, 1]
        return out[:, 0], torch.full_like(out[:, 0], ABSENT_SDF)

    def sdfs(self, x: torch.Tensor):
        """(phi1, phi2, g) at points ``x`` of shape (N, 3)."""
        e, g = self.encode(x)
        phi1, phi2 = self._head_outputs(e, g)
        return phi1, phi2, g

    def eval_sdfs(self, x: torch.Tensor):
        phi1, phi2, _ = self.sdfs(x)
        return phi1, phi2, union_sdf(phi1, phi2)

    def scene_sdf(self, x: torch.Tensor) -> torch.Tensor:
        phi1, phi2, _ = self.sdfs(x)
        return union_sdf(phi1, phi2)

    def sdf_and_gradients(self, x: torch.Tensor, create_graph: bool = True):
        """SDF values and spatial gradients of phi1, phi2 and phi_s at ``x``."""
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            phi1, phi2, g = self.sdfs(x)
            grad1 = torch.autograd.grad(phi1.sum(), x, create_graph=create_graph,
                                        retain_graph=True)[0]
            if self.config.head == "single":
                grad2 = torch.zeros_like(grad1)
            else:
                grad2 = torch.autograd.grad(phi2.sum(), x, create_graph=create_graph,
                                            retain_graph=True)[0]
        first = (phi1 <= phi2)[:, None]
        grad_s = torch.where(first, grad1, grad2)
        return phi1, phi2, union_sdf(phi1, phi2), g, grad1, grad2, grad_s

    # -- appearance ---------------------------------------------------------
    def latent_for(self, image_ids: torch.Tensor) -> torch.Tensor:
        image_ids = torch.as_tensor(image_ids, dtype=torch.long)
        if torch.any(image_ids >= self.n_images) or torch.any(image_ids < NOVEL_VIEW):
            raise ValueError("unknown image id")
        lat = self.latents[image_ids.clamp(min=0)]
        return torch.where((image_ids == NOVEL_VIEW)[:, None], torch.zeros_like(lat), lat)

    def colour(self, x, dirs, normal, phi_s, g, image_ids) -> torch.Tensor:
        n = normal / (normal.norm(dim=-1, keepdim=True) + 1e-9)
        inp = torch.cat([x, sh_encode(dirs, check=False), n, phi_s[:, None], g,
                         self.latent_for(image_ids).to(x.dtype)], dim=-1)
        return self.colour_net(inp)

    def sample(self, x, dirs, image_ids, create_graph: bool = True,
               normal_graph: bool = False) -> FieldSample:
        """Everything the renderer needs at sample points.

        ``create_graph`` keeps SDF values and colours differentiable w.r.t. the
        parameters.  ``normal_graph`` additionally backpropagates through the
        normal fed to the colour net (a second-order pass through the encoder).
        """
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            phi1, phi2, g = self.sdfs(xg)
            phi_s = union_sdf(phi1, phi2)
            (normal,) = torch.autograd.grad(phi_s.sum(), xg, create_graph=create_graph and normal_graph,
                                            retain_graph=create_graph)
        if not create_graph:
            phi1, phi2, phi_s, g = (t.detach() for t in (phi1, phi2, phi_s, g))
        if not (create_graph and normal_graph):
            normal = normal.detach()
        col = self.colour(x.detach(), dirs, normal, phi_s, g, image_ids)
        return FieldSample(phi1, phi2, phi_s, normal, col, g)

    def eval_colour(self, x, v, image_id: int) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.log_beta.dtype).reshape(-1, 3)
        v = torch.as_tensor(v, dtype=self.log_beta.dtype).reshape(-1, 3)
        ids = torch.full((x.shape[0],), int(image_id), dtype=torch.long)
        return self.sample(x, v, ids, create_graph=False).colour

    # -- initialisation -----------------------------------------------------
    @torch.no_grad()
    def _geometric_init(self, gen: torch.Generator, n_points: int = 8192) -> None:
        """Start every head near a sphere SDF of ``init_radius`` around its object's centre.

        Hidden layers follow the usual geometric initialisation (the first layer sees
        only the centred coordinates, hash and feature inputs start with zero weight),
        then the output layer is least-squares fitted to the target spheres.
        """
        cfg = self.config
        x = torch.rand(n_points, 3, generator=gen)
        e, g = self.encode(x)
        h_in = torch.cat([e, g], dim=-1)
        x64 = x.double()
        if cfg.head == "single":
            objs = [[cfg.single_object]]
        elif cfg.head == "shared":
            objs = [[1, 2]]
        else:
            objs = [[1], [2]]
        for head, ids in zip(self.heads, objs):
            layers = head.layers
            for li, layer in enumerate(layers[:-1]):
                out_dim = layer.out_features
                w = torch.randn(layer.weight.shape, generator=gen) * math.sqrt(2.0 / out_dim)
                b = torch.zeros(out_dim)
                if li == 0:
                    w[:, 3:] = 0.0
                    # neurons alternate between object centres when one head serves both
                    centres = torch.stack([cfg.init_centre(ids[i % len(ids)]) for i in range(out_dim)])
                    b = -(w[:, :3] * centres.float()).sum(dim=1)
                layer.weight.copy_(w)
                layer.bias.copy_(b)
            feats = head.hidden(h_in).double()
            A = torch.cat([feats, torch.ones(n_points, 1, dtype=torch.float64)], dim=1)
            targets = torch.stack([(x64 - cfg.init_centre(o)).norm(dim=1) - cfg.init_radius
                                   for o in ids], dim=1)
            ridge = 1e-6 * n_points * torch.eye(A.shape[1], dtype=torch.float64)
            sol = torch.linalg.solve(A.T @ A + ridge, A.T @ targets)
            last = layers[-1]
            last.weight.copy_(sol[:-1].T.to(last.weight.dtype))
            last.bias.copy_(sol[-1].to(last.bias.dtype))
