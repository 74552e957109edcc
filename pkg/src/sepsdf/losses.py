"""Training objectives: masked colour terms, penetration regularisers, Eikonal, total."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from .renderer import RaySampleBatch, RenderOutput


@dataclass
class LossWeights:
    lambda_alpha: float = 0.1
    lambda_eik: float = 0.01
    lambda_t: float = 100.0
    delta: float = 1.0
    # "alpha" (opacity products) or "sdf" (hinge products of negative SDFs)
    regulariser: str = "alpha"
    beta_grad_in_reg: bool = False

    def __post_init__(self):
        if min(self.lambda_eik, self.lambda_t, self.delta) <= 0 or self.lambda_alpha < 0:
            raise ValueError("loss weights must be positive (lambda_alpha may be 0 for ablation)")
        if self.regulariser not in ("alpha", "sdf"):
            raise ValueError(f"unknown regulariser {self.regulariser!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    colour: torch.Tensor
    alpha_reg: torch.Tensor
    eikonal: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Elementwise Huber-style smooth L1: 0.5 d^2 / delta below delta, |d| - 0.5 delta above."""
    d = (pred - target).abs()
    return torch.where(d < delta, 0.5 * d * d / delta, d - 0.5 * delta)


def colour_loss(out: RenderOutput, gt: torch.Tensor, gt1: torch.Tensor, gt2: torch.Tensor,
                delta: float = 1.0) -> torch.Tensor:
    """Per-object masked terms plus the full-scene stabiliser, channel-summed, ray-averaged."""
    per_ray = (smooth_l1(out.colour_1, gt1, delta) + smooth_l1(out.colour_2, gt2, delta)
               + smooth_l1(out.colour_s, gt, delta)).sum(dim=-1)
    return per_ray.mean()


def _beta_value(beta, keep_grad: bool):
    beta = torch.as_tensor(beta)
    return beta if keep_grad else beta.detach()


def alpha_reg(batch: RaySampleBatch, beta, lambda_t: float = 100.0,
              beta_grad: bool = False) -> torch.Tensor:
    """sum over samples of exp((beta / lambda_t) a1 a2) - 1, averaged over rays."""
    b = _beta_value(beta, beta_grad)
    prod = batch.alpha1 * batch.alpha2 * batch.mask
    return torch.expm1(b / lambda_t * prod).sum(dim=1).mean()


def sdf_reg_ablation(batch: RaySampleBatch, beta, lambda_t: float = 100.0,
                     beta_grad: bool = False) -> torch.Tensor:
    """SDF-level alternative: penalise both SDFs being negative at the same sample."""
    b = _beta_value(beta, beta_grad)
    hinge = torch.relu(-batch.phi1) * torch.relu(-batch.phi2) * batch.mask
    return torch.expm1(b / lambda_t * hinge).sum(dim=1).mean()


def eikonal_loss(grad1: torch.Tensor, grad2: torch.Tensor | None, grad_s: torch.Tensor) -> torch.Tensor:
    """Mean over points of (|grad phi1| - 1)^2 + (|grad phi2| - 1)^2 + (|grad phi_s| - 1)^2.

    ``grad2`` is None for single-object models, which drops its term.
    """
    terms = (grad1.norm(dim=-1) - 1) ** 2 + (grad_s.norm(dim=-1) - 1) ** 2
    if grad2 is not None:
        terms = terms + (grad2.norm(dim=-1) - 1) ** 2
    return terms.mean()


def total_loss(colour: torch.Tensor, reg: torch.Tensor, eik: torch.Tensor,
               weights: LossWeights) -> LossReport:
    total = colour + weights.lambda_alpha * reg + weights.lambda_eik * eik
    return LossReport(colour, reg, eik, total)
