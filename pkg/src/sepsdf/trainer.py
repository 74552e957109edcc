"""Training loop: staged mask sampling, optimisation, occupancy upkeep, checkpoints, warm start."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np
import torch

from .autodiff import (Adam, cosine_lr_factor, generator_state_from_str, generator_state_to_str,
                       load_checkpoint, save_checkpoint)
from .fields import FieldConfig, SceneFields
from .geometry import camera_rays
from .hashgrid import HashGridConfig, OccupancyGrid
from .losses import LossWeights, alpha_reg, colour_loss, eikonal_loss, sdf_reg_ablation, total_loss
from .renderer import DEFAULT_STEP, march_rays, render
from .synth import ScenePack

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-alpha-reg", "shared-mlp", "sdf-reg", "isolated")


class NumericError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    steps: int = 10_000
    rays_per_batch: int = 4096
    # when set, the ray count adapts so each step marches about this many samples
    target_samples: int | None = None
    min_rays: int = 256
    mask_p_start: float = 0.1
    mask_p_end: float = 0.8
    mask_ramp_steps: int = 5000
    balance_switch_step: int = 5000
    loss: LossWeights = field(default_factory=LossWeights)
    eikonal_points: int = 1024
    near_surface_band: float = 0.05
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    # learning rate of log(beta); None follows lr_mlp
    lr_beta: float | None = None
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-15
    lr_floor: float = 0.1
    seed: int = 0
    field: FieldConfig = field(default_factory=FieldConfig)
    occupancy_resolution: int = 128
    occupancy_every: int = 16
    occupancy_decay: float = 0.95
    occupancy_threshold: float = 1e-4
    # share of cells re-sampled per refresh (the first refresh is always complete)
    occupancy_fraction: float = 1.0
    step_size: float = DEFAULT_STEP
    max_samples: int = 1024
    checkpoint_every: int = 1000
    incremental_steps: int = 2000
    ablation: str = "none"
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.incremental_steps < 0:
            raise ValueError("steps must be >= 0")
        for p in (self.mask_p_start, self.mask_p_end):
            if not 0.0 <= p <= 1.0:
                raise ValueError("mask sampling probabilities must lie in [0, 1]")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if not 0.0 < self.occupancy_fraction <= 1.0:
            raise ValueError("occupancy_fraction must lie in (0, 1]")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        return cls.from_dict(_parse_config_text(path.read_text(), path.suffix))

    def with_ablation(self, name: str) -> "TrainConfig":
        """Config-level ablation switches."""
        cfg = TrainConfig.from_dict(self.to_dict())
        cfg.ablation = name
        if name == "no-alpha-reg":
            cfg.loss.lambda_alpha = 0.0
        elif name == "shared-mlp":
            cfg.field.head = "shared"
        elif name == "sdf-reg":
            cfg.loss.regulariser = "sdf"
        elif name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
        return cfg

    def with_overrides(self, items) -> "TrainConfig":
        """Apply ``key=value`` strings; nested keys use dots (``loss.lambda_alpha=0``)."""
        d = self.to_dict()
        for item in items:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config field {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config field {key!r}")
            try:
                node[parts[-1]] = json.loads(raw)
            except json.JSONDecodeError:
                node[parts[-1]] = raw
        return TrainConfig.from_dict(d)


def _parse_config_text(text: str, suffix: str) -> dict:
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python 3.10
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def desk_config(**overrides) -> TrainConfig:
    """Reduced profile that trains the synthetic scenes on one CPU core in about 15 minutes."""
    cfg = TrainConfig(
        steps=1200,
        rays_per_batch=512,
        mask_ramp_steps=600,
        balance_switch_step=600,
        incremental_steps=240,
        eikonal_points=512,
        occupancy_resolution=64,
        occupancy_fraction=0.25,
        checkpoint_every=400,
        lr_grid=1e-2,
        lr_mlp=1e-3,
        lr_beta=1e-2,
        # twice the default march step halves the samples per ray
        step_size=2 * DEFAULT_STEP,
        field=FieldConfig(hash=HashGridConfig(levels=8, features=2, log2_table=15,
                                              base_resolution=16, max_resolution=256)),
    )
    return cfg.with_overrides([f"{k}={json.dumps(v)}" for k, v in overrides.items()]) if overrides else cfg


# -- ray sampling --------------------------------------------------------------------

def mask_probability(step: int, config: TrainConfig) -> float:
    if config.mask_ramp_steps <= 0:
        return config.mask_p_end
    frac = min(max(step / config.mask_ramp_steps, 0.0), 1.0)
    return config.mask_p_start + frac * (config.mask_p_end - config.mask_p_start)


class RayTable:
    """Pre-computed pixel-centre rays and ground truths of a pack's training views."""

    def __init__(self, pack: ScenePack, ids=None, dtype=torch.float32):
        ids = pack.train_ids if ids is None else list(ids)
        if not ids:
            raise ValueError("no training views")
        self.view_ids = ids
        H, W = pack.cameras[ids[0]].height, pack.cameras[ids[0]].width
        cols, rows = np.meshgrid(np.arange(W), np.arange(H))
        pix = np.stack([cols.ravel(), rows.ravel()], axis=1)
        o, d, n, f = zip(*[camera_rays(pack.cameras[i], pix) for i in ids])
        self.origins = torch.tensor(np.stack(o), dtype=dtype)
        self.dirs = torch.tensor(np.stack(d), dtype=dtype)
        self.near = torch.tensor(np.stack(n), dtype=dtype)
        self.far = torch.tensor(np.stack(f), dtype=dtype)
        img = pack.images[ids].reshape(len(ids), H * W, 3)
        m1 = pack.masks1[ids].reshape(len(ids), H * W)
        m2 = pack.masks2[ids].reshape(len(ids), H * W)
        self.colour = torch.tensor(img, dtype=dtype)
        self.gt1 = torch.tensor(img * m1[..., None], dtype=dtype)
        self.gt2 = torch.tensor(img * m2[..., None], dtype=dtype)
        self.n_views, self.n_pixels = len(ids), H * W
        # pooled mask pixel lists per object, plus the foreground union
        self.pools = {}
        for key, m in (("1", m1), ("2", m2), ("fg", m1 | m2)):
            counts = m.sum(axis=1)
            empty = [ids[j] for j in range(len(ids)) if counts[j] == 0]
            if empty and key != "fg":
                log.warning("object %s mask empty in views %s; excluded from mask sampling", key, empty)
            flat = [np.nonzero(m[j])[0] for j in range(len(ids))]
            self.pools[key] = {
                "views": torch.tensor([j for j in range(len(ids)) if counts[j] > 0], dtype=torch.long),
                "pixels": [torch.tensor(fl, dtype=torch.long) for fl in flat],
                "counts": torch.tensor(counts, dtype=torch.long),
            }

    def _draw_from_pool(self, key: str, n: int, gen):
        pool = self.pools[key]
        views = pool["views"]
        if len(views) == 0:
            return None
        v = views[torch.randint(len(views), (n,), generator=gen)]
        counts = pool["counts"][v]
        r = (torch.rand(n, generator=gen, dtype=torch.float64) * counts).long().clamp(max=counts - 1)
        pix = torch.empty(n, dtype=torch.long)
        for view in torch.unique(v).tolist():
            sel = v == view
            pix[sel] = pool["pixels"][view][r[sel]]
        return v, pix


@dataclass
class RayBatch:
    origins: torch.Tensor
    dirs: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    image_ids: torch.Tensor  # index into the training views (latent ids)
    colour: torch.Tensor
    gt1: torch.Tensor
    gt2: torch.Tensor
    from_mask: torch.Tensor  # bool, drawn by mask-mode sampling
    pixel: torch.Tensor


def sample_rays(table: RayTable, step: int, gen: torch.Generator, config: TrainConfig,
                n_rays: int | None = None) -> RayBatch:
    """Mixture of mask-region and uniform pixel draws per the current schedule."""
    n = config.rays_per_batch if n_rays is None else n_rays
    p = mask_probability(step, config)
    from_mask = torch.rand(n, generator=gen, dtype=torch.float64) < p
    view = torch.randint(table.n_views, (n,), generator=gen)
    pix = torch.randint(table.n_pixels, (n,), generator=gen)
    idx = from_mask.nonzero(as_tuple=True)[0]
    if len(idx):
        if step < config.balance_switch_step:
            pick2 = torch.rand(len(idx), generator=gen, dtype=torch.float64) < 0.5
            groups = (("1", idx[~pick2], "2"), ("2", idx[pick2], "1"))
        else:
            groups = (("fg", idx, None),)
        for key, sub, fallback in groups:
            if len(sub) == 0:
                continue
            got = table._draw_from_pool(key, len(sub), gen)
            if got is None and fallback is not None:
                got = table._draw_from_pool(fallback, len(sub), gen)
            if got is None:
                from_mask[sub] = False  # no mask pixels anywhere: keep the uniform draw
                continue
            view[sub], pix[sub] = got
    return RayBatch(table.origins[view, pix], table.dirs[view, pix], table.near[view, pix],
                    table.far[view, pix], view, table.colour[view, pix], table.gt1[view, pix],
                    table.gt2[view, pix], from_mask, pix)


# -- training state ------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    fields: SceneFields
    occupancy: OccupancyGrid
    optimiser: Adam
    generator: torch.Generator
    step: int = 0
    n_rays: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, config: TrainConfig, n_images: int) -> "TrainState":
        torch.set_num_threads(max(1, int(config.threads)))
        fields = SceneFields(config.field, n_images, seed=config.seed)
        occ = OccupancyGrid(config.occupancy_resolution, config.occupancy_threshold,
                            config.occupancy_decay)
        gen = torch.Generator().manual_seed(config.seed + 1)
        return cls(config, fields, occ, _make_optimiser(fields, config), gen, 0,
                   config.rays_per_batch)

    def _names(self):
        return {id(p): n for n, p in self.fields.named_parameters()}

    def blocks(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": p.detach().numpy() for n, p in self.fields.named_parameters()}
        out.update(self.optimiser.state_blocks(self._names()))
        out.update(self.occupancy.state_blocks())
        return out

    def meta(self) -> dict:
        return {"step": self.step, "n_rays": self.n_rays,
                "generator": generator_state_to_str(self.generator),
                "n_images": self.fields.n_images,
                "last": self.history[-1] if self.history else None}

    def save(self, path) -> None:
        save_checkpoint(path, self.blocks(), self.config.to_dict(), self.meta())

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "TrainState":
        blocks, _, meta = load_checkpoint(path)
        cfg = config or TrainConfig.from_dict(meta["config"])
        state = cls.fresh(cfg, int(meta["n_images"]))
        state.load_params(blocks)
        state.optimiser.load_state_blocks(blocks, state._names())
        state.occupancy.load_state_blocks(blocks)
        state.generator.set_state(generator_state_from_str(meta["generator"]))
        state.step = int(meta["step"])
        state.n_rays = int(meta.get("n_rays", cfg.rays_per_batch))
        return state

    def load_params(self, blocks) -> None:
        with torch.no_grad():
            for n, p in self.fields.named_parameters():
                key = f"param/{n}"
                if key not in blocks:
                    raise KeyError(f"checkpoint lacks parameter {n}")
                src = torch.as_tensor(blocks[key])
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {n}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src)


def _make_optimiser(fields: SceneFields, config: TrainConfig) -> Adam:
    grid, beta, rest = fields.param_groups()
    lr_beta = config.lr_mlp if config.lr_beta is None else config.lr_beta
    return Adam([(grid, config.lr_grid), (beta, lr_beta), (rest, config.lr_mlp)], config.betas,
                config.eps)


def load_fields(path) -> tuple[SceneFields, OccupancyGrid, TrainConfig]:
    state = TrainState.load(path)
    return state.fields, state.occupancy, state.config


# -- losses for one step ---------------------------------------------------------------

def eikonal_points(batch_pts: torch.Tensor, phi_s: torch.Tensor, n: int, band: float,
                   gen: torch.Generator) -> torch.Tensor:
    """Half uniform in the cube, half drawn from marched samples with |phi_s| < band."""
    n_uniform = n - n // 2
    pts = [torch.rand(n_uniform, 3, generator=gen, dtype=batch_pts.dtype)]
    near = batch_pts[phi_s.abs() < band]
    n_near = n // 2
    if len(near) and n_near:
        pick = torch.randint(len(near), (n_near,), generator=gen)
        pts.append(near[pick])
    elif n_near:
        pts.append(torch.rand(n_near, 3, generator=gen, dtype=batch_pts.dtype))
    return torch.cat(pts).clamp(0.0, 1.0)


def step_losses(state: TrainState, rays: RayBatch):
    cfg = state.config
    fields = state.fields
    batch = march_rays(fields, state.occupancy, rays.origins, rays.dirs, rays.near, rays.far,
                       rays.image_ids, generator=state.generator, step=cfg.step_size,
                       max_samples=cfg.max_samples, stratified=True, create_graph=True)
    out = render(batch)
    col = colour_loss(out, rays.colour, rays.gt1, rays.gt2, cfg.loss.delta)
    if cfg.loss.regulariser == "sdf" and batch.phi1 is not None:
        reg = sdf_reg_ablation(batch, fields.beta, cfg.loss.lambda_t, cfg.loss.beta_grad_in_reg)
    else:
        reg = alpha_reg(batch, fields.beta, cfg.loss.lambda_t, cfg.loss.beta_grad_in_reg)
    if batch.points is not None and batch.n_samples:
        with torch.no_grad():
            m = batch.mask
            sample_pts, sample_phi = batch.points[m], batch.phi_s[m]
    else:
        sample_pts = torch.zeros(0, 3)
        sample_phi = torch.zeros(0)
    xe = eikonal_points(sample_pts.detach(), sample_phi.detach(), cfg.eikonal_points,
                        cfg.near_surface_band, state.generator)
    _, _, _, _, g1, g2, gs = fields.sdf_and_gradients(xe, create_graph=True)
    eik = eikonal_loss(g1, None if fields.config.head == "single" else g2, gs)
    return total_loss(col, reg, eik, cfg.loss), batch, out


def _dump_batch(path: Path, rays: RayBatch, report) -> None:
    np.savez(path, **{k: getattr(rays, k).detach().numpy() for k in RayBatch.__dataclass_fields__},
             losses=np.array([float(v) for v in report.as_floats().values()]))


# -- loops ---------------------------------------------------------------------------

LOG_FIELDS = ("step", "colour", "alpha_reg", "eikonal", "total", "beta", "mask_p", "n_rays",
              "n_samples", "skipped")


def _refresh_occupancy(state: TrainState, full: bool) -> None:
    occ = state.occupancy
    frac = 1.0 if full else state.config.occupancy_fraction
    occ.update(state.fields.scene_sdf, float(state.fields.beta.detach()), state.generator, fraction=frac)


def train(pack: ScenePack, config: TrainConfig, out_dir=None, warm_start=None,
          steps: int | None = None, state: TrainState | None = None, table: RayTable | None = None,
          tag: str = "", schedule_steps: int | None = None) -> TrainState:
    """Run (or continue) optimisation.  Returns the final state; writes checkpoints if ``out_dir``.

    ``steps`` is the step at which to stop (default ``config.steps``); the learning-rate
    schedule always spans ``schedule_steps`` (default ``config.steps``), so a run split
    into several calls matches an uninterrupted one.
    ``warm_start`` is a checkpoint path or a TrainState whose parameters (including
    beta and latents) seed a fresh run with new optimiser moments and schedule.
    """
    if config.ablation == "isolated":
        raise ValueError("use train_isolated for the isolated-model baseline")
    torch.set_num_threads(max(1, int(config.threads)))
    table = table or RayTable(pack)
    total = config.steps if steps is None else steps
    horizon = config.steps if schedule_steps is None else schedule_steps
    if state is None:
        state = TrainState.fresh(config, table.n_views)
        if warm_start is not None:
            src = warm_start if isinstance(warm_start, TrainState) else TrainState.load(warm_start)
            state.load_params({f"param/{n}": p.detach() for n, p in src.fields.named_parameters()})
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"train{tag}.csv"
        new = state.step == 0 or not log_path.exists()
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
    try:
        if state.step == 0 and total > 0:
            _refresh_occupancy(state, full=True)
        while state.step < total:
            s = state.step
            if s > 0 and s % config.occupancy_every == 0:
                _refresh_occupancy(state, full=False)
            rays = sample_rays(table, s, state.generator, config, n_rays=state.n_rays)
            report, batch, _ = step_losses(state, rays)
            if not torch.isfinite(report.total):
                if out is not None:
                    _dump_batch(out / f"nonfinite_step{s}{tag}.npz", rays, report)
                raise NumericError(f"non-finite loss at step {s}: {report.as_floats()}")
            report.total.backward()
            skipped = state.optimiser.step(cosine_lr_factor(s, horizon, config.lr_floor))
            row = {"step": s, **report.as_floats(), "beta": float(state.fields.beta.detach()),
                   "mask_p": mask_probability(s, config), "n_rays": state.n_rays,
                   "n_samples": batch.n_samples, "skipped": skipped}
            state.history.append(row)
            if writer is not None:
                writer.writerow(row)
            if config.target_samples:
                ratio = config.target_samples / max(batch.n_samples, 1)
                state.n_rays = int(min(max(state.n_rays * min(ratio, 1.5), config.min_rays),
                                       config.rays_per_batch * 4))
            state.step += 1
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0 \
                    and state.step < total:
                state.save(out / f"step{state.step:06d}{tag}.ckpt")
        if out is not None:
            state.save(out / f"final{tag}.ckpt")
    finally:
        if writer is not None:
            fh.close()
    return state


def train_sequence(packs: list[ScenePack], config: TrainConfig, out_dir=None) -> list[TrainState]:
    """Frame 0 from scratch for ``steps``, later frames warm-started for ``incremental_steps``."""
    if not packs:
        raise ValueError("need at least one frame")
    states = []
    prev = None
    for f, pack in enumerate(packs):
        steps = config.steps if f == 0 else config.incremental_steps
        st = train(pack, config, out_dir, warm_start=prev, steps=steps, tag=f"_frame{f:03d}",
                   schedule_steps=steps)
        states.append(st)
        prev = st
    return states


def initial_loss(pack: ScenePack, config: TrainConfig, warm_start=None, n_batches: int = 4,
                 seed: int = 1234) -> float:
    """Mean total loss of a model before any update (optionally warm-started).

    Uses a fixed generator and the same ray batches for any starting point, so values
    from different initialisations are directly comparable.
    """
    table = RayTable(pack)
    state = TrainState.fresh(config, table.n_views)
    if warm_start is not None:
        src = warm_start if isinstance(warm_start, TrainState) else TrainState.load(warm_start)
        state.load_params({f"param/{n}": p.detach() for n, p in src.fields.named_parameters()})
    _refresh_occupancy(state, full=True)
    state.generator.manual_seed(seed)
    vals = []
    for _ in range(n_batches):
        rays = sample_rays(table, 0, state.generator, config)
        report, _, _ = step_losses(state, rays)
        vals.append(float(report.total.detach()))
    return float(np.mean(vals))


# -- isolated baseline ------------------------------------------------------------------

def isolated_pack(pack: ScenePack, obj: int) -> ScenePack:
    """Object ``obj`` alone: colours masked by its mask, the other mask emptied."""
    m = pack.masks1 if obj == 1 else pack.masks2
    return ScenePack(pack.images * m[..., None], m.copy(), np.zeros_like(m), pack.cameras,
                     dict(pack.meta), pack.scene)


def train_isolated(pack: ScenePack, config: TrainConfig, out_dir=None) -> list[TrainState]:
    """Two independent single-SDF models, each fitted to one segmented object."""
    states = []
    for obj in (1, 2):
        cfg = TrainConfig.from_dict(config.to_dict())
        cfg.ablation = "none"
        cfg.field.head = "single"
        cfg.field.single_object = obj
        cfg.seed = config.seed + 100 * obj
        states.append(train(isolated_pack(pack, obj), cfg, out_dir, tag=f"_isolated{obj}"))
    return states

