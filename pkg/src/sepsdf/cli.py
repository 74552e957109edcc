"""Command-line entry point: scene generation, training, rendering, extraction, evaluation."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields as dc_fields, is_dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .geometry import write_png
from .mesh_eval import REPORT_SCHEMA, ReconReport, TriangleMesh, analytic_gt_meshes, evaluate, extract_mesh
from .synth import SCENE_IDS, generate_pack, gt_mesh_paths, load_pack, save_pack
from .trainer import (ABLATIONS, NumericError, TrainConfig, TrainState, desk_config, train,
                      train_isolated, train_sequence)

log = logging.getLogger("sepsdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "SEPSDF_THREADS"
PROFILES = ("desk", "paper")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- manifests ---------------------------------------------------------------------

def _now() -> str:
    # reproducible-build convention: a fixed epoch makes manifests byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


def content_hash(paths) -> str:
    """sha256 over the relative names and bytes of every file under ``paths``."""
    h = hashlib.sha256()
    for root in sorted(Path(p) for p in paths):
        files = [root] if root.is_file() else sorted(q for q in root.rglob("*") if q.is_file())
        for f in files:
            if f.name == "manifest.json":
                continue
            rel = f.name if f == root else f.relative_to(root).as_posix()
            h.update(rel.encode() + b"\0")
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], started: str, config: dict | None = None,
                   seed: int | None = None, inputs=()) -> None:
    outputs = sorted(p.relative_to(out).as_posix() for p in out.rglob("*")
                     if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "argv": _portable_argv(argv),
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "input_hash": content_hash(inputs) if inputs else None,
        "started": started,
        "finished": _now(),
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _portable_argv(argv: list[str]) -> list[str]:
    """argv with the output directory written as ".", since the manifest lives inside it."""
    out, skip = [], False
    for a in argv:
        if skip:
            out.append(".")
            skip = False
        elif a == "--out":
            out.append(a)
            skip = True
        elif a.startswith("--out="):
            out.append("--out=.")
        else:
            out.append(a)
    return out


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- config handling -----------------------------------------------------------------

def _flat_fields(obj, prefix=""):
    for f in dc_fields(obj):
        v = getattr(obj, f.name)
        if is_dataclass(v):
            yield from _flat_fields(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def config_help() -> str:
    lines = ["config fields (set with --set key=value; nested keys use dots).",
             "defaults shown for the desk profile:"]
    lines += [f"  {k} = {json.dumps(v)}" for k, v in _flat_fields(desk_config())]
    return "\n".join(lines)


def build_config(args) -> TrainConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        cfg = TrainConfig.from_file(path)
    else:
        cfg = desk_config() if args.profile == "desk" else TrainConfig()
    items = list(args.set or [])
    if args.steps is not None:
        items.append(f"steps={args.steps}")
    if args.seed is not None:
        items.append(f"seed={args.seed}")
    items.append(f"threads={args.threads}")
    try:
        cfg = cfg.with_overrides(items)
        if getattr(args, "ablate", None) and args.ablate != "none":
            cfg = cfg.with_ablation(args.ablate)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    return cfg


def _load_pack(path):
    try:
        return load_pack(path)
    except (FileNotFoundError, ValueError, KeyError, OSError) as e:
        raise DataError(f"cannot load scene pack {path}: {e}") from e


def _load_state(path) -> TrainState:
    try:
        return TrainState.load(path)
    except (FileNotFoundError, ValueError, KeyError, OSError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from e


def _resolve_model(path):
    """(fields, occupancy, object_fields) of a checkpoint or of an isolated-run directory."""
    p = Path(path)
    if p.is_dir():
        iso = [p / "final_isolated1.ckpt", p / "final_isolated2.ckpt"]
        if all(f.exists() for f in iso):
            s1, s2 = (_load_state(f) for f in iso)
            return None, None, {1: (s1.fields, "object1"), 2: (s2.fields, "object1"), "scene": (None, "")}
        p = p / "final.ckpt"
    st = _load_state(p)
    return st.fields, st.occupancy, None


# -- figures -------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(history: list[dict], path: Path) -> None:
    if not history:
        return
    plt = _pyplot()
    steps = [r["step"] for r in history]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("colour", "alpha_reg", "eikonal", "total"):
        axes[0].semilogy(steps, np.maximum([r[key] for r in history], 1e-12), label=key)
    axes[0].set_xlabel("step")
    axes[0].legend(fontsize=7)
    axes[1].plot(steps, [r["beta"] for r in history])
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("beta")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_views(pack, images: dict, path: Path) -> None:
    if not images:
        return
    plt = _pyplot()
    ids = sorted(images)
    fig, axes = plt.subplots(2, len(ids), figsize=(2.2 * len(ids), 4.4), squeeze=False)
    for j, v in enumerate(ids):
        axes[0, j].imshow(pack.images[v])
        axes[0, j].set_title(f"view {v} gt", fontsize=8)
        axes[1, j].imshow(images[v])
        axes[1, j].set_title("render", fontsize=8)
        for a in axes[:, j]:
            a.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablations(rows: list[dict], path: Path) -> None:
    plt = _pyplot()
    names = [r["ablation"] for r in rows]
    keys = ("chamfer_obj1", "chamfer_obj2", "iou3d")
    fig, axes = plt.subplots(1, len(keys), figsize=(3.4 * len(keys), 3.2))
    for ax, k in zip(axes, keys):
        ax.bar(names, [np.nan if r[k] is None else r[k] for r in rows])
        ax.set_title(k, fontsize=9)
        ax.tick_params(axis="x", labelrotation=45, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(report: ReconReport, out: Path, stem: str = "report") -> None:
    import jsonschema

    d = report.to_dict()
    jsonschema.validate(d, REPORT_SCHEMA)
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for v in report.views:
            w.writerow([v.view, v.psnr, v.ssim])


# -- commands ------------------------------------------------------------------------

def cmd_gen_scene(args) -> dict:
    out = _prepare_out(args.out, args.force)
    for f in range(args.frames):
        angle = args.angle + f * args.angle_step
        pack = generate_pack(args.scene, args.contact, args.n_train, args.n_test, args.resolution,
                             args.seed, angle)
        meshes = {k: m for k, m in analytic_gt_meshes(pack.scene, args.gt_resolution).items()
                  if k in (1, 2)}
        target = out if args.frames == 1 else out / f"frame{f:03d}"
        save_pack(pack, target, meshes)
    print(f"wrote {args.frames} pack(s) with {args.n_train} train + {args.n_test} test views to {out}")
    return {"seed": args.seed, "config": {k: v for k, v in vars(args).items() if k not in ("func", "out")}}


def cmd_train(args) -> dict:
    cfg = build_config(args)
    pack = _load_pack(args.pack)
    out = _prepare_out(args.out, args.force)
    if cfg.ablation == "isolated":
        if args.warm_start:
            raise UsageError("--warm-start is not supported with --ablate isolated")
        states = train_isolated(pack, cfg, out)
        for i, st in enumerate(states, 1):
            plot_losses(st.history, out / f"loss_isolated{i}.png")
    else:
        warm = args.warm_start
        if warm is not None and not Path(warm).exists():
            raise DataError(f"warm-start checkpoint {warm} not found")
        state = train(pack, cfg, out, warm_start=warm)
        plot_losses(state.history, out / "loss.png")
        if state.history:
            print(f"step {state.step}: total loss {state.history[-1]['total']:.5f}, "
                  f"beta {state.history[-1]['beta']:.2f}")
    print(f"checkpoints and log written to {out}")
    return {"seed": cfg.seed, "config": cfg.to_dict(), "inputs": [args.pack]}


def cmd_train_seq(args) -> dict:
    cfg = build_config(args)
    packs = [_load_pack(p) for p in args.packs]
    out = _prepare_out(args.out, args.force)
    states = train_sequence(packs, cfg, out)
    for f, st in enumerate(states):
        plot_losses(st.history, out / f"loss_frame{f:03d}.png")
        if st.history:
            print(f"frame {f}: initial loss {st.history[0]['total']:.5f}, "
                  f"final {st.history[-1]['total']:.5f}")
    return {"seed": cfg.seed, "config": cfg.to_dict(), "inputs": list(args.packs)}


def cmd_render(args) -> dict:
    from .renderer import render_full

    st = _load_state(args.checkpoint)
    pack = _load_pack(args.pack)
    out = _prepare_out(args.out, args.force)
    views = args.views if args.views else (pack.test_ids or list(range(len(pack.cameras))))
    for v in views:
        if not 0 <= v < len(pack.cameras):
            raise UsageError(f"view {v} out of range")
    for mode in args.modes:
        (out / mode).mkdir(exist_ok=True)
    sheets = {}
    for v in views:
        full = render_full(st.fields, st.occupancy, pack.cameras[v])
        for mode in args.modes:
            write_png(out / mode / f"{v:04d}.png", full[mode])
        sheets[v] = full
    plt = _pyplot()
    fig, axes = plt.subplots(len(views), len(args.modes), figsize=(2.2 * len(args.modes), 2.2 * len(views)),
                             squeeze=False)
    for i, v in enumerate(views):
        for j, mode in enumerate(args.modes):
            img = sheets[v][mode]
            axes[i, j].imshow(img[..., :3] * img[..., 3:] if img.shape[-1] == 4 else img)
            axes[i, j].set_title(f"{mode} {v}", fontsize=8)
            axes[i, j].axis("off")
    fig.tight_layout()
    fig.savefig(out / "renders.png", dpi=100)
    plt.close(fig)
    print(f"rendered {len(views)} view(s) x {len(args.modes)} mode(s) to {out}")
    return {"inputs": [args.checkpoint, args.pack]}


def cmd_extract(args) -> dict:
    st = _load_state(args.checkpoint)
    out = _prepare_out(args.out, args.force)
    for which in args.which:
        mesh = extract_mesh(st.fields, which, args.resolution, args.largest_component)
        if mesh.is_empty:
            log.warning("%s: empty level set", which)
        mesh.save_obj(out / f"{which}.obj")
        print(f"{which}: {len(mesh.vertices)} vertices, {len(mesh.faces)} triangles")
    return {"inputs": [args.checkpoint], "config": {"resolution": args.resolution}}


def cmd_eval(args) -> dict:
    fields, occ, obj_fields = _resolve_model(args.checkpoint)
    pack = _load_pack(args.pack)
    out = _prepare_out(args.out, args.force)
    gt = {k: TriangleMesh.load_obj(p) for k, p in gt_mesh_paths(args.pack).items()}
    if not gt and pack.scene is not None:
        gt = None  # mesh the analytic scene instead
    report, art = _evaluate(fields, occ, pack, gt, args.resolution, args.samples, obj_fields)
    write_report(report, out)
    plot_views(pack, art["images"], out / "views.png")
    print(report.table())
    return {"inputs": [args.checkpoint, args.pack], "config": {"resolution": args.resolution,
                                                              "samples": args.samples}}


def _evaluate(fields, occ, pack, gt, resolution, samples, obj_fields):
    if fields is None:  # isolated pair: geometry only
        f1 = obj_fields[1][0]
        return evaluate(f1, None, pack, gt, resolution, samples, views=[], object_fields=obj_fields)
    return evaluate(fields, occ, pack, gt, resolution, samples)


def cmd_ablate_suite(args) -> dict:
    base = build_config(args)
    pack = _load_pack(args.pack)
    out = _prepare_out(args.out, args.force)
    rows = []
    for name in args.ablations:
        cfg = base.with_ablation(name) if name != "none" else base
        sub = out / name
        sub.mkdir(exist_ok=True)
        if name == "isolated":
            states = train_isolated(pack, cfg, sub)
            obj = {1: (states[0].fields, "object1"), 2: (states[1].fields, "object1"), "scene": (None, "")}
            report, _ = evaluate(states[0].fields, None, pack, None, args.resolution, args.samples,
                                 views=[], object_fields=obj)
        else:
            st = train(pack, cfg, sub)
            report, _ = evaluate(st.fields, st.occupancy, pack, None, args.resolution, args.samples)
        write_report(report, sub)
        row = {"ablation": name, **{k: v for k, v in report.to_dict().items() if k != "views"}}
        rows.append(row)
        print(f"[{name}]\n{report.table()}")
    (out / "ablations.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    with open(out / "ablations.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    plot_ablations(rows, out / "ablations.png")
    return {"seed": base.seed, "config": base.to_dict(), "inputs": [args.pack]}


# -- parser --------------------------------------------------------------------------

def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"torch threads (default from ${THREADS_ENV}, else 1; 1 is the deterministic path)")


def _add_config(p, ablate=True):
    p.add_argument("--config", help="TOML or JSON file holding config fields")
    p.add_argument("--profile", choices=PROFILES, default="desk",
                   help="defaults when no --config is given: desk (CPU scale) or paper")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--steps", type=int, help="shortcut for --set steps=N")
    p.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    if ablate:
        p.add_argument("--ablate", choices=ABLATIONS, default="none", help="config-level ablation")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="sepsdf", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic scene pack")
    p.add_argument("--scene", choices=SCENE_IDS, default="two-spheres-touching")
    p.add_argument("--contact", type=float, default=0.0, help="penetration depth (<0 leaves a gap)")
    p.add_argument("--angle", type=float, default=0.0, help="swing of object 2 in degrees")
    p.add_argument("--frames", type=int, default=1, help="write a moving sequence of this many frames")
    p.add_argument("--angle-step", type=float, default=5.0, help="angle change per frame")
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--gt-resolution", type=int, default=256, help="marching-cubes grid of the GT meshes")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="fit the two-object model to a pack", epilog=config_help(),
                       formatter_class=fmt)
    p.add_argument("--pack", required=True)
    p.add_argument("--warm-start", help="checkpoint whose parameters seed this run")
    _add_config(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-seq", help="train consecutive frames with warm starts", epilog=config_help(),
                       formatter_class=fmt)
    p.add_argument("--packs", nargs="+", required=True, help="pack directories in frame order")
    _add_config(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_seq)

    p = sub.add_parser("render", help="render scene and per-object images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pack", required=True, help="pack supplying the cameras")
    p.add_argument("--views", type=int, nargs="*", help="camera indices (default: held-out views)")
    p.add_argument("--modes", nargs="+", choices=("scene", "object1", "object2"),
                   default=["scene", "object1", "object2"])
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract-mesh", help="marching cubes on the learned SDFs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", nargs="+", choices=("scene", "object1", "object2"),
                   default=["scene", "object1", "object2"])
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--largest-component", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="Chamfer, penetration IoU, PSNR and SSIM report")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint, or a train output directory (isolated runs need the directory)")
    p.add_argument("--pack", required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--samples", type=int, default=100_000, help="surface samples per mesh for Chamfer")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-suite", help="train and evaluate every ablation on one pack",
                       epilog=config_help(), formatter_class=fmt)
    p.add_argument("--pack", required=True)
    p.add_argument("--ablations", nargs="+", choices=ABLATIONS, default=list(ABLATIONS))
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--samples", type=int, default=100_000)
    _add_config(p, ablate=False)
    _add_common(p)
    p.set_defaults(func=cmd_ablate_suite)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    started = _now()
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        info = args.func(args) or {}
        write_manifest(Path(args.out), args.command, argv, started, info.get("config"),
                       info.get("seed"), info.get("inputs", ()))
    except UsageError as e:
        print(f"sepsdf {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"sepsdf {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"sepsdf {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"sepsdf {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
