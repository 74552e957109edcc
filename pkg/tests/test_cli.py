import json

import jsonschema
import numpy as np
import pytest

from sepsdf.autodiff import load_checkpoint
from sepsdf.cli import build_parser, main
from sepsdf.mesh_eval import REPORT_SCHEMA
from sepsdf.synth import load_pack
from sepsdf.trainer import TrainState

TINY = ["--set", "rays_per_batch=64", "--set", "eikonal_points=64", "--set", "occupancy_resolution=16",
        "--set", "step_size=0.02", "--set", "target_samples=null", "--set", "checkpoint_every=0",
        "--set", "field.hash.levels=4", "--set", "field.hash.log2_table=12",
        "--set", "field.hash.base_resolution=4", "--set", "field.hash.max_resolution=32"]


def _gen(out, *extra):
    return main(["gen-scene", "--out", str(out), "--n-train", "8", "--n-test", "2", "--resolution", "16",
                 "--gt-resolution", "64", *extra])


@pytest.fixture(scope="module")
def pack_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "pack"
    assert _gen(out, "--contact", "0.01") == 0
    return out


@pytest.fixture(scope="module")
def ckpt_dir(pack_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--pack", str(pack_dir), "--out", str(out), "--steps", "2", *TINY]) == 0
    return out


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_gen_scene_defaults_and_layout(pack_dir):
    p = build_parser().parse_args(["gen-scene", "--out", "x"])
    assert (p.n_train, p.n_test, p.resolution, p.seed) == (20, 4, 128, 0)
    pack = load_pack(pack_dir)
    assert len(pack.cameras) == 10 and len(pack.test_ids) == 2
    assert (pack_dir / "gt" / "object1.obj").exists() and (pack_dir / "manifest.json").exists()
    m = json.loads((pack_dir / "manifest.json").read_text())
    assert m["command"] == "gen-scene" and m["seed"] == 0 and "images/0000.png" in m["outputs"]


def test_gen_scene_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert _gen(tmp_path / "a") == 0
    assert _gen(tmp_path / "b") == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_usage_errors(tmp_path, pack_dir, capsys):
    assert _gen(tmp_path / "p", "--scene", "teapot") == 2
    assert "invalid choice" in capsys.readouterr().err
    # existing non-empty directory without --force
    assert _gen(pack_dir) == 2
    assert main(["train", "--pack", str(pack_dir), "--out", str(tmp_path / "t"), "--set", "nosuch=1"]) == 2
    assert main([]) == 2


def test_data_errors(tmp_path):
    assert main(["train", "--pack", str(tmp_path / "missing"), "--out", str(tmp_path / "t")]) == 3
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["extract-mesh", "--checkpoint", str(bad), "--out", str(tmp_path / "m")]) == 3


def test_train_zero_steps_gives_initial_checkpoint(pack_dir, tmp_path):
    out = tmp_path / "r0"
    assert main(["train", "--pack", str(pack_dir), "--out", str(out), "--steps", "0", *TINY]) == 0
    assert sorted(p.name for p in out.glob("*.ckpt")) == ["final.ckpt"]
    st = TrainState.load(out / "final.ckpt")
    assert st.step == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["steps"] == 0


def test_train_outputs(ckpt_dir):
    _, _, meta = load_checkpoint(ckpt_dir / "final.ckpt")
    assert meta["step"] == 2
    assert (ckpt_dir / "train.csv").exists() and (ckpt_dir / "loss.png").exists()
    man = json.loads((ckpt_dir / "manifest.json").read_text())
    assert man["input_hash"] and man["config"]["threads"] == 1


def test_ablate_flags_reach_config(pack_dir, tmp_path):
    out = tmp_path / "a"
    assert main(["train", "--pack", str(pack_dir), "--out", str(out), "--steps", "0", "--ablate",
                 "no-alpha-reg", *TINY]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["loss"]["lambda_alpha"] == 0.0 and cfg["ablation"] == "no-alpha-reg"
    out = tmp_path / "b"
    assert main(["train", "--pack", str(pack_dir), "--out", str(out), "--steps", "0", "--ablate",
                 "shared-mlp", *TINY]) == 0
    assert TrainState.load(out / "final.ckpt").config.field.head == "shared"


def test_numeric_failure_exit_code(pack_dir, ckpt_dir, tmp_path, capsys):
    import torch

    st = TrainState.load(ckpt_dir / "final.ckpt")
    with torch.no_grad():
        st.fields.colour_net.layers[-1].bias.fill_(float("nan"))
    st.save(tmp_path / "nan.ckpt")
    out = tmp_path / "n"
    assert main(["train", "--pack", str(pack_dir), "--out", str(out), "--steps", "2", *TINY,
                 "--warm-start", str(tmp_path / "nan.ckpt")]) == 4
    assert "numeric failure" in capsys.readouterr().err
    assert list(out.glob("nonfinite_step*.npz"))


def test_render_modes(ckpt_dir, pack_dir, tmp_path):
    out = tmp_path / "r"
    assert main(["render", "--checkpoint", str(ckpt_dir / "final.ckpt"), "--pack", str(pack_dir),
                 "--out", str(out)]) == 0
    for mode in ("scene", "object1", "object2"):
        assert len(list((out / mode).glob("*.png"))) == 2
    assert (out / "renders.png").exists() and (out / "manifest.json").exists()


def test_extract_mesh(ckpt_dir, tmp_path):
    out = tmp_path / "m"
    assert main(["extract-mesh", "--checkpoint", str(ckpt_dir / "final.ckpt"), "--out", str(out),
                 "--resolution", "64"]) == 0
    assert {p.name for p in out.glob("*.obj")} == {"scene.obj", "object1.obj", "object2.obj"}


def test_eval_untrained_is_finite_and_schema_valid(ckpt_dir, pack_dir, tmp_path, capsys):
    out = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(ckpt_dir), "--pack", str(pack_dir), "--out", str(out),
                 "--resolution", "64", "--samples", "2000"]) == 0
    rep = json.loads((out / "report.json").read_text())
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert all(np.isfinite(rep[k]) for k in ("chamfer_obj1", "chamfer_obj2", "chamfer_scene", "iou3d"))
    assert len(rep["views"]) == 2 and all(np.isfinite(v["psnr"]) for v in rep["views"])
    assert (out / "views.png").exists() and (out / "report.csv").exists()
    assert "chamfer" in capsys.readouterr().out


def test_help_documents_every_config_field(capsys):
    from sepsdf.cli import _flat_fields
    from sepsdf.trainer import desk_config

    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for key, _ in _flat_fields(desk_config()):
        assert key in text, key
