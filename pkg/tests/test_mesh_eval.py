import math

import jsonschema
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from sepsdf.mesh_eval import (PSNR_CAP, REPORT_SCHEMA, ReconReport, TriangleMesh, ViewMetrics, chamfer,
                              chamfer_brute, iou3d, marching_cubes, mesh_from_sdf, psnr, sample_surface,
                              ssim, voxelize, voxelize_sdf)
from sepsdf.synth import make_scene, sd_box, sd_sphere


def cube_mesh(lo, hi) -> TriangleMesh:
    """Exact 12-triangle axis-aligned box, outward winding."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[lo[0] if i == 0 else hi[0], lo[1] if j == 0 else hi[1], lo[2] if k == 0 else hi[2]]
                  for k in (0, 1) for j in (0, 1) for i in (0, 1)])
    # vertex index i + 2j + 4k
    f = [[0, 2, 3], [0, 3, 1], [4, 5, 7], [4, 7, 6],  # z faces
         [0, 1, 5], [0, 5, 4], [2, 6, 7], [2, 7, 3],  # y faces
         [0, 4, 6], [0, 6, 2], [1, 3, 7], [1, 7, 5]]  # x faces
    return TriangleMesh(v, np.array(f))


def test_cube_mesh_volume_and_watertight():
    m = cube_mesh([0, 0, 0], [1, 2, 3])
    assert m.volume() == pytest.approx(6.0)
    assert m.is_watertight()
    assert not TriangleMesh(m.vertices, m.faces[:-1]).is_watertight()


def test_iou_half_overlap_cubes_is_one_third():
    a = cube_mesh([0.0, 0.0, 0.0], [0.5, 0.5, 0.5])
    b = cube_mesh([0.25, 0.0, 0.0], [0.75, 0.5, 0.5])
    assert iou3d(a, b, resolution=256) == pytest.approx(1 / 3, abs=1e-3)


def test_iou_unit_cubes_overlapping_by_half():
    a = cube_mesh([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    b = cube_mesh([0.5, 0.0, 0.0], [1.5, 1.0, 1.0])
    assert iou3d(a, b) == pytest.approx(1 / 3, abs=1e-3)


def test_ray_iou_agrees_with_voxel_count():
    s1 = lambda p: sd_sphere(p, [0.4, 0.5, 0.5], 0.2)
    s2 = lambda p: sd_sphere(p, [0.6, 0.55, 0.5], 0.18)
    m1, m2 = mesh_from_sdf(s1, 96), mesh_from_sdf(s2, 96)
    exact = iou3d(m1, m2, 128)
    lo, hi = np.zeros(3), np.ones(3)
    a, b = voxelize_sdf(s1, lo, hi, 128), voxelize_sdf(s2, lo, hi, 128)
    assert exact == pytest.approx((a & b).sum() / (a | b).sum(), abs=0.01)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 0.3), st.floats(0.05, 0.3))
def test_iou_monotone_under_shrinking(s_big, s_small):
    s_small = min(s_small, s_big)
    a = cube_mesh([0.2, 0.2, 0.2], [0.6, 0.6, 0.6])
    b_big = cube_mesh([0.6 - s_big, 0.3, 0.3], [0.9, 0.7, 0.7])
    b_small = cube_mesh([0.6 - s_small, 0.3, 0.3], [0.9, 0.7, 0.7])
    assert iou3d(a, b_small, 64) <= iou3d(a, b_big, 64) + 1e-12


def test_iou_identity_disjoint_and_empty():
    a = cube_mesh([0.1, 0.1, 0.1], [0.4, 0.4, 0.4])
    b = cube_mesh([0.6, 0.6, 0.6], [0.9, 0.9, 0.9])
    assert iou3d(a, a, 64) == 1.0
    assert iou3d(a, b, 64) == 0.0
    assert iou3d(TriangleMesh.empty(), TriangleMesh.empty(), 32) == 0.0


def test_voxelize_sphere_volume():
    m = mesh_from_sdf(lambda p: sd_sphere(p, [0.5, 0.5, 0.5], 0.3), 96)
    lo, hi = np.zeros(3), np.ones(3)
    occ = voxelize(m, lo, hi, 96)
    assert occ.mean() == pytest.approx(4 / 3 * math.pi * 0.3 ** 3, rel=0.02)
    # agrees with sign-of-SDF voxelisation except at a thin shell
    occ2 = voxelize_sdf(lambda p: sd_sphere(p, [0.5, 0.5, 0.5], 0.3), lo, hi, 96)
    assert (occ ^ occ2).mean() < 0.005


def test_iou_falls_back_to_sdf_for_open_meshes():
    a = cube_mesh([0.0, 0.0, 0.0], [0.5, 0.5, 0.5])
    open_a = TriangleMesh(a.vertices, a.faces[:-2])
    b = cube_mesh([0.25, 0.0, 0.0], [0.75, 0.5, 0.5])
    with pytest.raises(ValueError):
        iou3d(open_a, b, 64)
    fn = lambda p: sd_box(p, [0.25, 0.25, 0.25], [0.25, 0.25, 0.25])
    assert iou3d(open_a, b, 128, sdf1=fn) == pytest.approx(1 / 3, abs=0.01)


def test_marching_cubes_sphere():
    r = 0.3
    m = mesh_from_sdf(lambda p: sd_sphere(p, [0.5, 0.5, 0.5], r), 64)
    assert m.is_watertight()
    assert m.volume() == pytest.approx(4 / 3 * math.pi * r ** 3, rel=0.01)
    d = np.linalg.norm(m.vertices - 0.5, axis=1)
    assert np.abs(d - r).max() < 1.0 / 64


def test_marching_cubes_empty_and_nonfinite(caplog):
    assert marching_cubes(np.ones((5, 5, 5)), 0.25).is_empty
    assert "empty level set" in caplog.text
    v = np.ones((5, 5, 5))
    v[2, 2, 2] = np.nan
    with pytest.raises(FloatingPointError):
        marching_cubes(v, 0.25)


def test_largest_component_and_obj_round_trip(tmp_path):
    a = cube_mesh([0.1] * 3, [0.5] * 3)
    b = cube_mesh([0.7] * 3, [0.8] * 3)
    both = TriangleMesh(np.concatenate([a.vertices, b.vertices]), np.concatenate([a.faces, b.faces + 8]))
    big = both.largest_component()
    assert big.volume() == pytest.approx(a.volume())
    both.save_obj(tmp_path / "m.obj")
    back = TriangleMesh.load_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, both.vertices, rtol=1e-8)
    assert np.array_equal(back.faces, both.faces)


# -- Chamfer ----------------------------------------------------------------------------


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(5):
        pa, pb = rng.random((500, 3)), rng.random((500, 3)) * 1.2
        assert abs(chamfer(pa, pb) - chamfer_brute(pa, pb)) <= 1e-12


def test_chamfer_two_single_points():
    assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 2.0


def test_chamfer_hand_example():
    pa = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    pb = np.array([[0.0, 0.5, 0.0]])
    # a->b: 0.25 and 1.25, mean 0.75; b->a: 0.25
    assert chamfer(pa, pb) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_chamfer_symmetric_and_translation_bound(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    pa, pb = rng.random((60, 3)), rng.random((40, 3))
    assert chamfer(pa, pb) == pytest.approx(chamfer(pb, pa), rel=1e-12)
    assert chamfer(pa, pa) == 0.0
    shift = np.array([dx, dy, dz])
    # translating a set by s moves every nearest neighbour by at most |s|
    assert chamfer(pa, pa + shift) <= 2 * (shift @ shift) + 1e-12


def test_chamfer_identical_meshes_zero_and_sphere_offset():
    m = mesh_from_sdf(lambda p: sd_sphere(p, [0.5] * 3, 0.3), 64)
    assert chamfer(m, m, 20_000) == 0.0
    m2 = mesh_from_sdf(lambda p: sd_sphere(p, [0.5] * 3, 0.32), 64)
    assert chamfer(m, m2, 20_000) == pytest.approx(2 * 0.02 ** 2, rel=0.1)


def test_sample_surface_is_area_uniform():
    m = cube_mesh([0, 0, 0], [1, 1, 4])
    p = sample_surface(m, 40_000, np.random.default_rng(0))
    on_big_sides = np.isclose(p[:, 0], 0) | np.isclose(p[:, 0], 1) | np.isclose(p[:, 1], 0) | np.isclose(p[:, 1], 1)
    assert on_big_sides.mean() == pytest.approx(16 / 18, abs=0.01)
    with pytest.raises(ValueError):
        sample_surface(TriangleMesh.empty(), 10, np.random.default_rng(0))


# -- image metrics --------------------------------------------------------------------


def ssim_reference(x, y, data_range=1.0):
    """Direct per-pixel sums of the Gaussian-weighted SSIM definition."""
    size, sigma = 11, 1.5
    ax = np.arange(size) - 5
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    H, W = x.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_reference_formula(seed):
    rng = np.random.default_rng(seed)
    x = ndimage.gaussian_filter(rng.random((20, 23, 3)), 1.0)
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    ref = np.mean([ssim_reference(x[..., c], y[..., c]) for c in range(3)])
    assert abs(ssim(x, y) - ref) <= 1e-6


def test_ssim_matches_skimage():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(1)
    x = rng.random((32, 32))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    ref = structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0)
    # skimage averages over a cropped region of the same valid filter responses
    assert ssim(x, y) == pytest.approx(ref, abs=2e-2)


def test_ssim_identity_and_range():
    x = np.random.default_rng(2).random((20, 20, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert -1.0 <= ssim(x, 1 - x) < 0.5
    with pytest.raises(ValueError):
        ssim(x, x[:10])


def test_psnr_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(a, a[:2])


def test_report_schema_and_round_trip():
    r = ReconReport(0.1, 0.2, 0.15, 0.003, [ViewMetrics(3, 30.0, 0.95), ViewMetrics(9, 32.0, 0.97)])
    d = r.to_dict()
    jsonschema.validate(d, REPORT_SCHEMA)
    assert d["mean_psnr"] == pytest.approx(31.0)
    back = ReconReport.from_dict(d)
    assert back == r
    assert "iou3d" in r.table()
    with pytest.raises(ValueError):
        ReconReport(iou3d=1.5)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({**d, "iou3d": 2.0}, REPORT_SCHEMA)


def test_gt_scene_meshes_contact_penetration():
    s = make_scene("two-spheres-touching", 0.02)
    m1 = mesh_from_sdf(lambda p: s.sdf(1, p), 128)
    m2 = mesh_from_sdf(lambda p: s.sdf(2, p), 128)
    assert 0.0 < iou3d(m1, m2, 128) < 0.01
    s0 = make_scene("two-spheres-touching", -0.02)
    assert iou3d(mesh_from_sdf(lambda p: s0.sdf(1, p), 96), mesh_from_sdf(lambda p: s0.sdf(2, p), 96), 96) == 0.0


def test_scene_mesh_inside_union_of_object_meshes():
    from sepsdf.fields import FieldConfig, SceneFields
    from sepsdf.hashgrid import HashGridConfig
    from sepsdf.mesh_eval import extract_mesh

    cfg = FieldConfig(hash=HashGridConfig(levels=4, features=2, log2_table=12, base_resolution=4,
                                          max_resolution=32))
    f = SceneFields(cfg, n_images=1, seed=3)
    with torch.no_grad():
        f.grid.table.normal_(0, 0.01, generator=torch.Generator().manual_seed(4))
        for h in f.heads:
            h.layers[0].weight.add_(torch.randn(h.layers[0].weight.shape, generator=torch.Generator().manual_seed(5)) * 0.01)
    res = 64
    meshes = {w: extract_mesh(f, w, res) for w in ("scene", "object1", "object2")}
    lo, hi = np.zeros(3), np.ones(3)
    vox = {w: voxelize(m, lo, hi, res) for w, m in meshes.items()}
    assert vox["scene"].sum() > 1000
    union = ndimage.binary_dilation(vox["object1"] | vox["object2"], structure=np.ones((3, 3, 3)))
    assert not np.any(vox["scene"] & ~union)
