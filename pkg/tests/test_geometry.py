import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sepsdf.geometry import (SH_BANDS, SH_C0, Camera, camera_rays, check_image, fibonacci_sphere,
                             load_cameras, look_at, orbit_cameras, pixel_ray, project, ray_box,
                             read_png, save_cameras, sh_encode, write_png)


def _cam(R=np.eye(3), t=(0.0, 0.0, 0.0), f=50.0, w=64, h=48):
    return Camera(f, f, w / 2, h / 2, np.asarray(R, dtype=float), np.asarray(t, dtype=float), w, h)


def test_principal_ray_is_forward_axis():
    cam = _cam(t=(0.5, 0.5, -2.0))
    r = pixel_ray(cam, (31, 23), (1.0, 1.0))  # pixel corner at the principal point
    np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)


def test_translation_moves_origin_only():
    a = pixel_ray(_cam(t=(0.1, 0.2, -3.0)), (5, 7))
    b = pixel_ray(_cam(t=(0.4, -0.3, -3.5)), (5, 7))
    np.testing.assert_allclose(b.origin - a.origin, [0.3, -0.5, -0.5], atol=1e-15)
    np.testing.assert_allclose(a.direction, b.direction, atol=1e-15)


def test_corner_pixel_matches_pinhole_inversion():
    # 2x2 image, fx = fy = 1, principal point at the image centre
    cam = Camera(1.0, 1.0, 1.0, 1.0, np.eye(3), np.zeros(3), 2, 2)
    r = pixel_ray(cam, (0, 0))
    # independent oracle: solve u = fx X/Z + cx for the direction with Z = 1
    want = np.array([(0.5 - 1.0) / 1.0, (0.5 - 1.0) / 1.0, 1.0])
    want /= np.linalg.norm(want)
    np.testing.assert_allclose(r.direction, want, atol=1e-15)
    uv = project(cam, r.origin + 3.0 * r.direction)
    np.testing.assert_allclose(uv[0], [0.5, 0.5], atol=1e-12)


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(ValueError):
        pixel_ray(_cam(), (64, 0))
    with pytest.raises(ValueError):
        pixel_ray(_cam(), (-1, 3))


def test_camera_validation():
    with pytest.raises(ValueError):
        _cam(R=np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        _cam(R=2 * np.eye(3))
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 4, 4)


def test_unit_directions_random_cameras():
    rng = np.random.default_rng(0)
    dirs = []
    for k in range(200):
        R = Rotation.random(random_state=k).as_matrix()
        cam = _cam(R=R, t=rng.normal(size=3) * 3, f=rng.uniform(5, 200))
        pix = np.stack([rng.integers(0, 64, 50), rng.integers(0, 48, 50)], axis=1)
        _, d, _, _ = camera_rays(cam, pix, rng.random((50, 2)))
        dirs.append(d)
    norms = np.linalg.norm(np.concatenate(dirs), axis=1)
    assert np.max(np.abs(norms - 1)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 0.999), st.floats(0, 0.999), st.floats(0.5, 5.0))
def test_projection_round_trip(seed, jx, jy, depth):
    R = Rotation.random(random_state=seed).as_matrix()
    cam = _cam(R=R, t=(0.5, 0.5, 0.5))
    px = (seed % 64, (seed // 64) % 48)
    r = pixel_ray(cam, px, (jx, jy))
    uv = project(cam, r.origin + depth * r.direction)[0]
    np.testing.assert_allclose(uv, [px[0] + jx, px[1] + jy], atol=1e-6)


def test_near_far_against_cube():
    o = np.array([[0.5, 0.5, -1.0], [0.5, 0.5, 0.5], [3.0, 3.0, 3.0]])
    d = np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 0, 1.0]])
    near, far, hit = ray_box(o, d)
    np.testing.assert_allclose(near[:2], [1.0, 0.0])
    np.testing.assert_allclose(far[:2], [2.0, 0.5])
    assert list(hit) == [True, True, False]
    assert near[2] == far[2] == 0.0


def test_ray_missing_cube_has_empty_interval():
    cam = _cam(t=(5.0, 5.0, -2.0))
    r = pixel_ray(cam, (0, 0))
    assert not r.hits_scene


def test_look_at_points_camera_at_target():
    eye = np.array([2.0, 0.3, 1.0])
    cam = Camera(10, 10, 8, 8, look_at(eye), eye, 16, 16)
    np.testing.assert_allclose(cam.forward, (0.5 - eye) / np.linalg.norm(0.5 - eye), atol=1e-12)


def test_orbit_cameras_look_at_centre():
    for cam in orbit_cameras(12):
        uv = project(cam, np.array([[0.5, 0.5, 0.5]]))[0]
        np.testing.assert_allclose(uv, [cam.cx, cam.cy], atol=1e-9)


def test_fibonacci_points_on_sphere():
    p = fibonacci_sphere(100)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-12)


def test_camera_file_round_trip(tmp_path):
    cams = orbit_cameras(5)
    save_cameras(tmp_path / "c.json", cams)
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = np.round(rng.random((5, 7, 3)) * 255) / 255
    write_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), img, atol=1e-12)


def test_image_checks():
    with pytest.raises(ValueError):
        check_image(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        check_image(np.full((2, 2), 0.5), binary=True)
    check_image(np.eye(3), binary=True)


# -- spherical harmonics -------------------------------------------------------------


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sh_reference(v):
    """Real SH from scipy's complex harmonics (independent oracle)."""
    from scipy.special import sph_harm_y

    x, y, z = v
    theta = math.atan2(y, x)  # azimuth
    phi = math.acos(max(-1.0, min(1.0, z)))  # polar
    out = []
    for l in range(4):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), phi, theta)
            if m < 0:
                val = math.sqrt(2) * (-1) ** m * Y.imag
            elif m == 0:
                val = Y.real
            else:
                val = math.sqrt(2) * (-1) ** m * Y.real
            out.append(val)
    return np.array(out)


def test_sh_constant_term():
    v = _unit(np.random.default_rng(0), 50)
    np.testing.assert_allclose(sh_encode(v)[:, 0], 0.28209479, atol=1e-8)
    assert SH_C0 == pytest.approx(0.5 / math.sqrt(math.pi), abs=1e-15)


def test_sh_matches_scipy_reference_up_to_sign_convention():
    v = _unit(np.random.default_rng(1), 20)
    ours = sh_encode(v)
    ref = np.stack([_sh_reference(x) for x in v])
    # graphics tables fold the Condon-Shortley phase in; compare magnitudes per basis
    np.testing.assert_allclose(np.abs(ours), np.abs(ref), atol=1e-12)
    # and each basis function agrees up to one global sign
    signs = np.sign((ours * ref).sum(axis=0))
    np.testing.assert_allclose(ours, ref * signs, atol=1e-12)


def test_sh_orthonormal_by_quadrature():
    v = fibonacci_sphere(20000)
    Y = sh_encode(v)
    gram = Y.T @ Y * (4 * math.pi / len(v))
    np.testing.assert_allclose(gram, np.eye(16), atol=2e-3)


def test_sh_azimuthal_terms_vanish_on_pole():
    y = sh_encode(np.array([[0.0, 0.0, 1.0]]))[0]
    m = np.array([m for l in range(4) for m in range(-l, l + 1)])
    np.testing.assert_allclose(y[m != 0], 0.0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda t: sum(c * c for c in t) > 1e-3))
def test_sh_parity(t):
    v = np.array(t) / np.linalg.norm(t)
    a, b = sh_encode(v[None])[0], sh_encode(-v[None])[0]
    np.testing.assert_allclose(b, a * (-1.0) ** SH_BANDS, atol=1e-12)


def test_sh_band_energy_rotation_invariant():
    rng = np.random.default_rng(3)
    v = _unit(rng, 200)
    R = Rotation.random(random_state=4).as_matrix()
    a, b = sh_encode(v), sh_encode(v @ R.T)
    # per-band sum of squares is (2l+1)/(4 pi) regardless of direction
    for l in range(4):
        sel = SH_BANDS == l
        np.testing.assert_allclose((a[:, sel] ** 2).sum(1), (2 * l + 1) / (4 * math.pi), atol=1e-12)
        np.testing.assert_allclose((b[:, sel] ** 2).sum(1), (2 * l + 1) / (4 * math.pi), atol=1e-12)


def test_sh_rejects_non_unit():
    with pytest.raises(ValueError):
        sh_encode(np.array([[0.0, 0.0, 1.1]]))


def test_sh_torch_matches_numpy():
    v = _unit(np.random.default_rng(5), 10)
    np.testing.assert_allclose(sh_encode(torch.from_numpy(v)).numpy(), sh_encode(v), atol=1e-15)
