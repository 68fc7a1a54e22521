import numpy as np
import pytest

from v2sreg.deform import (BulgeParams, DeformParams, IDENTITY_BULGE,
                           IDENTITY_SLIDE, IDENTITY_TWIST, IDENTITY_WARP,
                           SlideParams, TwistParams, WarpParams, bulge,
                           composite, displacement_field, slide, taubin_smooth,
                           twist, warp)
from v2sreg.errors import InvalidInput
from v2sreg.geom import TriangleMesh, compute_vertex_normals, rodrigues_rotate

from conftest import make_icosphere_mesh


def random_cloud_with_normals(rng, n=40):
    v = rng.normal(size=(n, 3)) * 20
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return v, nrm


# ---------------------------------------------------------------------------
# bulge
# ---------------------------------------------------------------------------

def test_bulge_peak_at_center():
    v = np.array([[1.0, 2.0, 3.0]])
    n = np.array([[0.0, 0.0, 1.0]])
    p = BulgeParams(center=(1.0, 2.0, 3.0), radius=10.0, magnitude=5.0)
    out = bulge(v, n, p)
    assert np.allclose(out, [[1, 2, 8]], atol=0)


def test_bulge_far_tail_negligible():
    p = BulgeParams(center=(0, 0, 0), radius=2.0, magnitude=5.0)
    v = np.array([[20.0, 0, 0]])  # 10 radii out
    n = np.array([[1.0, 0, 0]])
    out = bulge(v, n, p)
    assert np.abs(out - v).max() < 1e-9


def test_bulge_one_radius_factor(rng):
    s, r = 6.0, 13.0
    p = BulgeParams(center=(0, 0, 0), radius=r, magnitude=s)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    v = (direction * r)[None, :]
    n = rng.normal(size=(1, 3))
    n /= np.linalg.norm(n)
    out = bulge(v, n, p)
    assert np.allclose(np.linalg.norm(out - v), s * np.exp(-1.0), atol=1e-12)


def test_bulge_monotone_in_distance(rng):
    v, n = random_cloud_with_normals(rng, 100)
    p = BulgeParams(center=(1.0, -2.0, 0.5), radius=15.0, magnitude=4.0)
    out = bulge(v, n, p)
    mag = np.linalg.norm(out - v, axis=1)
    d = np.linalg.norm(v - np.array(p.center), axis=1)
    order = np.argsort(d)
    assert (np.diff(mag[order]) <= 1e-12).all()


def test_bulge_count_mismatch(rng):
    v, n = random_cloud_with_normals(rng, 5)
    with pytest.raises(InvalidInput):
        bulge(v, n[:4], BulgeParams(center=(0, 0, 0), radius=1.0, magnitude=1.0))


# ---------------------------------------------------------------------------
# slide
# ---------------------------------------------------------------------------

SLIDE = SlideParams(plane_point=(0, 0, 0), plane_normal=(0, 0, 1.0), width=4.0,
                    delta=(1.0, -2.0, 0.5))


def test_slide_full_shift_on_plane():
    out = slide(np.array([[3.0, 1.0, 0.0]]), SLIDE)
    assert np.allclose(out, [[4.0, -1.0, 0.5]], atol=0)


def test_slide_full_shift_negative_side():
    # the max(0, d) clamp gives the full shift everywhere behind the plane
    out = slide(np.array([[0.0, 0.0, -12.0]]), SLIDE)
    assert np.allclose(out, [[1.0, -2.0, -11.5]], atol=0)


def test_slide_one_width_decay():
    out = slide(np.array([[0.0, 0.0, 4.0]]), SLIDE)
    expected = np.array([[0, 0, 4.0]]) + np.exp(-1.0) * np.array([1.0, -2.0, 0.5])
    assert np.allclose(out, expected, atol=1e-15)


def test_slide_direction_constant(rng):
    v = rng.normal(size=(200, 3)) * 30
    out = slide(v, SLIDE)
    disp = out - v
    # ignore far-tail points whose displacement is float cancellation noise
    moved = np.linalg.norm(disp, axis=1) > 1e-9
    unit = np.asarray(SLIDE.delta) / np.linalg.norm(SLIDE.delta)
    cos = disp[moved] @ unit / np.linalg.norm(disp[moved], axis=1)
    assert np.abs(cos - 1).max() < 1e-9


# ---------------------------------------------------------------------------
# twist
# ---------------------------------------------------------------------------

def test_twist_axis_points_fixed():
    p = TwistParams(axis_point=(0, 0, 0), axis_dir=(0, 0, 1.0), max_angle=0.3,
                    decay_radius=10.0)
    v = np.array([[0.0, 0.0, -7.0], [0.0, 0.0, 3.0]])
    assert np.allclose(twist(v, p), v, atol=1e-12)


def test_twist_at_decay_radius_matches_rodrigues_oracle():
    r0 = 12.0
    p = TwistParams(axis_point=(0, 0, 0), axis_dir=(0, 0, 1.0),
                    max_angle=np.pi / 2, decay_radius=r0)
    v = np.array([[r0, 0.0, 5.0]])
    out = twist(v, p)
    theta = (np.pi / 2) * np.exp(-1.0)
    oracle = rodrigues_rotate(v[0], np.zeros(3), np.array([0, 0, 1.0]), theta)
    assert np.allclose(out[0], oracle, atol=1e-9)
    assert abs(out[0, 2] - 5.0) < 1e-12  # axial coordinate unchanged
    assert abs(np.linalg.norm(out[0, :2]) - r0) < 1e-9 * r0


def test_twist_zero_angle_identity(rng):
    v = rng.normal(size=(30, 3)) * 15
    p = TwistParams(axis_point=(1, 2, 3), axis_dir=(0, 1.0, 0), max_angle=0.0,
                    decay_radius=5.0)
    assert np.array_equal(twist(v, p), v + 0.0)


def test_twist_preserves_axis_geometry(rng):
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    a = rng.normal(size=3) * 4
    p = TwistParams(axis_point=tuple(a), axis_dir=tuple(u), max_angle=0.28,
                    decay_radius=8.0)
    v = rng.normal(size=(100, 3)) * 20
    out = twist(v, p)
    rel_in, rel_out = v - a, out - a
    par_in, par_out = rel_in @ u, rel_out @ u
    assert np.abs(par_out - par_in).max() < 1e-9
    d_in = np.linalg.norm(rel_in - np.outer(par_in, u), axis=1)
    d_out = np.linalg.norm(rel_out - np.outer(par_out, u), axis=1)
    assert np.abs(d_out - d_in).max() < 1e-9 * max(1.0, d_in.max())


# ---------------------------------------------------------------------------
# warp
# ---------------------------------------------------------------------------

def test_warp_zero_amplitude_identity(rng):
    v = rng.normal(size=(25, 3))
    assert np.array_equal(warp(v, IDENTITY_WARP), v + 0.0)


def test_warp_phase_offsets():
    p = WarpParams(amplitude=2.0, freq=(0.3, 0.4, 0.5),
                   phase=(np.pi / 2, np.pi / 2, np.pi / 2))
    out = warp(np.zeros((1, 3)), p)
    assert np.allclose(out, [[2.0, 2.0, 2.0]], atol=1e-15)


def test_warp_cyclic_coupling():
    p = WarpParams(amplitude=1.0, freq=(0.2, 0.0, 0.0), phase=(0.0, 0.0, 0.0))
    # dx depends on y only
    out_a = warp(np.array([[5.0, 2.0, 9.0]]), p)
    out_b = warp(np.array([[-3.0, 2.0, 1.0]]), p)
    assert np.isclose(out_a[0, 0] - 5.0, out_b[0, 0] + 3.0)


def test_warp_magnitude_bound(rng):
    for _ in range(5):
        a = rng.uniform(0.5, 4.0)
        p = WarpParams(amplitude=a, freq=tuple(rng.uniform(0.01, 0.08, 3)),
                       phase=tuple(rng.uniform(0, 2 * np.pi, 3)))
        v = rng.normal(size=(500, 3)) * 100
        disp = warp(v, p) - v
        assert np.linalg.norm(disp, axis=1).max() <= a * np.sqrt(3) + 1e-12


def test_warp_periodicity(rng):
    fx = 0.05
    p = WarpParams(amplitude=2.0, freq=(fx, 0.02, 0.03),
                   phase=tuple(rng.uniform(0, 2 * np.pi, 3)))
    v = rng.normal(size=(50, 3)) * 10
    shifted = v + np.array([0.0, 2 * np.pi / fx, 0.0])
    dx_a = warp(v, p)[:, 0] - v[:, 0]
    dx_b = warp(shifted, p)[:, 0] - shifted[:, 0]
    assert np.abs(dx_a - dx_b).max() < 1e-9


# ---------------------------------------------------------------------------
# composite
# ---------------------------------------------------------------------------

def test_composite_identity_params(rng):
    v, n = random_cloud_with_normals(rng, 30)
    params = DeformParams(mode="composite")
    assert np.array_equal(composite(v, n, params), v + 0.0)


def test_composite_only_bulge(rng):
    v, n = random_cloud_with_normals(rng, 30)
    b = BulgeParams(center=(0, 0, 0), radius=10.0, magnitude=3.0)
    params = DeformParams(mode="composite", bulge=b)
    assert np.array_equal(composite(v, n, params), bulge(v, n, b))


def test_composite_equals_sequential_bitwise(rng):
    v, n = random_cloud_with_normals(rng, 64)
    params = DeformParams(
        mode="composite",
        bulge=BulgeParams(center=(2, 1, -3), radius=12.0, magnitude=4.0),
        slide=SlideParams(plane_point=(0, 1, 0), plane_normal=(0, 1.0, 0),
                          width=6.0, delta=(0.5, 1.0, -0.25)),
        twist=TwistParams(axis_point=(0, 0, 0), axis_dir=(1.0, 0, 0),
                          max_angle=0.2, decay_radius=25.0),
        warp=WarpParams(amplitude=1.5, freq=(0.05, 0.03, 0.02), phase=(0.1, 0.7, 1.3)),
    )
    manual = warp(twist(slide(bulge(v, n, params.bulge), params.slide),
                        params.twist), params.warp)
    assert np.array_equal(composite(v, n, params), manual)


def test_composite_mode_mismatch(rng):
    v, n = random_cloud_with_normals(rng, 5)
    with pytest.raises(InvalidInput):
        composite(v, n, DeformParams(mode="global"))


def test_operators_preserve_count_and_finite(rng):
    v, n = random_cloud_with_normals(rng, 50)
    params = DeformParams(
        mode="composite",
        bulge=BulgeParams(center=(0, 0, 0), radius=20.0, magnitude=8.0),
        slide=SlideParams(plane_point=(1, 1, 1), plane_normal=(1.0, 0, 0),
                          width=10.0, delta=(2.0, 0, 0)),
        twist=TwistParams(axis_point=(0, 0, 0), axis_dir=(0, 0, 1.0),
                          max_angle=0.3, decay_radius=30.0),
        warp=WarpParams(amplitude=3.0, freq=(0.04, 0.02, 0.06), phase=(0, 1, 2)),
    )
    out = composite(v, n, params)
    assert out.shape == v.shape
    assert np.isfinite(displacement_field(v, out)).all()


# ---------------------------------------------------------------------------
# taubin smoothing
# ---------------------------------------------------------------------------

def test_taubin_zero_iterations_identity():
    mesh = make_icosphere_mesh(radius=5.0)
    out = taubin_smooth(mesh, iterations=0)
    assert np.array_equal(out.vertices, mesh.vertices)
    assert np.array_equal(out.faces, mesh.faces)


def test_taubin_flat_grid_interior_fixed():
    # regular planar grid: umbrella Laplacian vanishes on symmetric interior
    # neighborhoods; boundary influence travels two rings per iteration
    n = 9
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces.append([a, a + 1, a + n])
            faces.append([a + 1, a + n + 1, a + n])
    mesh = TriangleMesh(vertices=verts, faces=np.array(faces))
    out = taubin_smooth(mesh, iterations=1)
    interior = [r * n + c for r in range(3, n - 3) for c in range(3, n - 3)]
    assert np.abs(out.vertices[interior] - verts[interior]).max() < 1e-9
    assert np.abs(out.vertices[:, 2]).max() == 0.0  # stays in plane


def test_taubin_reduces_radial_noise(rng):
    mesh = make_icosphere_mesh(radius=10.0, subdivisions=3)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    noisy = mesh.vertices + radial * rng.normal(0, 0.5, size=(len(mesh.vertices), 1))
    noisy_mesh = TriangleMesh(vertices=noisy, faces=mesh.faces)
    out = taubin_smooth(noisy_mesh, lam=0.5, mu=-0.53, iterations=10)

    def radial_dev(v):
        return np.abs(np.linalg.norm(v, axis=1) - 10.0).mean()

    assert radial_dev(out.vertices) < radial_dev(noisy)


def test_taubin_keeps_topology_and_counts_isolated():
    mesh = make_icosphere_mesh(radius=4.0)
    verts = np.vstack([mesh.vertices, [[100.0, 100.0, 100.0]]])  # unreferenced vertex
    est = TriangleMesh(vertices=verts, faces=mesh.faces)
    out = taubin_smooth(est, iterations=2)
    assert np.array_equal(out.faces, est.faces)
    assert out.diagnostics["isolated_vertices"] == 1
    assert np.array_equal(out.vertices[-1], [100.0, 100.0, 100.0])


def test_taubin_invalid_params():
    mesh = make_icosphere_mesh()
    with pytest.raises(InvalidInput):
        taubin_smooth(mesh, lam=-0.1, mu=-0.5)
    with pytest.raises(InvalidInput):
        taubin_smooth(mesh, lam=0.5, mu=0.5)


# ---------------------------------------------------------------------------
# displacement field
# ---------------------------------------------------------------------------

def test_displacement_identity(rng):
    v = rng.normal(size=(20, 3))
    assert np.array_equal(displacement_field(v, v), np.zeros_like(v))


def test_displacement_uniform_translation(rng):
    v = rng.normal(size=(20, 3))
    t = np.array([1.0, 2.0, 3.0])
    phi = displacement_field(v, v + t)
    assert np.allclose(phi, t, atol=0)


def test_displacement_matches_warp_formula(rng):
    v = rng.normal(size=(100, 3)) * 50
    p = WarpParams(amplitude=1.0, freq=(0.03, 0.05, 0.02), phase=(0.3, 1.1, 2.7))
    phi = displacement_field(v, warp(v, p))
    expected = np.stack([
        np.sin(0.03 * v[:, 1] + 0.3),
        np.sin(0.05 * v[:, 2] + 1.1),
        np.sin(0.02 * v[:, 0] + 2.7),
    ], axis=1)
    assert np.abs(phi - expected).max() < 1e-12


def test_displacement_count_mismatch(rng):
    with pytest.raises(InvalidInput):
        displacement_field(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))


def test_param_validation():
    with pytest.raises(InvalidInput):
        BulgeParams(center=(0, 0, 0), radius=-1.0, magnitude=1.0).validate()
    with pytest.raises(InvalidInput):
        BulgeParams(center=(0, 0, 0), radius=1.0, magnitude=60.0).validate()
    with pytest.raises(InvalidInput):
        SlideParams(plane_point=(0, 0, 0), plane_normal=(0, 0, 2.0), width=1.0,
                    delta=(0, 0, 0)).validate()
    with pytest.raises(InvalidInput):
        TwistParams(axis_point=(0, 0, 0), axis_dir=(0, 0, 1.0), max_angle=2.0,
                    decay_radius=1.0).validate()
    with pytest.raises(InvalidInput):
        WarpParams(amplitude=-1.0, freq=(0, 0, 0), phase=(0, 0, 0)).validate()
    assert IDENTITY_BULGE.validate() and IDENTITY_SLIDE.validate()
    assert IDENTITY_TWIST.validate() and IDENTITY_WARP.validate()
