import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TABLE_I, TABLE_I_LEFT_P, TABLE_I_LEFT_R, TABLE_I_RIGHT_P, TABLE_I_RIGHT_R, random_rotation
from lsckf.liegroup import project_to_so3
from lsckf.lines import (
    CameraModel,
    DegenerateGeometry,
    View,
    closest_point_on_line,
    endpoints_from_plucker,
    line_residual,
    plane_angle,
    plane_from_segment,
    plucker_from_points,
    project_plucker,
    refine_line,
    reprojection_residuals,
    transform_plucker,
    triangulate_line,
    world_to_camera,
)

coord = st.floats(-10, 10, allow_nan=False)
point = arrays(np.float64, 3, elements=coord)


def render(cam, R_wc, C, X):
    R_cw, t = world_to_camera(R_wc, C)
    return cam.project_point(R_cw @ X + t)


def angle_between(a, b):
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    return np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b))


def assert_same_line(L, ref, tol):
    assert angle_between(L[3:], ref[3:]) < tol
    s = np.linalg.norm(ref[3:]) / np.linalg.norm(L[3:]) * np.sign(L[3:] @ ref[3:])
    np.testing.assert_allclose(s * L[:3], ref[:3], atol=tol * max(1.0, np.linalg.norm(ref[:3])))


def line_in_front(rng, R_wc, C, depth=(2.0, 6.0)):
    center = C + R_wc @ np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(*depth)])
    d = R_wc @ np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.3, 0.3)])
    d /= np.linalg.norm(d)
    return center - 0.5 * d, center + 0.5 * d


# --- construction and transforms -----------------------------------------------


def test_plucker_from_points_example():
    L = plucker_from_points([1, 0, 0, 1], [0, 1, 0, 1])
    np.testing.assert_array_equal(L, [0, 0, 1, -1, 1, 0])


def test_plucker_from_equal_points_is_degenerate():
    with pytest.raises(DegenerateGeometry):
        plucker_from_points([1, 2, 3, 1], [1, 2, 3, 1])
    with pytest.raises(DegenerateGeometry):
        plucker_from_points([1, 2, 3, 1], [2, 4, 6, 2])


def test_plucker_constraint_random(rng):
    p = rng.normal(scale=5, size=(1000, 2, 3))
    L = plucker_from_points(p[:, 0], p[:, 1])
    scale = np.linalg.norm(L[:, :3], axis=1) * np.linalg.norm(L[:, 3:], axis=1)
    assert np.max(np.abs(np.sum(L[:, :3] * L[:, 3:], axis=1)) / scale) < 1e-12


def test_transform_examples():
    L = np.array([0.0, 0, 0, 1, 0, 0])
    np.testing.assert_array_equal(transform_plucker(np.eye(3), np.zeros(3), L), L)
    np.testing.assert_allclose(transform_plucker(np.eye(3), [0, 0, 1], L), [0, 1, 0, 1, 0, 0])


def test_transform_round_trip_and_composition(rng):
    for _ in range(100):
        L = plucker_from_points(*rng.normal(size=(2, 3)))
        R1, t1 = random_rotation(rng), rng.normal(size=3)
        R2, t2 = random_rotation(rng), rng.normal(size=3)
        back = transform_plucker(R1.T, -R1.T @ t1, transform_plucker(R1, t1, L))
        np.testing.assert_allclose(back, L, atol=1e-12)
        two = transform_plucker(R2, t2, transform_plucker(R1, t1, L))
        one = transform_plucker(R2 @ R1, R2 @ t1 + t2, L)
        np.testing.assert_allclose(two, one, atol=1e-12)
        assert abs(two[:3] @ two[3:]) < 1e-9


def test_transform_matches_point_transform(rng):
    p, q = rng.normal(size=(2, 3))
    R, t = random_rotation(rng), rng.normal(size=3)
    np.testing.assert_allclose(
        transform_plucker(R, t, plucker_from_points(p, q)), plucker_from_points(R @ p + t, R @ q + t), atol=1e-12
    )


# --- projection ----------------------------------------------------------------


def test_project_table_i_examples(table_camera):
    l = project_plucker(table_camera, [1.0, 0, 0, 0, 1, 0])
    np.testing.assert_allclose(l / l[0], [1, 0, -TABLE_I["cu"]], atol=1e-12)
    l = project_plucker(table_camera, [0.0, 1, 0, 1, 0, 0])
    np.testing.assert_allclose(l / l[1], [0, 1, -TABLE_I["cv"]], atol=1e-12)


def test_project_through_centre_is_degenerate(table_camera):
    with pytest.raises(DegenerateGeometry):
        project_plucker(table_camera, [0.0, 0, 0, 0, 0, 1])


def test_project_matches_pinhole_points(rng, table_camera):
    for _ in range(200):
        p, q = rng.normal(size=(2, 3)) + [0, 0, 5]
        l = project_plucker(table_camera, plucker_from_points(p, q))
        for X in (p, q, 0.3 * p + 0.7 * q):
            uv = table_camera.project_point(X)
            assert abs(l @ np.r_[uv, 1.0]) / np.hypot(l[0], l[1]) < 1e-9


@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_projection_ignores_direction(L, dv):
    cam = CameraModel(**TABLE_I)
    if np.linalg.norm(L[:3]) < 1e-6:
        return
    L2 = L.copy()
    L2[3:] += dv
    assert np.array_equal(project_plucker(cam, L), project_plucker(cam, L2))


# --- residual ------------------------------------------------------------------


def test_residual_examples():
    l = np.array([1.0, 0, -367.215])
    np.testing.assert_allclose(line_residual(l, [372.215, 10], [367.215, 99]), [5.0, 0.0], atol=1e-12)
    with pytest.raises(DegenerateGeometry):
        line_residual([0.0, 0, 1], [0, 0], [1, 1])


def test_residual_matches_point_line_distance(rng):
    for _ in range(200):
        a, b = rng.uniform(0, 700, size=(2, 2))
        l = np.r_[np.cross(np.r_[a, 1], np.r_[b, 1])]
        s, e = rng.uniform(0, 700, size=(2, 2))
        d = line_residual(l, s, e)
        for x, dk in zip((s, e), d):
            # textbook distance |(b-a) x (x-a)| / |b-a| with the sign of l.x
            u, w = b - a, x - a
            ref = abs(u[0] * w[1] - u[1] * w[0]) / np.linalg.norm(u)
            assert abs(abs(dk) - ref) < 1e-9
            assert np.sign(dk) == np.sign(l @ np.r_[x, 1]) or ref < 1e-12


def test_residual_invariant_under_rigid_motion(rng, table_camera):
    for _ in range(100):
        R_wc, C = random_rotation(rng), rng.normal(size=3)
        p, q = line_in_front(rng, R_wc, C)
        s, e = rng.uniform(0, 700, size=(2, 2))
        G, t = random_rotation(rng), rng.normal(size=3)

        def resid(R_wc, C, p, q):
            R_cw, tc = world_to_camera(R_wc, C)
            l = project_plucker(table_camera, transform_plucker(R_cw, tc, plucker_from_points(p, q)))
            return line_residual(l, s, e)

        base = resid(R_wc, C, p, q)
        moved = resid(G @ R_wc, G @ C + t, G @ p + t, G @ q + t)
        np.testing.assert_allclose(moved, base, atol=1e-10)


# --- planes and triangulation ------------------------------------------------------


def test_plane_example(table_camera):
    c = [TABLE_I["cu"], TABLE_I["cv"]]
    pi = plane_from_segment(table_camera, np.eye(3), np.zeros(3), [c[0] - 100, c[1]], [c[0] + 100, c[1]])
    np.testing.assert_allclose(pi / np.linalg.norm(pi), [0, 1, 0, 0], atol=1e-12)
    with pytest.raises(DegenerateGeometry):
        plane_from_segment(table_camera, np.eye(3), np.zeros(3), c, c)


def test_plane_incidence(rng, table_camera):
    for _ in range(200):
        R_wc, C = random_rotation(rng), rng.normal(size=3)
        a, b = rng.uniform(0, 700, size=(2, 2))
        pi = plane_from_segment(table_camera, R_wc, C, a, b)
        for X in (C, C + R_wc @ table_camera.backproject(a), C + R_wc @ table_camera.backproject(b)):
            assert abs(pi @ np.r_[X, 1]) / np.linalg.norm(pi[:3]) < 1e-10


def test_triangulation_round_trip(rng, table_camera):
    for _ in range(200):
        R1 = random_rotation(rng, 0.3)
        C1 = rng.normal(size=3)
        R2 = R1 @ random_rotation(rng, 0.1)
        C2 = C1 + R1 @ rng.normal(scale=0.5, size=3)
        p, q = line_in_front(rng, R1, C1)
        v1 = View(R1, C1, render(table_camera, R1, C1, p), render(table_camera, R1, C1, q))
        v2 = View(R2, C2, render(table_camera, R2, C2, p), render(table_camera, R2, C2, q))
        pi1 = plane_from_segment(table_camera, R1, C1, v1.a, v1.b)
        pi2 = plane_from_segment(table_camera, R2, C2, v2.a, v2.b)
        if plane_angle(pi1, pi2) < np.deg2rad(1.0):
            continue
        L = triangulate_line(table_camera, v1, v2)
        assert abs(L[:3] @ L[3:]) < 1e-9
        ref = plucker_from_points(p, q)
        assert angle_between(L[3:], ref[3:]) < 1e-6
        assert angle_between(L[:3], ref[:3]) < 1e-6


def test_triangulation_identical_poses_is_degenerate(table_camera):
    R, C = np.eye(3), np.zeros(3)
    v = View(R, C, np.array([100.0, 100]), np.array([300.0, 200]))
    with pytest.raises(DegenerateGeometry):
        triangulate_line(table_camera, v, v)


def test_triangulation_table_i_pose_pair(table_camera):
    R1, C1 = project_to_so3(TABLE_I_LEFT_R), TABLE_I_LEFT_P
    R2, C2 = project_to_so3(TABLE_I_RIGHT_R), TABLE_I_RIGHT_P
    # fixture line 3 m in front of the left camera, along its image y axis
    centre = C1 + 3.0 * R1[:, 2] + 0.3 * R1[:, 0]
    p, q = centre - 0.5 * R1[:, 1], centre + 0.5 * R1[:, 1]
    v1 = View(R1, C1, render(table_camera, R1, C1, p), render(table_camera, R1, C1, q))
    v2 = View(R2, C2, render(table_camera, R2, C2, p), render(table_camera, R2, C2, q))
    L = triangulate_line(table_camera, v1, v2)
    ref = plucker_from_points(p, q)
    assert angle_between(L[3:], ref[3:]) < 1e-6
    assert angle_between(L[:3], ref[:3]) < 1e-6


# --- endpoints -------------------------------------------------------------------


def test_endpoints_recover_rendered_points(rng, table_camera):
    for _ in range(100):
        R_wc, C = random_rotation(rng), rng.normal(size=3)
        p, q = line_in_front(rng, R_wc, C)
        L = plucker_from_points(p, q)
        ps, pe = endpoints_from_plucker(table_camera, L, R_wc, C, render(table_camera, R_wc, C, p), render(table_camera, R_wc, C, q))
        np.testing.assert_allclose(ps, p, atol=1e-9)
        np.testing.assert_allclose(pe, q, atol=1e-9)
        assert_same_line(plucker_from_points(ps, pe), L, 1e-9)


def test_endpoints_sensitivity_is_bounded(rng, table_camera):
    R_wc, C = np.eye(3), np.zeros(3)
    p, q = np.array([-0.5, -0.4, 4.0]), np.array([0.6, 0.5, 4.5])
    L = plucker_from_points(p, q)
    a, b = render(table_camera, R_wc, C, p), render(table_camera, R_wc, C, q)
    base = np.concatenate(endpoints_from_plucker(table_camera, L, R_wc, C, a, b))
    h = 1e-4
    J = np.column_stack(
        [
            (np.concatenate(endpoints_from_plucker(table_camera, L, R_wc, C, *(np.r_[a, b] + h * e).reshape(2, 2))) - base) / h
            for e in np.eye(4)
        ]
    )
    for shift in rng.uniform(-1, 1, size=(20, 4)):
        moved = np.concatenate(endpoints_from_plucker(table_camera, L, R_wc, C, *(np.r_[a, b] + shift).reshape(2, 2)))
        assert np.linalg.norm(moved - base) <= 1.1 * np.linalg.norm(J @ shift) + 1e-6


def test_closest_point_parallel_ray_is_degenerate():
    with pytest.raises(DegenerateGeometry):
        closest_point_on_line(plucker_from_points([0, 0, 1.0], [0, 0, 2.0]), np.zeros(3), [0, 0, 1.0])


# --- multi-view refinement ------------------------------------------------------


def test_refine_line_recovers_noiseless_line(rng, table_camera):
    p, q = np.array([-0.5, -0.4, 5.0]), np.array([0.6, 0.5, 5.5])
    views = []
    for k in range(8):
        R = np.eye(3)
        C = np.array([0.2 * k, 0.05 * k, 0.0])
        views.append(View(R, C, render(table_camera, R, C, p), render(table_camera, R, C, q)))
    ref = plucker_from_points(p, q)
    start = transform_plucker(random_rotation(rng, 0.02), rng.normal(scale=0.05, size=3), ref)
    fit = refine_line(table_camera, start, views)
    assert fit.rms_px < 1e-6
    assert_same_line(fit.L, ref, 1e-6)
    assert np.all(np.linalg.eigvalsh(fit.cov) > 0)
    assert np.max(np.abs(reprojection_residuals(table_camera, fit.L, views))) < 1e-6
