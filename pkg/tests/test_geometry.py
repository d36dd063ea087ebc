import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from clipose.geometry import (
    CameraIntrinsics, DegenerateNormalsError, GeometryError, Pose, RotationNormals, SymmetrySpec,
    assemble_rotation, axis_angle_matrix, backproject, calibrate_normals, calibration_angles,
    geodesic_deg, gram_schmidt_rotation, is_rotation, project, rodrigues_rotate, rotation_error_deg,
    skew, translation_error_cm,
)

C = CameraIntrinsics(577.5, 577.5, 319.5, 239.5)

unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3).map(
    lambda v: np.asarray(v) / np.linalg.norm(v))
angles = st.floats(-np.pi, np.pi)


def pair_at_angle(theta, rng):
    """Random unit pair (r_x, r_y) with angle theta between them."""
    R = Rotation.random(random_state=rng).as_matrix()
    return R[:, 0], R @ np.array([np.cos(theta), np.sin(theta), 0.0])


def angle_between(a, b):
    return np.arccos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1))


# -- types -------------------------------------------------------------------

def test_intrinsics_reject_nonpositive_focal():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0.0, 500.0, 1, 1)
    with pytest.raises(GeometryError):
        CameraIntrinsics(500.0, -1.0, 1, 1)


def test_pose_validate():
    Pose(np.eye(3), np.zeros(3), np.ones(3)).validate()
    with pytest.raises(GeometryError):
        Pose(2 * np.eye(3), np.zeros(3)).validate()
    with pytest.raises(GeometryError):
        Pose(np.eye(3), np.zeros(3), np.array([1.0, 0.0, 1.0])).validate()


def test_rotation_normals_normalise_and_check_confidence():
    n = RotationNormals([2, 0, 0], [0, 3, 0])
    assert np.allclose(n.r_x, [1, 0, 0]) and np.allclose(n.r_y, [0, 1, 0])
    with pytest.raises(GeometryError):
        RotationNormals([1, 0, 0], [0, 1, 0], c_x=0.0)


def test_symmetry_spec_rejects_bad_kind_and_axis():
    with pytest.raises(GeometryError):
        SymmetrySpec("spiral")
    with pytest.raises(GeometryError):
        SymmetrySpec("rotational", (0, 2, 0))


# -- projection --------------------------------------------------------------

def test_backproject_principal_point():
    assert np.allclose(backproject(C.cx, C.cy, 1.0, C), [0, 0, 1])


def test_backproject_one_focal_length_off_axis():
    assert np.allclose(backproject(C.cx + C.fx, C.cy, 2.0, C), [2.0, 0.0, 2.0], atol=1e-12)


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(GeometryError):
        backproject(0, 0, 0.0, C)
    with pytest.raises(GeometryError):
        backproject(np.zeros(3), np.zeros(3), np.array([1.0, -1.0, 2.0]), C)


def test_backproject_round_trip_1000_pixels():
    rng = np.random.default_rng(0)
    u, v = rng.uniform(0, 640, 1000), rng.uniform(0, 480, 1000)
    Z = rng.uniform(0.1, 5.0, 1000)
    uv = project(backproject(u, v, Z, C), C)
    assert np.max(np.abs(uv - np.stack([u, v], 1))) < 1e-9


@given(st.floats(1, 2000), st.floats(1, 2000), st.floats(-500, 500), st.floats(-500, 500),
       st.floats(0.05, 20))
def test_project_backproject_identity(fx, fy, u, v, Z):
    cam = CameraIntrinsics(fx, fy, 320, 240)
    P = backproject(u, v, Z, cam)
    assert P[2] == Z
    assert np.allclose(project(P, cam), [u, v], atol=1e-9, rtol=0)


# -- Rodrigues ---------------------------------------------------------------

def test_rodrigues_quarter_turn():
    assert np.allclose(rodrigues_rotate([1, 0, 0], [0, 0, 1], np.pi / 2), [0, 1, 0], atol=1e-15)


def test_rodrigues_zero_angle():
    v = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(rodrigues_rotate(v, [0, 1, 0], 0.0), v)


def test_rodrigues_rejects_bad_axis():
    with pytest.raises(GeometryError):
        rodrigues_rotate([1, 0, 0], [0, 0, 0], 1.0)
    with pytest.raises(GeometryError):
        rodrigues_rotate([1, 0, 0], [0, 0, 2], 1.0)


def test_rodrigues_matches_matrix_exponential():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = rng.normal(size=3)
        k = rng.normal(size=3)
        k /= np.linalg.norm(k)
        a = rng.uniform(-2 * np.pi, 2 * np.pi)
        assert np.max(np.abs(rodrigues_rotate(v, k, a) - expm(skew(k) * a) @ v)) < 1e-9


@given(st.tuples(*[st.floats(-10, 10)] * 3), unit3, angles)
def test_rodrigues_preserves_norm_and_inverts(v, k, a):
    v = np.asarray(v)
    w = rodrigues_rotate(v, k, a)
    assert abs(np.linalg.norm(w) - np.linalg.norm(v)) < 1e-9
    assert np.allclose(rodrigues_rotate(w, k, -a), v, atol=1e-9)


def test_rodrigues_batched_rows():
    V = np.eye(3)
    out = rodrigues_rotate(V, [0, 0, 1], np.pi / 2)
    assert np.allclose(out, V @ axis_angle_matrix([0, 0, 1], np.pi / 2).T)


# -- calibration -------------------------------------------------------------

def test_calibration_angles_equal_confidence():
    t1, t2 = calibration_angles(np.radians(100), 1.0, 1.0)
    assert abs(np.degrees(t1) - 5.0) < 1e-9 and abs(np.degrees(t2) - 5.0) < 1e-9


def test_calibration_angles_weighted():
    t1, t2 = calibration_angles(np.radians(110), 3.0, 1.0)
    assert abs(np.degrees(t1) - 15.0) < 1e-9
    assert abs(np.degrees(t2) - 5.0) < 1e-9


def test_calibrate_already_perpendicular_is_unchanged():
    rx, ry = calibrate_normals(RotationNormals([1, 0, 0], [0, 1, 0], 4.0, 0.5))
    assert np.allclose(rx, [1, 0, 0], atol=1e-15) and np.allclose(ry, [0, 1, 0], atol=1e-15)


def test_calibrate_moves_each_normal_by_its_angle():
    rng = np.random.default_rng(2)
    rx0, ry0 = pair_at_angle(np.radians(110), rng)
    rx, ry = calibrate_normals(RotationNormals(rx0, ry0, 3.0, 1.0))
    assert abs(np.degrees(angle_between(ry0, ry)) - 15.0) < 1e-9
    assert abs(np.degrees(angle_between(rx0, rx)) - 5.0) < 1e-9
    assert abs(rx @ ry) < 1e-12


def test_calibrate_acute_pair_opens_up():
    rng = np.random.default_rng(3)
    rx0, ry0 = pair_at_angle(np.radians(70), rng)
    rx, ry = calibrate_normals(RotationNormals(rx0, ry0))
    assert abs(rx @ ry) < 1e-12
    assert abs(np.degrees(angle_between(rx0, rx)) - 10.0) < 1e-9


def test_calibrate_parallel_raises():
    with pytest.raises(DegenerateNormalsError):
        calibrate_normals(RotationNormals([1, 0, 0], [1, 0, 0]))
    with pytest.raises(DegenerateNormalsError):
        calibrate_normals(RotationNormals([1, 0, 0], [-1, 0, 0]))


def test_calibrate_perpendicular_10k_random():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10_000):
        rx0, ry0 = rng.normal(size=3), rng.normal(size=3)
        c = rng.uniform(0.01, 10, 2)
        rx, ry = calibrate_normals(RotationNormals(rx0, ry0, *c))
        worst = max(worst, abs(rx @ ry))
    assert worst < 1e-6


@settings(max_examples=200)
@given(unit3, unit3, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_calibrate_stays_in_span(a, b, cx, cy):
    if abs(a @ b) > 1 - 1e-6:
        return
    rx, ry = calibrate_normals(RotationNormals(a, b, cx, cy))
    n = np.cross(a, b)
    n /= np.linalg.norm(n)
    assert abs(rx @ n) < 1e-9 and abs(ry @ n) < 1e-9
    assert abs(rx @ ry) < 1e-6
    assert abs(np.linalg.norm(rx) - 1) < 1e-12 and abs(np.linalg.norm(ry) - 1) < 1e-12


@settings(max_examples=200)
@given(unit3, unit3, st.floats(1e-2, 1e2))
def test_calibrate_equal_confidence_symmetric(a, b, c):
    if abs(a @ b) > 1 - 1e-6:
        return
    rx, ry = calibrate_normals(RotationNormals(a, b, c, c))
    assert abs(angle_between(a, rx) - angle_between(b, ry)) < 1e-9


def test_calibrate_confident_normal_moves_less_in_the_limit():
    rng = np.random.default_rng(5)
    rx0, ry0 = pair_at_angle(np.radians(120), rng)
    moves = [angle_between(rx0, calibrate_normals(RotationNormals(rx0, ry0, cx, 1.0))[0])
             for cx in (1.0, 1e3, 1e6)]
    assert moves[0] > moves[1] > moves[2]
    assert moves[2] < 1e-5


# -- assembly ----------------------------------------------------------------

def test_assemble_identity():
    assert np.array_equal(assemble_rotation([1, 0, 0], [0, 1, 0]), np.eye(3))


def test_assemble_permutation():
    R = assemble_rotation([0, 1, 0], [0, 0, 1])
    assert np.array_equal(R, np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]]))
    assert abs(np.linalg.det(R) - 1) < 1e-12


def test_assemble_rejects_non_perpendicular():
    with pytest.raises(GeometryError):
        assemble_rotation([1, 0, 0], [np.sqrt(0.5), np.sqrt(0.5), 0])


def test_assemble_1000_random_pairs_det_one():
    R = Rotation.random(1000, random_state=6).as_matrix()
    dets = [np.linalg.det(assemble_rotation(r[:, 0], r[:, 1])) for r in R]
    assert np.max(np.abs(np.array(dets) - 1)) < 1e-9


@settings(max_examples=200)
@given(unit3, unit3, st.floats(1e-2, 1e2), st.floats(1e-2, 1e2))
def test_calibrated_assembly_is_rotation(a, b, cx, cy):
    if abs(a @ b) > 1 - 1e-6:
        return
    R = assemble_rotation(*calibrate_normals(RotationNormals(a, b, cx, cy)))
    assert is_rotation(R, 1e-6)


def test_gram_schmidt_fallback_handles_parallel():
    assert is_rotation(gram_schmidt_rotation([1, 0, 0], [2, 0, 0]))
    assert np.allclose(gram_schmidt_rotation([1, 0, 0], [1, 1, 0]), np.eye(3))


# -- errors ------------------------------------------------------------------

def test_rotation_error_identity_zero():
    R = Rotation.random(random_state=7).as_matrix()
    for sym in (SymmetrySpec(), SymmetrySpec("rotational"), SymmetrySpec("reflectional", (1, 0, 0))):
        assert rotation_error_deg(R, R, sym) < 1e-6


def test_rotation_error_half_turn_about_symmetry_axis():
    R_gt = Rotation.random(random_state=8).as_matrix()
    R_pred = R_gt @ axis_angle_matrix([0, 1, 0], np.pi)
    assert rotation_error_deg(R_pred, R_gt, SymmetrySpec("rotational", (0, 1, 0))) < 1e-6
    assert abs(rotation_error_deg(R_pred, R_gt) - 180.0) < 1e-6


def test_rotation_error_quarter_turn_plain():
    assert abs(rotation_error_deg(axis_angle_matrix([1, 0, 0], np.pi / 2), np.eye(3)) - 90.0) < 1e-9


def test_reflectional_error_takes_min_over_group():
    R_gt = np.eye(3)
    flipped = axis_angle_matrix([0, 0, 1], np.pi)
    assert rotation_error_deg(flipped, R_gt, SymmetrySpec("reflectional", (0, 0, 1))) < 1e-6
    off = axis_angle_matrix([0, 0, 1], np.pi - np.radians(10))
    assert abs(rotation_error_deg(off, R_gt, SymmetrySpec("reflectional", (0, 0, 1))) - 10) < 1e-6


@given(angles, st.integers(0, 2**31 - 1))
def test_rotational_error_invariant_to_spin(phi, seed):
    R_gt = Rotation.random(random_state=seed).as_matrix()
    axis = np.array([0.0, 1.0, 0.0])
    assert rotation_error_deg(R_gt @ axis_angle_matrix(axis, phi), R_gt,
                              SymmetrySpec("rotational", axis)) < 1e-6


@given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_geodesic_in_range_and_symmetric(s1, s2):
    A = Rotation.random(random_state=s1).as_matrix()
    B = Rotation.random(random_state=s2).as_matrix()
    d = geodesic_deg(A, B)
    assert 0 <= d <= 180
    assert abs(d - geodesic_deg(B, A)) < 1e-6


def test_translation_error_cm():
    assert translation_error_cm([0.03, 0.04, 0.0], [0, 0, 0]) == pytest.approx(5.0, abs=1e-12)
    assert translation_error_cm([1, 2, 3], [1, 2, 3]) == 0.0
    a, b = np.array([0.1, -0.2, 0.9]), np.array([0.0, 0.3, 1.1])
    assert translation_error_cm(a, b) == translation_error_cm(b, a)


def test_mean_uniform_rotation_error_is_about_126_5_degrees():
    # Monte-Carlo oracle for the random-rotation baseline: E[angle] = pi/2 + 2/pi rad
    R = Rotation.random(20000, random_state=9).as_matrix()
    mc = np.mean([geodesic_deg(r, np.eye(3)) for r in R])
    assert abs(np.degrees(np.pi / 2 + 2 / np.pi) - 126.476) < 1e-3
    assert abs(mc - 126.476) < 1.0
