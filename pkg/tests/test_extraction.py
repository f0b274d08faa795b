import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handleforge.extraction import (Pose, ProcrustesError, SyntheticRig, fit_frame, fit_sequence,
                                    load_rig, save_rig, skeletal_pose, weighted_procrustes)
from handleforge.handles import HandleFrame, deform, handle_positions
from handleforge.mesh import icosphere
from handleforge.rotations import axis_angle_to_matrix, random_rotations
from handleforge.synthetic import make_character
from handleforge.validation import ContractError

from helpers import one_hot_split, random_frame


def chain_rig():
    """Two-joint chain along x: joint 0 at origin, joint 1 (elbow) at (1,0,0)."""
    V = np.array([[0.2, 0, 0], [0.5, 0.1, 0], [1.5, 0, 0], [2.0, 0.1, 0.]])
    W = np.array([[1, 0], [1, 0], [0, 1], [0, 1.]])
    return V, SyntheticRig(np.array([[0, 0, 0], [1, 0, 0.]]), [-1, 0], W)


def test_zero_pose_is_rest():
    V, rig = chain_rig()
    np.testing.assert_allclose(skeletal_pose(V, rig), V)


def test_root_translation_shifts_everything():
    V, rig = chain_rig()
    pose = Pose(np.zeros((2, 3)), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(skeletal_pose(V, rig, pose), V + [1, -2, 0.5])


def test_two_joint_elbow_quarter_turn():
    V, rig = chain_rig()
    pose = Pose(np.array([[0, 0, 0], [0, 0, np.pi / 2]]))
    out = skeletal_pose(V, rig, pose)
    # distal vertices rotate 90 degrees about z around the elbow (1,0,0)
    expected_distal = [[1.0, 0.5, 0], [0.9, 1.0, 0]]
    np.testing.assert_allclose(out[2:], expected_distal, atol=1e-12)
    np.testing.assert_allclose(out[:2], V[:2])


def test_fk_composes_down_the_tree():
    V, rig = chain_rig()
    pose = Pose(np.array([[0, 0, np.pi / 2], [0, 0, np.pi / 2]]))
    out = skeletal_pose(V, rig, pose)
    # root turns everything 90; elbow adds another 90 -> distal points face -x from (0,1,0)
    np.testing.assert_allclose(out[2], [-0.5, 1.0, 0], atol=1e-12)


@pytest.mark.parametrize("parents", [[-1, 2, 1], [-1, -1, 0], [0, 0, 1], [-1, 5, 0]])
def test_bad_parent_graphs_rejected(parents):
    with pytest.raises(ContractError):
        SyntheticRig(np.zeros((3, 3)), parents, np.full((4, 3), 1 / 3))


def test_rig_round_trip(tmp_path):
    c = make_character(3, seed=1, n_sequences=1, n_frames=3)
    save_rig(c.rig, tmp_path / "a.rig")
    back = load_rig(tmp_path / "a.rig")
    np.testing.assert_array_equal(back.skinning, c.rig.skinning)
    np.testing.assert_array_equal(back.limb_vertices, c.rig.limb_vertices)
    np.testing.assert_array_equal(back.poses["seq0"][1].rotations, c.rig.poses["seq0"][1].rotations)


def test_procrustes_recovers_rigid(rng):
    X = rng.normal(size=(20, 3))
    R = random_rotations(1, rng)[0]
    t = rng.normal(size=3)
    R_fit, t_fit = weighted_procrustes(X, X @ R.T + t, rng.uniform(0.1, 1, 20))
    np.testing.assert_allclose(R_fit, R, atol=1e-10)
    np.testing.assert_allclose(t_fit, t, atol=1e-10)


def test_procrustes_reflection_corrected(rng):
    X = rng.normal(size=(20, 3))
    Y = X * [1, 1, -1]
    R, _ = weighted_procrustes(X, Y, np.ones(20))
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_procrustes_collinear_names_handle():
    X = np.outer(np.arange(5.0), [1, 1, 0])
    with pytest.raises(ProcrustesError, match="handle 3"):
        weighted_procrustes(X, X, np.ones(5), handle=3)


def test_identity_fit(sphere):
    W, hs = one_hot_split(sphere, 3)
    f = fit_frame(sphere, sphere.vertices, W, hs)
    np.testing.assert_allclose(f.local_matrices(), np.broadcast_to(np.eye(3), (3, 3, 3)), atol=1e-12)
    np.testing.assert_allclose(f.local_trans, 0, atol=1e-12)
    np.testing.assert_allclose(f.global_rot, 0, atol=1e-12)


def test_global_rotation_factored(sphere):
    W, hs = one_hot_split(sphere, 3)
    R = axis_angle_to_matrix([0, np.radians(30), 0])
    f = fit_frame(sphere, sphere.vertices @ R.T, W, hs)
    np.testing.assert_allclose(f.global_rot, [0, np.radians(30), 0], atol=1e-6)
    np.testing.assert_allclose(f.local_matrices(), np.broadcast_to(np.eye(3), (3, 3, 3)), atol=1e-6)
    np.testing.assert_allclose(f.local_trans, 0, atol=1e-6)


def test_second_half_rotated_about_its_handle(sphere):
    W, hs = one_hot_split(sphere, 2)
    R = axis_angle_to_matrix([0, 0, np.pi / 4])
    posed = sphere.vertices.copy()
    half = W[:, 1] == 1
    h = hs.positions[1]
    posed[half] = (posed[half] - h) @ R.T + h
    f = fit_frame(sphere, posed, W, hs, local_only=True)
    np.testing.assert_allclose(f.local_matrices()[1], R, atol=1e-10)
    np.testing.assert_allclose(f.local_trans[1], 0, atol=1e-10)


def test_small_angle_round_trip_on_sphere(rng):
    m = icosphere(2)
    W, hs = one_hot_split(m, 4)
    f = random_frame(rng, 4, max_angle=0.1, trans_scale=0.05, with_global=False)
    posed = deform(m, W, hs, f)
    fitted = fit_frame(m, posed, W, hs)
    rms = np.sqrt(np.mean(np.sum((deform(m, W, hs, fitted) - posed) ** 2, axis=1)))
    assert rms < 1e-5


def test_soft_weights_fit_is_approximate(rng):
    m = icosphere(2)
    W, _ = one_hot_split(m, 4)
    W = 0.9 * W + 0.1 / 4
    hs = handle_positions(W, m.vertices)
    f = random_frame(rng, 4, max_angle=0.1, trans_scale=0.05, with_global=False)
    posed = deform(m, W, hs, f)
    err = np.sqrt(np.mean(np.sum((deform(m, W, hs, fit_frame(m, posed, W, hs)) - posed) ** 2, axis=1)))
    motion = np.sqrt(np.mean(np.sum((posed - m.vertices) ** 2, axis=1)))
    assert err < 0.25 * motion
    # a common rigid motion of every handle is still reproduced exactly
    f2 = HandleFrame.identity(4)
    f2.global_rot, f2.global_trans = rng.normal(size=3) * 0.3, rng.normal(size=3)
    posed2 = deform(m, W, hs, f2)
    again = deform(m, W, hs, fit_frame(m, posed2, W, hs))
    assert np.sqrt(np.mean(np.sum((again - posed2) ** 2, axis=1))) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_one_hot(seed):
    rng = np.random.default_rng(seed)
    m = icosphere(1)
    W, hs = one_hot_split(m, 3)
    f = random_frame(rng, 3, with_global=False)
    fitted = fit_frame(m, deform(m, W, hs, f), W, hs, local_only=True)
    np.testing.assert_allclose(fitted.local_matrices(), f.local_matrices(), atol=1e-6)
    np.testing.assert_allclose(fitted.local_trans, f.local_trans, atol=1e-6)
    assert np.allclose(np.linalg.det(fitted.local_matrices()), 1.0)


def test_procrustes_optimality(rng):
    m = icosphere(1)
    W, hs = one_hot_split(m, 2)
    target = m.vertices + rng.normal(size=m.vertices.shape) * 0.05
    f = fit_frame(m, target, W, hs, local_only=True)
    R_fit = f.local_matrices()[0]
    h = hs.positions[0]
    w = W[:, 0]

    def residual(R):
        X, Y = m.vertices - h, target - h
        t = (w @ (Y - X @ R.T)) / w.sum()
        return np.sum(w * np.sum((X @ R.T + t - Y) ** 2, axis=1))

    best = residual(R_fit)
    assert all(best <= residual(R) for R in random_rotations(100, rng))


def test_fit_sequence_reports_frame_index(sphere):
    W, hs = one_hot_split(sphere, 2)
    good = sphere.vertices
    with pytest.raises(ContractError, match="frame 1"):
        fit_sequence(sphere, [good, np.full_like(good, np.nan)], W, hs)
    motion = fit_sequence(sphere, [good, good], W, hs)
    assert len(motion) == 2 and motion.K == 2


def test_character_motion_extraction_reconstructs():
    c = make_character(4, seed=3, blend=0.0, n_frames=4)
    gt = c.rig.skinning
    hs = handle_positions(gt, c.mesh.vertices)
    for pose in c.sequences[0]:
        posed = skeletal_pose(c.mesh, c.rig, pose)
        f = fit_frame(c.mesh, posed, gt, hs)
        np.testing.assert_allclose(deform(c.mesh, gt, hs, f), posed, atol=1e-8)
