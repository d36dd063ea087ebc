import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

import clipose.posehead as ph
from clipose.encoders import PointEncoder
from clipose.geometry import Pose, RotationNormals, calibrate_normals, is_rotation
from clipose.posehead import (PointCloudStats, PoseHead, PoseHeadOutput, calibrate_normals_batch, decode,
                              invariant_descriptors, predict)


def cloud(seed, n=64, B=1):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(B, n, 3, generator=g, dtype=torch.float64) * torch.tensor([0.05, 0.03, 0.02],
            dtype=torch.float64) + torch.tensor([0.0, 0.0, 0.8], dtype=torch.float64))


def head_and_encoder(seed=0):
    torch.manual_seed(seed)
    enc = PointEncoder().double().eval()
    head = PoseHead(feature_dim=enc.feature_dim).double().eval()
    return enc, head


def test_head_output_contract():
    enc, head = head_and_encoder()
    P = cloud(0, B=3)
    out = predict(*enc(P), head, P)
    assert torch.allclose(out.r_x.norm(dim=-1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(out.r_y.norm(dim=-1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert (out.c_x > 0).all() and (out.c_y > 0).all()
    assert out.P_prime.shape == P.shape


def test_head_permutation():
    enc, head = head_and_encoder(1)
    P = cloud(1)
    perm = torch.randperm(64, generator=torch.Generator().manual_seed(2))
    a = predict(*enc(P), head, P)
    b = predict(*enc(P[:, perm]), head, P[:, perm])
    for f in ("r_x", "r_y", "t_resid", "s_resid", "c_x", "c_y"):
        assert (getattr(a, f) - getattr(b, f)).abs().max() < 1e-6
    assert (a.P_prime[:, perm] - b.P_prime).abs().max() < 1e-6


def test_head_shape_mismatch():
    _, head = head_and_encoder()
    with pytest.raises(ValueError):
        head(torch.zeros(1, 8, 5, dtype=torch.float64), torch.zeros(1, 64, dtype=torch.float64),
             torch.zeros(1, 8, 3, dtype=torch.float64))


def test_one_hot_head_requires_labels():
    head = PoseHead(feature_dim=96, n_categories=6).double()
    f = torch.zeros(1, 16, 96, dtype=torch.float64)
    g = torch.zeros(1, 64, dtype=torch.float64)
    with pytest.raises(ValueError):
        head(f, g, cloud(0, 16))
    out = head(f, g, cloud(0, 16), torch.eye(6, dtype=torch.float64)[:1])
    assert out.r_x.shape == (1, 3)


def test_geometric_term_rotation_equivariant():
    torch.manual_seed(3)
    head = PoseHead(feature_dim=8).double()
    P = cloud(4, n=128)
    Q = torch.tensor(Rotation.random(random_state=5).as_matrix())
    v = head.geometric_normals(P).view(2, 3)
    vq = head.geometric_normals(P @ Q.T).view(2, 3)
    assert torch.allclose(vq, v @ Q.T, atol=1e-8)


def test_invariant_descriptors_rotation_invariant():
    P = cloud(5, n=96)
    Q = torch.tensor(Rotation.random(random_state=6).as_matrix())
    a, _ = invariant_descriptors(P)
    b, _ = invariant_descriptors(P @ Q.T + 0.3)
    assert a.shape[-1] == ph.N_INVARIANTS
    assert torch.allclose(a, b, atol=1e-6)


def head_output(R, t_resid=(0, 0, 0), s_resid=(0, 0, 0), c=(1.0, 1.0)):
    R = torch.as_tensor(np.asarray(R, dtype=np.float64))
    z = torch.zeros(1, 4, 3, dtype=torch.float64)
    return PoseHeadOutput(R[None, :, 0], R[None, :, 1], torch.tensor([c[0]]), torch.tensor([c[1]]),
                          torch.tensor(np.asarray(t_resid, dtype=np.float64))[None],
                          torch.tensor(np.asarray(s_resid, dtype=np.float64))[None], z)


def test_decode_identity():
    stats = PointCloudStats(np.array([0.0, 0.0, 0.5]), np.array([0.1, 0.2, 0.1]))
    pose = decode(head_output(np.eye(3)), stats)
    assert np.array_equal(pose.R, np.eye(3))
    assert np.array_equal(pose.t, stats.centroid) and np.array_equal(pose.s, stats.mean_scale)


def test_decode_translation_residual():
    stats = PointCloudStats(np.array([0.0, 0.0, 0.5]), np.array([0.1, 0.1, 0.1]))
    pose = decode(head_output(np.eye(3), t_resid=(0.01, 0, 0)), stats)
    assert np.allclose(pose.t, [0.01, 0.0, 0.5], atol=1e-15)


def test_decode_clamps_scale():
    stats = PointCloudStats(np.zeros(3), np.array([0.1, 0.1, 0.1]))
    pose = decode(head_output(np.eye(3), s_resid=(-0.2, 0, 0)), stats)
    assert pose.s[0] == ph.MIN_SCALE


def test_decode_ground_truth_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(50):
        gt = Pose(Rotation.random(random_state=rng).as_matrix(), rng.uniform(-0.3, 1.0, 3),
                  rng.uniform(0.05, 0.3, 3))
        pts = rng.normal(size=(32, 3)) * 0.05 + gt.t
        M_s = rng.uniform(0.05, 0.3, 3)
        stats = PointCloudStats.from_points(pts, M_s)
        out = head_output(gt.R, gt.t - stats.centroid, gt.s - M_s, c=rng.uniform(0.1, 5, 2))
        pose = decode(out, stats)
        assert np.abs(pose.R - gt.R).max() < 1e-6
        assert np.abs(pose.t - gt.t).max() < 1e-6 and np.abs(pose.s - gt.s).max() < 1e-6


def test_decode_noisy_normals_still_rotation():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a, b = rng.normal(size=3), rng.normal(size=3)
        out = head_output(np.stack([a / np.linalg.norm(a), b / np.linalg.norm(b), np.zeros(3)], 1))
        assert is_rotation(decode(out, PointCloudStats(np.zeros(3), np.ones(3) * 0.1)).R, 1e-6)


def test_decode_parallel_normals_fall_back():
    before = ph.degenerate_events
    R = np.array([[1.0, 1.0, 0], [0, 0, 0], [0, 0, 0]])
    pose = decode(head_output(R), PointCloudStats(np.zeros(3), np.ones(3) * 0.1))
    assert is_rotation(pose.R) and ph.degenerate_events == before + 1


def test_decode_translation_equivariant():
    stats = PointCloudStats.from_points(np.random.default_rng(9).normal(size=(16, 3)), np.ones(3) * 0.1)
    v = np.array([0.1, -0.2, 0.3])
    moved = PointCloudStats(stats.centroid + v, stats.mean_scale)
    out = head_output(np.eye(3), t_resid=(0.02, 0.0, 0.01))
    assert np.allclose(decode(out, moved).t - decode(out, stats).t, v, atol=1e-15)


def test_batched_calibration_matches_numpy():
    rng = np.random.default_rng(10)
    rx, ry = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    rx /= np.linalg.norm(rx, axis=1, keepdims=True)
    ry /= np.linalg.norm(ry, axis=1, keepdims=True)
    c = rng.uniform(0.1, 3, (2, 20))
    bx, by = calibrate_normals_batch(*(torch.tensor(x) for x in (rx, ry, c[0], c[1])))
    for i in range(20):
        ex, ey = calibrate_normals(RotationNormals(rx[i], ry[i], c[0, i], c[1, i]))
        assert np.abs(bx[i].numpy() - ex).max() < 1e-9 and np.abs(by[i].numpy() - ey).max() < 1e-9
