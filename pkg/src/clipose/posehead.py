"""Pose regression from point features and decoding to a :class:`Pose`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import _gather, init_linear, knn_indices
from .geometry import (DegenerateNormalsError, Pose, RotationNormals, assemble_rotation,
                       calibrate_normals, gram_schmidt_rotation)

CONFIDENCE_FLOOR = 1e-4
MIN_SCALE = 1e-4

# decode() calls that fell back to Gram-Schmidt because the normals were parallel
degenerate_events = 0


@dataclass
class PoseHeadOutput:
    r_x: torch.Tensor       # (B, 3) unit
    r_y: torch.Tensor       # (B, 3) unit
    c_x: torch.Tensor       # (B,) > 0
    c_y: torch.Tensor       # (B,) > 0
    t_resid: torch.Tensor   # (B, 3) m
    s_resid: torch.Tensor   # (B, 3) m
    P_prime: torch.Tensor   # (B, N, 3) m

    def sample(self, i: int) -> "PoseHeadOutput":
        return PoseHeadOutput(*(getattr(self, f)[i:i + 1] for f in self.__dataclass_fields__))


@dataclass
class PointCloudStats:
    centroid: np.ndarray    # M_P
    mean_scale: np.ndarray  # M_s

    @classmethod
    def from_points(cls, points, mean_scale) -> "PointCloudStats":
        return cls(np.asarray(points, dtype=np.float64).mean(0), np.asarray(mean_scale, dtype=np.float64))


def _mlp(i, hidden, o):
    return nn.Sequential(init_linear(nn.Linear(i, hidden)), nn.ReLU(),
                         init_linear(nn.Linear(hidden, hidden)), nn.ReLU(),
                         init_linear(nn.Linear(hidden, o)))


class PoseHead(nn.Module):
    """Two-layer MLP heads over max+mean pooled point features.

    ``n_categories > 0`` appends a one-hot category vector to the pooled
    input (the one-hot ablation).
    """

    def __init__(self, feature_dim=96, embed_dim=64, hidden=128, n_categories=0,
                 trans_unit=0.1, scale_unit=0.1, offset_unit=0.1, geometric=True,
                 coord_scale=10.0, vote_features=False, vote_gain=10.0, vote_hidden=64):
        super().__init__()
        self.geometric, self.coord_scale, self.vote_features = geometric, coord_scale, vote_features
        self.vote_gain = vote_gain
        if geometric:
            self.vote = _mlp(N_INVARIANTS + (feature_dim if vote_features else 0), vote_hidden, 3)
        self.n_categories = n_categories
        pooled = 2 * feature_dim + embed_dim + n_categories
        self.feature_dim, self.embed_dim = feature_dim, embed_dim
        self.rot = _mlp(pooled, hidden, 8)
        self.trans = _mlp(pooled, hidden, 3)
        self.scale = _mlp(pooled, hidden, 3)
        self.recon = _mlp(feature_dim + pooled, hidden, 3)
        self.trans_unit, self.scale_unit, self.offset_unit = trans_unit, scale_unit, offset_unit

    def geometric_normals(self, points, per_point=None):
        """(B, 6): rotation-equivariant contributions to (r_x, r_y).

        Three per-point scores give scored means v_x, v_y, v_z of the
        centred points; r_x receives v_x + v_y x v_z so that it stays
        available for shapes mirror-symmetric across the x plane.
        """
        inv, d = invariant_descriptors(points, self.coord_scale)
        if self.vote_features:
            inv = torch.cat([inv, per_point], -1)
        w = self.vote(inv)                                   # (B, N, 3)
        v = self.vote_gain * torch.einsum("bnk,bnc->bkc", w, d) / d.shape[1]  # (B, 3, 3)
        r_x = v[:, 0] + torch.cross(v[:, 1], v[:, 2], dim=-1)
        return torch.cat([r_x, v[:, 1]], -1)

    def forward(self, per_point, global_feature, points, one_hot=None) -> PoseHeadOutput:
        B, N, Fd = per_point.shape
        if Fd != self.feature_dim or global_feature.shape[-1] != self.embed_dim:
            raise ValueError(f"feature shapes {tuple(per_point.shape)}, {tuple(global_feature.shape)} "
                             f"do not match head ({self.feature_dim}, {self.embed_dim})")
        parts = [per_point.amax(1), per_point.mean(1), global_feature]
        if self.n_categories:
            if one_hot is None:
                raise ValueError("one-hot head needs category labels")
            parts.append(one_hot.to(per_point.dtype))
        pooled = torch.cat(parts, -1)
        r = self.rot(pooled)
        if self.geometric:
            r = r + F.pad(self.geometric_normals(points, per_point), (0, 2))
        off = self.recon(torch.cat([per_point, pooled[:, None].expand(-1, N, -1)], -1))
        return PoseHeadOutput(
            r_x=F.normalize(r[:, 0:3], dim=-1),
            r_y=F.normalize(r[:, 3:6], dim=-1),
            c_x=F.softplus(r[:, 6]) + CONFIDENCE_FLOOR,
            c_y=F.softplus(r[:, 7]) + CONFIDENCE_FLOOR,
            t_resid=self.trans(pooled) * self.trans_unit,
            s_resid=self.scale(pooled) * self.scale_unit,
            P_prime=points + off * self.offset_unit,
        )


def calibrate_normals_batch(r_x, r_y, c_x, c_y, eps: float = 1e-6):
    """Differentiable batched calibration; rotates both normals in their common plane."""
    cos = (r_x * r_y).sum(-1).clamp(-1 + eps, 1 - eps)
    excess = torch.acos(cos) - np.pi / 2
    w = c_x + c_y
    th1, th2 = (c_x / w * excess)[:, None], (c_y / w * excess)[:, None]
    axis = F.normalize(torch.cross(r_x, r_y, dim=-1), dim=-1)
    # both normals are perpendicular to the axis, so Rodrigues drops its last term
    rx = r_x * torch.cos(th2) + torch.cross(axis, r_x, dim=-1) * torch.sin(th2)
    ry = r_y * torch.cos(-th1) + torch.cross(axis, r_y, dim=-1) * torch.sin(-th1)
    return rx, ry


LOCAL_K = (8, 32)
N_INVARIANTS = 2 + 3 * len(LOCAL_K) + 3


def _local_frames(d, k):
    nb = _gather(d, knn_indices(d, min(k, d.shape[1])))
    nb = nb - nb.mean(2, keepdim=True)
    return torch.linalg.eigh(nb.transpose(2, 3) @ nb / nb.shape[2])


def invariant_descriptors(points: torch.Tensor, coord_scale: float = 10.0, ks=LOCAL_K):
    """Per-point rotation-invariant descriptors and centred coordinates.

    Descriptors: distance to the centroid, |cos| between the local surface
    normal and the radial direction, the spreads of the point's
    neighbourhood at each scale in ``ks`` and the three principal spreads of
    the whole cloud.  None depends on the order or sign of eigenvectors.
    """
    d = (points - points.mean(1, keepdim=True)) * coord_scale
    with torch.no_grad():
        evals = torch.linalg.eigvalsh(d.transpose(1, 2) @ d / d.shape[1])
        scales = [_local_frames(d, k) for k in ks]
        normal = scales[0][1][..., 0]
    radius = d.norm(dim=-1, keepdim=True)
    facing = ((normal * d).sum(-1, keepdim=True) / radius.clamp_min(1e-6)).abs()
    spread = evals.clamp_min(0).sqrt()[:, None].expand(-1, d.shape[1], -1)
    local = [ev.clamp_min(0).sqrt() for ev, _ in scales]
    return torch.cat([radius, facing, *local, spread], -1), d


def predict(per_point, global_feature, head: PoseHead, points, one_hot=None) -> PoseHeadOutput:
    return head(per_point, global_feature, points, one_hot)


def decode(out: PoseHeadOutput, stats: PointCloudStats, calibrate: bool = True) -> Pose:
    """Single-sample decode: calibrated normals -> R, residuals -> t and s.

    Parallel normals fall back to Gram-Schmidt on the raw normals.
    """
    def vec(x):
        return x.detach().double().cpu().numpy().reshape(-1)

    r_x, r_y = vec(out.r_x), vec(out.r_y)
    try:
        if not calibrate:
            raise DegenerateNormalsError("calibration disabled")
        normals = RotationNormals(r_x, r_y, float(vec(out.c_x)[0]), float(vec(out.c_y)[0]))
        R = assemble_rotation(*calibrate_normals(normals))
    except DegenerateNormalsError:
        global degenerate_events
        if calibrate:
            degenerate_events += 1
        R = gram_schmidt_rotation(r_x, r_y)
    t = vec(out.t_resid) + stats.centroid
    s = np.maximum(vec(out.s_resid) + stats.mean_scale, MIN_SCALE)
    return Pose(R, t, s)
