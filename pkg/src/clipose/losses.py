"""Training objectives.

Conventions: embeddings are (n, D) unit rows; batch losses are averaged
over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import SymmetrySpec


@dataclass
class LossWeights:
    alpha: float = 1.0      # point cloud <-> image NCE
    beta: float = 1.0       # point cloud <-> text NCE
    lam: float = 0.0        # image <-> text NCE
    tau: float = 0.07
    ce: float = 1.0         # image vs category-text cross entropy
    ce_tau: float | None = None   # None: no temperature on the CE logits
    pose: float = 1.0
    sym: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for k in ("alpha", "beta", "lam", "ce", "pose", "sym"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


def logit_scale(tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return 1.0 / tau


def similarity(A: torch.Tensor, B: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """``scale * A @ B.T``: entry (i, j) compares row i of A with row j of B."""
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"embedding dims differ: {A.shape[-1]} vs {B.shape[-1]}")
    return scale * (A @ B.T)


def nce_pair_loss(A: torch.Tensor, B: torch.Tensor, tau: float = 0.07, reduction: str = "mean"):
    """Symmetric in-batch InfoNCE; row i of A and row i of B are the positive pair."""
    n = A.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if B.shape[0] != n:
        raise ValueError("A and B must have the same number of rows")
    logits = similarity(A, B, logit_scale(tau))
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite similarity logits")
    target = torch.arange(n)
    per_pair = 0.5 * F.cross_entropy(logits, target, reduction="none") \
        + 0.5 * F.cross_entropy(logits.T, target, reduction="none")
    return per_pair.mean() if reduction == "mean" else per_pair.sum()


def multimodal_nce(pc, img, txt, w: LossWeights) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the three pairwise NCE terms; zero-weight terms are skipped."""
    terms = {}
    total = pc.new_zeros(())
    for name, weight, a, b in (("nce_pc_img", w.alpha, pc, img),
                               ("nce_pc_text", w.beta, pc, txt),
                               ("nce_img_text", w.lam, img, txt)):
        if weight == 0 or a is None or b is None:
            terms[name] = pc.new_zeros(())
            continue
        terms[name] = weight * nce_pair_loss(a, b, w.tau)
        total = total + terms[name]
    return total, terms


def classification_ce(img: torch.Tensor, category_texts: torch.Tensor, labels, tau: float | None = None):
    """Cross entropy of image-vs-category-text dot products (no temperature by default)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    M = category_texts.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= M):
        raise ValueError(f"labels must lie in [0, {M})")
    logits = similarity(img, category_texts, 1.0 if tau is None else logit_scale(tau))
    return F.cross_entropy(logits, labels)


def rotation_loss(r_x, r_y, r_x_gt, r_y_gt):
    return ((r_x - r_x_gt).abs().sum(-1) + (r_y - r_y_gt).abs().sum(-1)).mean()


def translation_loss(t_resid, M_P, t_gt):
    return ((t_resid + M_P) - t_gt).abs().sum(-1).mean()


def scale_loss(s_resid, M_s, s_gt):
    return ((s_resid + M_s) - s_gt).abs().sum(-1).mean()


def _rotate_about(v, axis, angle):
    # batched Rodrigues: v (B, N, 3), axis (B, 3) unit
    k = axis[:, None, :]
    c, s = np.cos(angle), np.sin(angle)
    return v * c + torch.cross(k.expand_as(v), v, dim=-1) * s + k * (v * k).sum(-1, keepdim=True) * (1 - c)


def symmetry_targets(P, R_gt, t_gt, kinds, axes, angle: float = np.pi / 2):
    """Map each input point to its symmetric counterpart under the ground-truth pose.

    ``kinds[b]`` is the symmetry kind of sample b and ``axes[b]`` its
    canonical axis (spin axis, or mirror-plane normal).
    """
    axes = torch.as_tensor(np.asarray(axes, dtype=np.float64), dtype=P.dtype)
    world_axis = torch.einsum("bij,bj->bi", R_gt, axes)
    local = P - t_gt[:, None]
    out = P.clone()
    kinds = list(kinds)
    rot = torch.tensor([k == "rotational" for k in kinds])
    ref = torch.tensor([k == "reflectional" for k in kinds])
    if rot.any():
        out[rot] = _rotate_about(local[rot], world_axis[rot], angle) + t_gt[rot][:, None]
    if ref.any():
        n = world_axis[ref][:, None]
        out[ref] = P[ref] - 2 * (local[ref] * n).sum(-1, keepdim=True) * n
    return out


def symmetry_loss(P, P_prime, R_gt, t_gt, syms, angle: float = np.pi / 2):
    """L1 between predicted correspondences and symmetric targets, mean over points and batch."""
    if P.shape != P_prime.shape:
        raise ValueError(f"P {tuple(P.shape)} and P' {tuple(P_prime.shape)} differ in shape")
    if isinstance(syms, SymmetrySpec):
        syms = [syms] * P.shape[0]
    target = symmetry_targets(P, R_gt, t_gt, [s.kind for s in syms], [s.axis for s in syms], angle)
    return (P_prime - target.detach()).abs().sum(-1).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {"total": self.total.item(), **{k: v.item() for k, v in self.terms.items()}}


TERM_NAMES = ("nce_pc_img", "nce_pc_text", "nce_img_text", "ce_img_text",
              "rot", "trans", "scale", "sym")


def total_loss(terms: dict) -> LossBreakdown:
    """Sum named (already weighted) terms: NCE + CE + pose (rot + trans + scale) + sym."""
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    full = {k: terms.get(k) for k in TERM_NAMES}
    ref = next(v for v in full.values() if v is not None) if any(
        v is not None for v in full.values()) else torch.zeros(())
    full = {k: (ref.new_zeros(()) if v is None else v) for k, v in full.items()}
    total = sum(full.values(), ref.new_zeros(()))
    return LossBreakdown(total, full)
