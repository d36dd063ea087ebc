"""Pose-error records, threshold mAP and cross-modal retrieval accuracy."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose, SymmetrySpec, rotation_error_deg, translation_error_cm
from .synthdata import CATEGORIES, CATEGORY_NAMES

DEFAULT_THRESHOLDS = ((5, 2), (5, 5), (10, 2), (10, 5), (10, 10))


def threshold_label(deg, cm) -> str:
    return f"{deg:g}°{cm:g}cm"


@dataclass
class PoseErrorRecord:
    category_id: int
    rot_deg: float
    trans_cm: float
    instance_id: str = ""


@dataclass
class MetricReport:
    map: dict                      # label -> overall value
    per_category: dict             # category name -> {label -> value}
    retrieval_top1: float | None = None
    mean_rot_deg: dict = field(default_factory=dict)
    mean_trans_cm: float | None = None
    n_instances: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    def table(self) -> str:
        """Aligned text table, one row per category plus the overall mean, in percent."""
        labels = list(self.map)
        width = max(8, *(len(l) for l in labels))
        head = f"{'category':<10}" + "".join(f"{l:>{width + 1}}" for l in labels)
        rows = [head, "-" * len(head)]
        for name, vals in self.per_category.items():
            rows.append(f"{name:<10}" + "".join(f"{100 * vals[l]:>{width + 1}.1f}" for l in labels))
        rows.append(f"{'mean':<10}" + "".join(f"{100 * self.map[l]:>{width + 1}.1f}" for l in labels))
        if self.retrieval_top1 is not None:
            rows.append(f"retrieval top-1: {100 * self.retrieval_top1:.1f}")
        return "\n".join(rows) + "\n"


def metric_symmetry(category_id: int, reflectional_as_symmetric: bool = False) -> SymmetrySpec:
    """Symmetry used by the metric: rotational kept, reflectional off by default."""
    sym = CATEGORIES[CATEGORY_NAMES[category_id]].symmetry
    if sym.kind == "reflectional" and not reflectional_as_symmetric:
        return SymmetrySpec("none")
    return sym


def evaluate_instance(pred: Pose, gt: Pose, sym: SymmetrySpec, category_id: int = -1,
                      instance_id: str = "") -> PoseErrorRecord:
    return PoseErrorRecord(category_id, rotation_error_deg(pred.R, gt.R, sym),
                           translation_error_cm(pred.t, gt.t), instance_id)


def map_at(records, thresholds=DEFAULT_THRESHOLDS) -> MetricReport:
    """Per category: fraction with rot < n deg and trans < m cm; overall = mean over categories."""
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    if any(n <= 0 or m <= 0 for n, m in thresholds):
        raise ValueError("thresholds must be positive")
    cats = np.array([r.category_id for r in records])
    rot = np.array([r.rot_deg for r in records])
    tr = np.array([r.trans_cm for r in records])
    present = sorted(set(cats.tolist()))
    per_cat, overall = {}, {}
    for n, m in thresholds:
        ok = (rot < n) & (tr < m)
        lab = threshold_label(n, m)
        vals = [float(ok[cats == c].mean()) for c in present]
        overall[lab] = float(np.mean(vals))
        for c, v in zip(present, vals):
            per_cat.setdefault(_cat_name(c), {})[lab] = v
    return MetricReport(overall, per_cat, n_instances=len(records))


def _cat_name(c: int) -> str:
    return CATEGORY_NAMES[c] if 0 <= c < len(CATEGORY_NAMES) else str(c)


def retrieval_accuracy(embeddings, category_text_embeddings, labels) -> float:
    """Top-1 accuracy of argmax over dot products with the per-category text embeddings."""
    sims = np.asarray(embeddings) @ np.asarray(category_text_embeddings).T
    return float(np.mean(sims.argmax(1) == np.asarray(labels)))


def mean_errors(records, reflectional_as_symmetric: bool = False) -> tuple[dict, float]:
    """Mean rotation error split by symmetric/non-symmetric categories, and mean translation error."""
    groups = {"non_symmetric": [], "symmetric": [], "all": []}
    for r in records:
        sym = metric_symmetry(r.category_id, reflectional_as_symmetric)
        groups["symmetric" if sym.kind != "none" else "non_symmetric"].append(r.rot_deg)
        groups["all"].append(r.rot_deg)
    rot = {k: float(np.mean(v)) for k, v in groups.items() if v}
    return rot, float(np.mean([r.trans_cm for r in records]))
