"""Static tables and plots from run directories.

Output is a pure function of the input files: re-rendering the same runs
gives byte-identical text and PNGs (matplotlib's Agg backend with the
PNG metadata removed).
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import DEFAULT_THRESHOLDS, MetricReport, threshold_label  # noqa: E402
from .training import read_history  # noqa: E402

LOSS_TERMS = ("total", "nce_pc_img", "nce_pc_text", "nce_img_text", "ce_img_text", "rot", "trans",
              "scale", "sym")
PNG_META = {"Software": None}


def _label(run: Path) -> str:
    m = run / "manifest.json"
    if m.exists():
        cfg = json.loads(m.read_text()).get("config", {})
        tag = cfg.get("ablation")
        if tag:
            return f"{tag} (seed {cfg.get('seed', 0)})"
    return run.name


def _config(run: Path) -> dict:
    m = run / "manifest.json"
    return json.loads(m.read_text()).get("config", {}) if m.exists() else {}


def load_run(run: Path):
    """``(history, MetricReport or None)`` for a train/ablate output directory."""
    history = read_history(run / "history.jsonl") if (run / "history.jsonl").exists() else []
    report = None
    if (run / "metrics.json").exists():
        report = MetricReport.from_dict(json.loads((run / "metrics.json").read_text()))
    else:
        for h in reversed(history):
            if "metrics" in h:
                report = MetricReport.from_dict(h["metrics"])
                break
    return history, report


def summary_table(runs) -> str:
    labels = [threshold_label(n, m) for n, m in DEFAULT_THRESHOLDS]
    name_w = max(12, *(len(_label(r)) for r in runs))
    head = f"{'run':<{name_w}}" + "".join(f"{l:>9}" for l in labels) + f"{'top-1':>8}{'rot':>8}{'cm':>7}"
    lines = [head, "-" * len(head)]
    for r in runs:
        _, rep = load_run(r)
        if rep is None:
            lines.append(f"{_label(r):<{name_w}}  (no metrics)")
            continue
        cells = "".join(f"{100 * rep.map.get(l, float('nan')):>9.1f}" for l in labels)
        top1 = "" if rep.retrieval_top1 is None else f"{100 * rep.retrieval_top1:>8.1f}"
        rot = rep.mean_rot_deg.get("non_symmetric", float("nan"))
        cm = rep.mean_trans_cm if rep.mean_trans_cm is not None else float("nan")
        lines.append(f"{_label(r):<{name_w}}{cells}{top1:>8}{rot:>8.1f}{cm:>7.2f}")
    lines.append("")
    lines.append("rot: mean rotation error (deg) over non-symmetric categories; cm: mean translation error")
    return "\n".join(lines) + "\n"


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_losses(runs, path):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for r in runs:
        hist, _ = load_run(r)
        if not hist:
            continue
        ep = [h["epoch"] for h in hist]
        axes[0].plot(ep, [h["total"] for h in hist], marker="o", ms=3, label=_label(r))
    axes[0].set(xlabel="epoch", ylabel="total loss", title="Stage-1 total loss")
    hist, _ = load_run(runs[0])
    if hist:
        ep = [h["epoch"] for h in hist]
        for t in LOSS_TERMS[1:]:
            vals = [h.get(t, 0.0) for h in hist]
            if any(vals):
                axes[1].plot(ep, vals, label=t)
    axes[1].set(xlabel="epoch", ylabel="loss", title=f"terms: {_label(runs[0])}")
    for ax in axes:
        if ax.lines:
            ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_thresholds(runs, path):
    labels = [threshold_label(n, m) for n, m in DEFAULT_THRESHOLDS]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(runs), 1)
    for i, r in enumerate(runs):
        _, rep = load_run(r)
        if rep is None:
            continue
        xs = [j + i * width for j in range(len(labels))]
        ax.bar(xs, [100 * rep.map[l] for l in labels], width=width, label=_label(r))
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(labels))], labels)
    ax.set(ylabel="mAP (%)", ylim=(0, 100), title="mAP by threshold")
    if ax.patches:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_prompt_sweep(runs, path) -> bool:
    """Metrics against prompt length, when the runs differ only in it."""
    pts = []
    for r in runs:
        cfg = _config(r)
        _, rep = load_run(r)
        if rep is None or "prompt" not in cfg:
            continue
        pts.append((cfg["prompt"]["length"], rep))
    if len({p[0] for p in pts}) < 2:
        return False
    pts.sort(key=lambda p: p[0])
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [p[0] for p in pts]
    for l in ("5°5cm", "10°5cm", "10°10cm"):
        ax.plot(xs, [100 * p[1].map[l] for p in pts], marker="o", label=l)
    if all(p[1].retrieval_top1 is not None for p in pts):
        ax.plot(xs, [100 * p[1].retrieval_top1 for p in pts], marker="s", ls="--", label="retrieval top-1")
    ax.set(xlabel="prompt length", ylabel="%", title="prompt-length sweep")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    return True


def render_report(runs, out) -> list[Path]:
    runs = [Path(r) for r in runs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "summary.txt"]
    files[0].write_text(summary_table(runs))
    for r in runs:
        _, rep = load_run(r)
        if rep is not None and len(runs) == 1:
            (out / "metrics_table.txt").write_text(rep.table())
            files.append(out / "metrics_table.txt")
    plot_losses(runs, out / "loss_curves.png")
    plot_thresholds(runs, out / "map_thresholds.png")
    files += [out / "loss_curves.png", out / "map_thresholds.png"]
    if plot_prompt_sweep(runs, out / "prompt_sweep.png"):
        files.append(out / "prompt_sweep.png")
    return files
