"""Command line: ``clipose {gen-data,pretrain,train,eval,ablate,report}``.

Every command writes ``manifest.json`` (config snapshot, seed, version)
into its output directory.  Failures print one JSON line on stderr and
exit with 2 (usage), 3 (config) or 4 (runtime).
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 2, 3, 4
VERBS = ("gen-data", "pretrain", "train", "eval", "ablate", "report")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def version_string() -> str:
    """``git describe``-style version; falls back to the package version."""
    from . import __version__

    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# ---------------------------------------------------------------------------
# config files

def load_config(path, seed=None):
    """``(TrainConfig, data section)`` from a JSON file.

    Top-level keys mirror :class:`TrainConfig`; an optional ``data`` object
    holds DataConfig fields plus ``n_train`` / ``n_test`` per category.
    """
    from .synthdata import DataConfig
    from .training import TrainConfig

    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(doc.pop("data", {}) or {})
    counts = {"n_train": int(data.pop("n_train", 200)), "n_test": int(data.pop("n_test", 50))}
    try:
        cfg = TrainConfig.from_dict(doc)
        data_cfg = DataConfig.from_dict(data)
        if seed is not None:
            cfg.seed = seed
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if min(counts.values()) < 0:
        raise ConfigError("n_train and n_test must be non-negative")
    return cfg, data_cfg, counts


def write_manifest(out: Path, verb: str, config: dict, seed, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": verb, "seed": seed, "version": version_string(), "config": config, **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.verb} requires {', '.join(missing)}")


# ---------------------------------------------------------------------------
# verbs

def cmd_gen_data(args):
    from .synthdata import generate_dataset

    _need(args, "out")
    cfg, data_cfg, counts = load_config(args.config, args.seed)
    out = Path(args.out)
    generate_dataset(out / "data", counts["n_train"], counts["n_test"], cfg.seed, data_cfg)
    write_manifest(out, args.verb, {"data": {**data_cfg.to_dict(), **counts}}, cfg.seed)
    return {"dataset": str(out / "data")}


def _dataset_dir(path) -> Path:
    p = Path(path)
    return p / "data" if (p / "data" / "manifest.json").exists() else p


def cmd_pretrain(args):
    from .training import Checkpoint, data_config_of, pretrain_backbone, save_checkpoint
    from .synthdata import read_dataset

    _need(args, "out")
    cfg, data_cfg, _ = load_config(args.config, args.seed)
    if args.data is not None:
        data_cfg = data_config_of(read_dataset(_dataset_dir(args.data)))
    out = Path(args.out)
    write_manifest(out, args.verb, cfg.to_dict(), cfg.seed)
    state, hist = pretrain_backbone(cfg, data_cfg)
    save_checkpoint(Checkpoint(state, None, cfg.to_dict(), pretrain_history=hist), out / "backbone")
    top1 = next((h["heldout_top1"] for h in reversed(hist) if "heldout_top1" in h), None)
    return {"backbone": str(out / "backbone"), "heldout_top1": top1}


def _train(args, cfg):
    from .synthdata import read_dataset, write_dataset
    from .training import evaluate, fit, load_checkpoint, model_from_checkpoint

    _need(args, "data", "out")
    dataset = read_dataset(_dataset_dir(args.data))
    out = Path(args.out)
    write_manifest(out, args.verb, cfg.to_dict(), cfg.seed,
                   {"data": str(_dataset_dir(args.data)), "data_manifest": dataset.manifest.config})
    test = dataset.split("test")
    # the run directory carries its own evaluation split
    write_dataset({"test": test}, out / "test_data", seed=dataset.manifest.seed,
                  config=dataset.manifest.config)
    backbone = None
    if args.backbone is not None:
        b = load_checkpoint(Path(args.backbone) / "backbone" if (Path(args.backbone) / "backbone").exists()
                            else args.backbone)
        backbone = b.model_state
    ckpt, history = fit(cfg, dataset, out_dir=out, backbone=backbone)
    result = {"run": str(out), "epochs": len(history)}
    if test:
        model, _ = model_from_checkpoint(ckpt)
        report, _ = evaluate(model, test, ckpt.mean_scales, cfg)
        (out / "metrics.json").write_text(report.to_json())
        (out / "metrics.txt").write_text(report.table())
        result["map"] = report.map
        result["retrieval_top1"] = report.retrieval_top1
    return result


def cmd_train(args):
    cfg, _, _ = load_config(args.config, args.seed)
    return _train(args, cfg)


def cmd_ablate(args):
    from .training import ABLATIONS, apply_ablation

    _need(args, "tag")
    if args.tag not in ABLATIONS:
        raise ConfigError(f"unknown ablation tag {args.tag!r}")
    cfg, _, _ = load_config(args.config, args.seed)
    return _train(args, apply_ablation(cfg, args.tag))


def cmd_eval(args):
    from .evaluation import MetricReport
    from .synthdata import read_dataset
    from .training import evaluate, load_checkpoint, model_from_checkpoint, setup_determinism

    _need(args, "run")
    run = Path(args.run)
    ckpt = load_checkpoint(run / "checkpoint")
    model, cfg = model_from_checkpoint(ckpt)
    setup_determinism(cfg)
    data = _dataset_dir(args.data) if args.data is not None else run / "test_data"
    test = read_dataset(data).split("test")
    if not test:
        raise RuntimeError(f"no test split in {data}")
    report, _ = evaluate(model, test, ckpt.mean_scales, cfg)
    out = Path(args.out) if args.out is not None else run / "eval"
    write_manifest(out, args.verb, cfg.to_dict(), cfg.seed, {"run": str(run), "data": str(data)})
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.txt").write_text(report.table())
    result = {"metrics": str(out / "metrics.json"), "map": report.map}
    stored = run / "metrics.json"
    if stored.exists():
        same = MetricReport.from_dict(json.loads(stored.read_text())) == report
        result["matches_stored"] = same
        if args.check and not same:
            raise RuntimeError("re-evaluated metrics differ from the stored report")
    return result


def cmd_report(args):
    from .reporting import render_report

    _need(args, "run")
    out = Path(args.out) if args.out is not None else Path(args.run[0]) / "report"
    files = render_report([Path(r) for r in args.run], out)
    write_manifest(out, args.verb, {"runs": [str(r) for r in args.run]}, None)
    return {"files": [str(f) for f in files]}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clipose", description="Desk-scale tri-modal pose estimation experiments.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in VERBS:
        s = sub.add_parser(verb)
        s.add_argument("--config", help="JSON config (TrainConfig fields plus an optional 'data' object)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output directory")
        if verb in ("pretrain", "train", "ablate", "eval"):
            s.add_argument("--data", help="dataset directory (a gen-data output or its data/ folder)")
        if verb in ("train", "ablate"):
            s.add_argument("--backbone", help="reuse a pretrain output instead of running Stage 0")
        if verb == "ablate":
            s.add_argument("--tag", help="ablation row id, e.g. A0, B2, IV-3, VII-1")
        if verb == "eval":
            s.add_argument("--run", help="train/ablate output directory")
            s.add_argument("--check", action="store_true", help="exit 4 if the stored report is not reproduced")
        if verb == "report":
            s.add_argument("--run", action="append", help="run directory (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(message)}) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", e)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.verb](args)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", e)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        return _fail(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}")
    sys.stdout.write(json.dumps(result, sort_keys=True, default=_plain) + "\n")
    return 0


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


if __name__ == "__main__":
    sys.exit(main())
