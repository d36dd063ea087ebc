"""The whole pipeline through the command line, in under a minute.

Generates a small dataset, aligns the image and text towers (Stage 0),
trains the point encoder and pose head (Stage 1), re-evaluates the
checkpoint and renders the report.  configs/quick.json is deliberately
tiny, so expect near-random pose numbers; configs/e2e.json is the full
desk-scale experiment (about ten minutes).

    python demos/04_quick_run.py [workdir]
"""
import json
import sys
from pathlib import Path

from clipose.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "quick_run")
config = str(Path(__file__).resolve().parents[1] / "configs" / "quick.json")


def step(*argv):
    print("$ clipose", " ".join(argv))
    code = main(list(argv))
    if code:
        sys.exit(code)


step("gen-data", "--config", config, "--out", str(work / "gen"))
step("pretrain", "--config", config, "--data", str(work / "gen"), "--out", str(work / "stage0"))
step("train", "--config", config, "--data", str(work / "gen"), "--backbone", str(work / "stage0"),
     "--out", str(work / "run"))
step("eval", "--run", str(work / "run"), "--check")
step("report", "--run", str(work / "run"), "--out", str(work / "report"))

print()
print((work / "run" / "metrics.txt").read_text())
hist = [json.loads(line) for line in (work / "run" / "history.jsonl").read_text().splitlines()]
print("Stage-1 loss by epoch:", [round(h["total"], 3) for h in hist])
