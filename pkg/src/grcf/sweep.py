"""Train and evaluate one config under each margin strategy.

    python -m grcf.sweep --data train.jsonl --val val.jsonl --test test.jsonl --out runs/sweep
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .groups import STRATEGIES
from .metrics import METRIC_COLUMNS, format_table
from .model import atomic_write_text
from . import cli


def run_sweep(data, val, test, out, config=None, strategies=STRATEGIES, extra_sets=()) -> list[dict]:
    out = Path(out)
    rows = []
    for strategy in strategies:
        run_dir = out / strategy
        argv = ["train", "--data", str(data), "--out", str(run_dir), "--stage", "both",
                "--set", f"groups.strategy={strategy}"]
        if val:
            argv += ["--val", str(val)]
        if config:
            argv += ["--config", str(config)]
        for s in extra_sets:
            argv += ["--set", s]
        code = cli.main(argv)
        if code != cli.EXIT_OK:
            raise RuntimeError(f"training with strategy {strategy} exited with code {code}")
        report = run_dir / "eval.json"
        code = cli.main(["eval", "--ckpt", str(run_dir / "model.ckpt.json"), "--data", str(test),
                         "--out", str(report)])
        if code != cli.EXIT_OK:
            raise RuntimeError(f"evaluation of strategy {strategy} exited with code {code}")
        rows.append({"strategy": strategy, **json.loads(report.read_text(encoding="utf-8"))})
    atomic_write_text(out / "sweep.json", json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n")
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m grcf.sweep", description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--test", required=True)
    p.add_argument("--config")
    p.add_argument("--strategies", default=",".join(STRATEGIES))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    strategies = [s for s in args.strategies.split(",") if s]
    try:
        rows = run_sweep(args.data, args.val, args.test, args.out, args.config, strategies, args.set)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(format_table(rows, ("strategy",) + METRIC_COLUMNS))
    return 0


if __name__ == "__main__":
    sys.exit(main())
