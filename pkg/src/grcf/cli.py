"""Command-line entry point: synth, train, eval, analyze, gradcheck."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis, gradcheck
from .config import TrainConfig, apply_overrides, parse_config
from .data import (MODALITIES, collate, content_hash, generate_synthetic, labels_of, load_dataset, perturb,
                   save_dataset)
from .errors import ConfigError, DataError, DivergenceError, GRCFError, ShapeError
from .metrics import METRIC_COLUMNS, evaluate, format_table
from .model import GRCFModel, atomic_write_text
from .trainer import run_stage, write_log

log = logging.getLogger("grcf")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(GRCFError):
    pass


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be three integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return dims


def _noise_levels(text: str) -> list[float]:
    try:
        levels = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"noise must be a comma-separated list of floats, got {text!r}") from None
    if not levels or min(levels) < 0:
        raise argparse.ArgumentTypeError("noise levels must be non-negative")
    return levels


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@contextlib.contextmanager
def _out_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".lock"
    try:
        fd = os.open(marker, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out} is locked by another run ({marker} exists)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        marker.unlink(missing_ok=True)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    samples = generate_synthetic(args.n, seed=args.seed, dims=args.dims, task=args.task, noise=args.noise,
                                 S=args.S, max_len=args.max_len, map_seed=args.map_seed)
    try:
        save_dataset(samples, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    d_t, d_a, d_v = args.dims
    print(f"wrote {len(samples)} samples to {args.out} (d_text={d_t} d_audio={d_a} d_vision={d_v})")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _config_doc(args) -> dict:
    doc: dict = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    doc = apply_overrides(doc, overrides)
    if not isinstance(doc.setdefault("model", {}), dict):
        raise ConfigError("config key 'model' must be an object")
    return doc


def cmd_train(args) -> int:
    start = time.perf_counter()
    out = Path(args.out)
    with _out_lock(out):
        return _train(args, out, start)


def _train(args, out: Path, start: float) -> int:
    doc = _config_doc(args)
    task = doc["model"].get("head_kind", "regression")
    S = doc["model"].get("S", 3.0)
    if task not in ("regression", "classification") or not isinstance(S, (int, float)):
        parse_config(doc)  # reports the bad field
    train = load_dataset(args.data, task=task, S=float(S))
    # feature dims follow the data unless pinned in the config
    for key, d in zip(("d_text", "d_audio", "d_vision"), train[0].dims):
        doc["model"].setdefault(key, d)
    cfg = parse_config(doc)
    val = load_dataset(args.val, task=task, S=float(S)) if args.val else None
    stages = {"1": [1], "2": [2], "both": [1, 2]}[args.stage]

    if args.resume:
        model = _load_ckpt(args.resume)
        if model.config != cfg.model:
            raise ConfigError("checkpoint model config differs from the run config")
    elif stages == [2]:
        prior = out / "stage1.ckpt.json"
        if prior.exists():
            model = _load_ckpt(prior)
        elif args.from_scratch:
            model = GRCFModel(cfg.model, seed=cfg.seed)
        else:
            raise UsageError("stage 2 needs a stage-1 checkpoint: pass --resume, run --stage 1 into "
                             f"{out} first, or use --from-scratch")
    else:
        model = GRCFModel(cfg.model, seed=cfg.seed)

    atomic_write_text(out / "config.json", _dump_json(cfg.model_dump(mode="json")))
    outputs = {"config": str(out / "config.json")}
    summary = {}
    for stage in stages:
        try:
            res = run_stage(model, train, val, cfg, stage)
        except DivergenceError:
            model.save(out / f"stage{stage}.last_good.ckpt.json")
            raise
        ckpt, log_path = out / f"stage{stage}.ckpt.json", out / f"stage{stage}.log.csv"
        model.save(ckpt)
        write_log(res.log_rows, res.columns(), log_path)
        outputs[f"stage{stage}_ckpt"], outputs[f"stage{stage}_log"] = str(ckpt), str(log_path)
        summary[f"stage{stage}"] = {"best_epoch": res.best_epoch, "best_metric": res.best_metric,
                                    "history": res.history}
        print(f"stage {stage}: {len(res.log_rows)} steps, best validation metric "
              f"{res.best_metric if res.best_metric is not None else '-'} at epoch {res.best_epoch}")
    model.save(out / "model.ckpt.json")
    outputs["model"] = str(out / "model.ckpt.json")

    data_hashes = {"train": content_hash(args.data)}
    if args.val:
        data_hashes["val"] = content_hash(args.val)
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "stages": stages,
        "data": {"train": str(args.data), "val": str(args.val) if args.val else None},
        "data_hashes": data_hashes,
        "resume": str(args.resume) if args.resume else None,
        "outputs": outputs,
        "summary": summary,
        "duration_seconds": time.perf_counter() - start,
    }
    atomic_write_text(out / "manifest.json", _dump_json(manifest))
    return EXIT_OK


def _load_ckpt(path) -> GRCFModel:
    try:
        return GRCFModel.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------- eval


def _parse_truncate(text: str | None, model: GRCFModel) -> dict[str, int]:
    if not text:
        return {}
    c = model.config
    if text == "auto":
        return {"text": c.d_text, "audio": c.d_audio, "vision": c.d_vision}
    target = {}
    for item in text.split(","):
        mod, _, d = item.partition("=")
        if mod not in MODALITIES or not d.strip().isdigit():
            raise UsageError(f"--truncate entries look like vision=35 or 'auto', got {item!r}")
        target[mod] = int(d)
    return target


def eval_rows(model: GRCFModel, samples, noise: list[float] | None, ablate: list[str], truncate: dict,
              exclude_ties: bool, seed: int) -> list[dict]:
    base = samples
    if truncate:
        base = perturb(base, "truncate", truncate)
    if ablate:
        base = perturb(base, "ablate", ablate)
    levels = noise if noise is not None else [None]
    rows = []
    c = model.config
    for sigma in levels:
        cur = base if sigma is None else perturb(base, "noise", sigma, seed)
        pred = model.predict(collate(cur))
        rep = evaluate(labels_of(cur), pred, c.head_kind, c.S, exclude_ties)
        row = rep.to_dict()
        if sigma is not None:
            row["noise"] = sigma
        rows.append(row)
    return rows


def cmd_eval(args) -> int:
    model = _load_ckpt(args.ckpt)
    samples = load_dataset(args.data, task=model.config.head_kind, S=model.config.S)
    ablate = [m for m in (args.ablate or "").split(",") if m]
    truncate = _parse_truncate(args.truncate, model)
    try:
        rows = eval_rows(model, samples, args.noise, ablate, truncate, args.exclude_ties, args.seed)
    except ShapeError as exc:
        raise DataError(f"{exc}; pass --truncate auto to match the checkpoint dims") from None
    if args.noise is not None and len(args.noise) > 1:
        text = _dump_json({"rows": rows})
        print(format_table(rows, ("noise",) + METRIC_COLUMNS))
    else:
        text = _dump_json(rows[0])
        print(format_table(rows, (("noise",) if args.noise else ()) + METRIC_COLUMNS))
    if args.out:
        atomic_write_text(args.out, text)
    return EXIT_OK


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    model = _load_ckpt(args.ckpt)
    cfg = _analysis_config(args, model)
    samples = load_dataset(args.data, task=model.config.head_kind, S=model.config.S)
    w = cfg.stage1_weights()
    rows, summary = analysis.analyze_pairs(model, samples, args.pairs, cfg.group_spec(), cfg.margin_params(),
                                           seed=args.seed, eps=w.eps, fallback_uniform=w.fallback_uniform)
    kept = analysis.top_fraction(rows, args.top_frac)
    summary.update({"top_frac": args.top_frac, "n_exported": len(kept),
                    "strategy": cfg.groups.strategy, "ckpt": str(args.ckpt), "data_hash": content_hash(args.data)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "pairs.csv", analysis.rows_to_csv(kept))
    atomic_write_text(out / "summary.json", _dump_json(summary))
    print(f"exported {len(kept)} of {len(rows)} pairs to {out / 'pairs.csv'}")
    rho = summary["spearman_weight_delta_g"]
    print(f"spearman(weight, delta_g) = {'-' if rho is None else f'{rho:.4f}'}"
          + ("  [degenerate batch: fallback weights]" if summary["degenerate"] else ""))
    return EXIT_OK


def _analysis_config(args, model: GRCFModel) -> TrainConfig:
    doc = _config_doc(args)
    doc["model"] = model.config.model_dump()
    return parse_config(doc)


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradcheck.run_all(args.seed, args.configs, args.sizes)
    failed = False
    for r in results:
        ok = r.max_error < args.tol
        failed |= not ok
        print(f"{r.target:<16} max_rel_err={r.max_error:.3e}  {'ok' if ok else 'FAIL'}  ({r.seconds:.2f}s)")
    print(f"{len(results)} targets x {args.configs} configs in {time.perf_counter() - start:.1f}s; "
          f"tolerance {args.tol:g}: {'FAIL' if failed else 'ok'}")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grcf", description="Group-wise ranking then calibration for multimodal scores.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch validation metrics")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic JSONL dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=_dims, default=(32, 16, 16), help="d_text,d_audio,d_vision")
    s.add_argument("--task", choices=("regression", "classification"), default="regression")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--S", type=float, default=3.0)
    s.add_argument("--max-len", type=int, default=8)
    s.add_argument("--map-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run stage 1, stage 2 or both")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--from-scratch", action="store_true", help="allow stage 2 from random init")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally under perturbation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--noise", type=_noise_levels, help="sigma or comma list of sigmas")
    e.add_argument("--ablate", help="comma list of modalities to zero")
    e.add_argument("--truncate", help="e.g. vision=35, or 'auto' to match the checkpoint")
    e.add_argument("--exclude-ties", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="export per-pair advantage weights")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--pairs", type=int, default=2000)
    a.add_argument("--top-frac", type=float, default=0.05)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--config", help="groups/margins/stage1 settings; model section comes from the checkpoint")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference self-check of every objective")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sizes", choices=sorted(gradcheck.SIZES), default="tiny")
    g.add_argument("--configs", type=int, default=2)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = int(os.environ.get("GRCF_THREADS", "1"))
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
