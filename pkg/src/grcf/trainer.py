"""Two-stage training: ranking structure first, then calibration with
per-group learning rates.

Both stages draw from the same fixed set of training pairs (sampled once from
the config seed) and reshuffle its order every epoch. Each micro-batch of B
pairs is evaluated as one flattened batch of 2B samples.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .config import TrainConfig
from .data import Pairs, Sample, collate, default_num_pairs, labels_of, sample_pairs
from .errors import DivergenceError, NonFiniteError
from .metrics import acc_k, mae, pairwise_acc
from .model import GRCFModel, atomic_write_text
from .optim import AdamW, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

REG_COLUMNS = ("step", "epoch", "lr", "L_group", "L_reg", "L_bound", "L_mae", "total")
CLS_COLUMNS = ("step", "epoch", "lr", "L_sep", "L_comp", "L_bound", "L_cal", "L_bce", "total")


@dataclass
class StageResult:
    stage: int
    model: GRCFModel
    log_rows: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    best_metric: float | None = None
    best_epoch: int | None = None

    def columns(self) -> tuple[str, ...]:
        return CLS_COLUMNS if self.model.config.head_kind == "classification" else REG_COLUMNS


def stage_lrs(model: GRCFModel, cfg: TrainConfig, stage: int) -> dict[str, float]:
    """Base learning rate per parameter name for the given stage."""
    if stage == 1:
        by_group = {"head": cfg.stage1.head_lr, "encoder_top": cfg.stage1.head_lr,
                    "encoder_base": cfg.stage1.encoder_lr}
    else:
        by_group = {"head": cfg.stage2.head_lr, "encoder_top": cfg.stage2.encoder_top_lr,
                    "encoder_base": cfg.stage2.encoder_base_lr}
    return {name: by_group[model.param_group(name)] for name in model.params}


def training_pairs(samples: Sequence[Sample], cfg: TrainConfig) -> Pairs:
    labels = labels_of(samples)
    M = cfg.optim.num_pairs or default_num_pairs(len(samples))
    return sample_pairs(labels, M, np.random.default_rng([cfg.seed, 0]))


def pair_batch(model: GRCFModel, feats, labels, i_idx, j_idx, training: bool, rng) -> losses.PairBatch:
    B = len(i_idx)
    both = np.concatenate([i_idx, j_idx])
    y_hat = model(feats.take(both), training=training, rng=rng)
    y = labels[both]
    first, second = np.arange(B), B + np.arange(B)
    if model.config.head_kind == "regression":
        pairs = losses.ranking_pairs(y, first, second)
    else:
        pairs = np.stack([first, second], axis=1)
    return losses.PairBatch(y_hat, y, pairs)


def batch_objective(batch: losses.PairBatch, cfg: TrainConfig, stage: int, task: str,
                    frozen=None) -> tuple[ad.Tensor, dict[str, float]]:
    if task == "classification":
        if stage == 1:
            return losses.cls_stage1_loss(batch, cfg.cls_weights(), frozen)
        return losses.cls_stage2_loss(batch)
    spec, mp = cfg.group_spec(), cfg.margin_params()
    if stage == 1:
        return losses.stage1_loss(batch, cfg.stage1_weights(), spec, mp, frozen)
    return losses.stage2_loss(batch, cfg.stage2_weights(), spec, mp, frozen)


def validation_metric(model: GRCFModel, val: Sequence[Sample], stage: int) -> tuple[float, bool]:
    """(value, higher_is_better) used for best-checkpoint selection."""
    y = labels_of(val)
    pred = model.predict(collate(val))
    task = model.config.head_kind
    if stage == 1:
        return pairwise_acc(y, pred, exclude_ties=task == "classification"), True
    if task == "classification":
        return float(np.mean((pred > 0) == (y > 0.5))), True
    return mae(y, pred), False


def run_stage(model: GRCFModel, train: Sequence[Sample], val: Sequence[Sample] | None,
              cfg: TrainConfig, stage: int, epochs: int | None = None) -> StageResult:
    """Train ``model`` in place for one stage and leave the best checkpoint loaded."""
    task = model.config.head_kind
    stage_cfg = cfg.stage1 if stage == 1 else cfg.stage2
    epochs = stage_cfg.epochs if epochs is None else epochs
    result = StageResult(stage, model)
    if epochs == 0:
        return result

    feats = collate(train)
    labels = labels_of(train)
    pairs = training_pairs(train, cfg)
    B, accum = cfg.optim.batch_pairs, cfg.optim.grad_accum_steps
    n_micro = math.ceil(len(pairs) / B)
    steps_per_epoch = math.ceil(n_micro / accum)
    total_steps = epochs * steps_per_epoch
    base_lrs = stage_lrs(model, cfg, stage)
    opt = AdamW(model.params, cfg.optim.betas, cfg.optim.adam_eps)
    order_rng = np.random.default_rng([cfg.seed, stage, 1])
    drop_rng = np.random.default_rng([cfg.seed, stage, 2])

    best_state = model.state_dict()
    best_value = None
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(pairs))
        for window_start in range(0, n_micro, accum):
            window = range(window_start, min(window_start + accum, n_micro))
            model.zero_grad()
            sums: dict[str, float] = {}
            try:
                for mb in window:
                    sel = order[mb * B:(mb + 1) * B]
                    batch = pair_batch(model, feats, labels, pairs.i[sel], pairs.j[sel], True, drop_rng)
                    loss, parts = batch_objective(batch, cfg, stage, task)
                    if loss.requires_grad:
                        ad.backward(loss * (1.0 / len(window)))
                    for k, v in parts.items():
                        sums[k] = sums.get(k, 0.0) + v / len(window)
                names = list(model.params)
                clipped = clip_grad_norm([model.params[k].grad for k in names], cfg.optim.grad_clip_norm)
                lrs = {k: cosine_lr(step, total_steps, base_lrs[k]) for k in names}
                opt.step(lrs, stage_cfg.weight_decay, dict(zip(names, clipped)))
            except NonFiniteError as exc:
                model.load_state_dict(best_state)
                raise DivergenceError(f"stage {stage} diverged at step {step}: {exc}", best_state) from exc
            head_lr = next((lrs[k] for k in names if model.param_group(k) == "head"), 0.0)
            result.log_rows.append({"step": step, "epoch": epoch, "lr": head_lr, **sums})
            step += 1

        if val:
            value, higher = validation_metric(model, val, stage)
            result.history.append({"epoch": epoch, "metric": value})
            log.info("stage %d epoch %d: validation %s = %.6f", stage, epoch,
                     "pairwise_acc" if stage == 1 else ("acc2" if higher else "mae"), value)
            better = best_value is None or (value > best_value if higher else value < best_value)
            if better:
                best_value, result.best_epoch = value, epoch
                best_state = model.state_dict()
        else:
            best_state = model.state_dict()

    model.load_state_dict(best_state)
    result.best_metric = best_value
    return result


def run_stage1(model, train, val, cfg: TrainConfig) -> StageResult:
    return run_stage(model, train, val, cfg, 1)


def run_stage2(model, train, val, cfg: TrainConfig, epochs: int | None = None) -> StageResult:
    return run_stage(model, train, val, cfg, 2, epochs)


def write_log(rows: list[dict], columns: Sequence[str], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "") for c in columns])
    atomic_write_text(path, buf.getvalue())
