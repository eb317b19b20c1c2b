"""Finite-difference checks for every objective and the full model.

Each target draws a random configuration, freezes any advantage-style weights
at the base point, and compares backward-pass gradients against central
differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .config import parse_config
from .data import collate, generate_synthetic, labels_of
from .groups import GroupSpec, MarginParams
from .model import GRCFModel, ModelConfig
from .trainer import batch_objective, pair_batch

SIZES = {
    "tiny": dict(d_text=4, d_audio=3, d_vision=3, d_proj=4, d_fused=5, d_unified=5),
    "small": dict(d_text=8, d_audio=5, d_vision=5, d_proj=6, d_fused=8, d_unified=8),
}

H = 1e-6


def _ranking_batch(rng, n_pairs: int, S: float = 3.0) -> losses.PairBatch:
    labels = rng.uniform(-S, S, size=2 * n_pairs)
    pairs = losses.ranking_pairs(labels, np.arange(n_pairs), n_pairs + np.arange(n_pairs))
    y = ad.Tensor(rng.uniform(-S - 1, S + 1, size=2 * n_pairs), requires_grad=True)
    return losses.PairBatch(y, labels, pairs)


def check_group(rng, sizes="tiny") -> float:
    b = _ranking_batch(rng, 8)
    spec, mp = GroupSpec.build("overlap-5"), MarginParams(*rng.uniform(0.05, 0.3, 3).cumsum())
    w0 = losses.advantage_weights(b)

    def f(y):
        return losses.group_aware_ranking_loss(losses.PairBatch(y, b.labels, b.pairs), spec, mp, weights=w0)

    return ad.finite_diff_check(f, b.y_hat, H)


def check_reg(rng, sizes="tiny") -> float:
    s = rng.uniform(-3, 3, size=12)
    y = ad.Tensor(rng.normal(0.5, 2.0, size=12), requires_grad=True)
    gamma = rng.uniform(0.0, 0.2)
    return ad.finite_diff_check(lambda t: losses.distribution_reg_loss(t, s, gamma), y, H)


def check_bound(rng, sizes="tiny") -> float:
    y = ad.Tensor(rng.uniform(-4.5, 4.5, size=12), requires_grad=True)
    return ad.finite_diff_check(lambda t: losses.boundary_loss(t, 3.0), y, H)


def check_mae(rng, sizes="tiny") -> float:
    s = rng.uniform(-3, 3, size=12)
    y = ad.Tensor(rng.uniform(-3, 3, size=12), requires_grad=True)
    return ad.finite_diff_check(lambda t: losses.mae_loss(t, s), y, H)


def check_sep(rng, sizes="tiny") -> float:
    x = ad.Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    w0 = losses.separation_weights(x[0], x[1])
    return ad.finite_diff_check(lambda t: losses.cls_separation_loss(t[0], t[1], 1.5, w0), x, H)


def check_comp(rng, sizes="tiny") -> float:
    x = ad.Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    a0 = losses.compactness_advantages(x[0], x[1], 1e-8, 2.0)
    return ad.finite_diff_check(lambda t: losses.cls_compactness_loss(t[0], t[1], advantages=a0), x, H)


def check_cls_bound(rng, sizes="tiny") -> float:
    x = ad.Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    return ad.finite_diff_check(lambda t: losses.cls_boundary_loss(t[0], t[1], 0.5), x, H)


def check_cal(rng, sizes="tiny") -> float:
    x = ad.Tensor(rng.normal(size=9), requires_grad=True)
    return ad.finite_diff_check(losses.cls_calibration_loss, x, H)


def check_bce(rng, sizes="tiny") -> float:
    x = ad.Tensor(rng.normal(0, 4, size=10), requires_grad=True)
    bits = rng.integers(0, 2, size=10)
    return ad.finite_diff_check(lambda t: losses.bce_loss(t, bits), x, H)


def _model_check(rng, sizes: str, task: str, stage: int) -> float:
    seed = int(rng.integers(2**31))
    mcfg = ModelConfig(**SIZES[sizes], head_kind=task,
                       dropout_fusion=0.0, dropout_unified=0.0)
    cfg = parse_config({"model": mcfg.model_dump(), "stage1": {"gamma": 0.05, "lambda2": 0.5, "lambda3": 0.5}})
    samples = generate_synthetic(4 if task == "regression" else 8, seed=seed,
                                 dims=(mcfg.d_text, mcfg.d_audio, mcfg.d_vision),
                                 task=task, noise=0.5, max_len=4, map_seed=seed)
    model = GRCFModel(mcfg, seed=seed)
    # move off the zero-initialised pooling vectors and biases
    for p in model.parameters():
        p.data = p.data + rng.normal(0, 0.3, size=p.shape)
    feats, labels = collate(samples), labels_of(samples)
    half = len(samples) // 2
    i_idx, j_idx = np.arange(half), half + np.arange(half)
    base = pair_batch(model, feats, labels, i_idx, j_idx, False, None)
    if task == "classification":
        frozen = losses.cls_frozen_weights(base, cfg.cls_weights()) if stage == 1 else None
    else:
        frozen = losses.advantage_weights(base) if base.n_pairs else None

    def f():
        b = pair_batch(model, feats, labels, i_idx, j_idx, False, None)
        return batch_objective(b, cfg, stage, task, frozen)[0]

    return ad.finite_diff_check(f, model.parameters(), H)


def check_stage1(rng, sizes="tiny") -> float:
    return _model_check(rng, sizes, "regression", 1)


def check_stage2(rng, sizes="tiny") -> float:
    return _model_check(rng, sizes, "regression", 2)


def check_cls_stage1(rng, sizes="tiny") -> float:
    return _model_check(rng, sizes, "classification", 1)


def check_cls_stage2(rng, sizes="tiny") -> float:
    return _model_check(rng, sizes, "classification", 2)


TARGETS: dict[str, Callable] = {
    "L_group": check_group,
    "L_reg": check_reg,
    "L_bound": check_bound,
    "L_mae": check_mae,
    "L_sep": check_sep,
    "L_comp": check_comp,
    "cls_boundary": check_cls_bound,
    "L_cal": check_cal,
    "bce": check_bce,
    "stage1_full": check_stage1,
    "stage2_full": check_stage2,
    "cls_stage1_full": check_cls_stage1,
    "cls_stage2_full": check_cls_stage2,
}


@dataclass
class CheckResult:
    target: str
    max_error: float
    n_configs: int
    seconds: float


def run_all(seed: int = 0, n_configs: int = 3, sizes: str = "tiny",
            targets: list[str] | None = None) -> list[CheckResult]:
    if sizes not in SIZES:
        raise ValueError(f"unknown sizes {sizes!r}; expected one of {sorted(SIZES)}")
    results = []
    for name in targets or list(TARGETS):
        fn = TARGETS[name]
        start = time.perf_counter()
        worst = 0.0
        for k in range(n_configs):
            rng = np.random.default_rng([seed, k, sorted(TARGETS).index(name)])
            worst = max(worst, fn(rng, sizes))
        results.append(CheckResult(name, worst, n_configs, time.perf_counter() - start))
    return results
