"""Per-pair advantage-weight export for a trained regression model."""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Sample, collate, labels_of, sample_pairs
from .errors import DataError, MetricError
from .groups import GroupSpec, MarginParams, pair_margins
from .losses import PairBatch, compute_advantages, ranking_pairs
from .metrics import spearman
from .model import GRCFModel

COLUMNS = ("i", "j", "id_i", "id_j", "s_i", "s_j", "y_hat_i", "y_hat_j",
           "reward", "advantage", "weight", "delta_g", "margin", "hinge")


def analyze_pairs(model: GRCFModel, samples: Sequence[Sample], M: int, spec: GroupSpec,
                  mp: MarginParams, seed: int = 0, eps: float = 1e-8,
                  fallback_uniform: bool = True) -> tuple[list[dict], dict]:
    """Treat M sampled pairs as one batch; return rows sorted by weight and a summary."""
    if model.config.head_kind != "regression":
        raise DataError("pair analysis needs a regression checkpoint")
    labels = labels_of(samples)
    pairs = sample_pairs(labels, M, np.random.default_rng(seed))
    oriented = ranking_pairs(labels, pairs.i, pairs.j)
    summary: dict = {"n_sampled": int(M), "n_tied_dropped": int(M - len(oriented))}
    if len(oriented) == 0:
        raise DataError("every sampled pair is tied; nothing to analyze")
    y_hat = model.predict(collate(samples))
    batch = PairBatch(ad.Tensor(y_hat), labels, oriented)
    adv = compute_advantages(batch, eps, fallback_uniform)
    i, j = oriented[:, 0], oriented[:, 1]
    margins, dg = pair_margins(labels[i], labels[j], spec, mp)
    hinge = np.maximum(0.0, margins - (y_hat[i] - y_hat[j]))

    order = np.argsort(-adv.weights, kind="stable")
    rows = [{"i": int(i[k]), "j": int(j[k]), "id_i": samples[i[k]].id, "id_j": samples[j[k]].id,
             "s_i": float(labels[i[k]]), "s_j": float(labels[j[k]]),
             "y_hat_i": float(y_hat[i[k]]), "y_hat_j": float(y_hat[j[k]]),
             "reward": float(adv.rewards[k]), "advantage": float(adv.advantages[k]),
             "weight": float(adv.weights[k]), "delta_g": int(dg[k]), "margin": float(margins[k]),
             "hinge": float(hinge[k])} for k in order]

    summary.update({
        "n_pairs": len(rows),
        "degenerate": adv.degenerate,
        "weights": ("fallback uniform" if fallback_uniform else "fallback zero") if adv.degenerate
        else "relu(-advantage)",
        "weight_mean": float(adv.weights.mean()),
        "mean_weight_by_delta_g": {str(int(g)): float(adv.weights[dg == g].mean()) for g in np.unique(dg)},
    })
    try:
        summary["spearman_weight_delta_g"] = spearman(adv.weights, dg)
    except MetricError as exc:
        summary["spearman_weight_delta_g"] = None
        summary.setdefault("notes", []).append(str(exc))
    return rows, summary


def top_fraction(rows: list[dict], frac: float) -> list[dict]:
    if not 0 < frac <= 1:
        raise ValueError("top fraction must be in (0, 1]")
    return rows[: max(1, math.ceil(frac * len(rows)))]


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
