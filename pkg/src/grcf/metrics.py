"""Evaluation metrics: ranking accuracy, binned accuracies, F1, MAE, Pearson, Spearman."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def pairwise_acc(y, y_hat, exclude_ties: bool = False) -> float:
    """Fraction of unordered pairs i<j where (y_i > y_j) iff (y_hat_i > y_hat_j).

    Tied labels are scored literally by default (a pair counts as correct when
    the prediction is not strictly ordered either). ``exclude_ties`` drops them.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(y_hat, dtype=np.float64)
    n = y.size
    if n < 2:
        raise MetricError("pairwise accuracy needs at least 2 samples")
    iu, ju = np.triu_indices(n, k=1)
    agree = (y[iu] > y[ju]) == (p[iu] > p[ju])
    if exclude_ties:
        keep = y[iu] != y[ju]
        if not keep.any():
            raise MetricError("every pair is tied")
        agree = agree[keep]
    return float(agree.mean())


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _bin5(x: np.ndarray) -> np.ndarray:
    return np.select([x <= -0.7, x < -0.1, x <= 0.1, x < 0.7], [0, 1, 2, 3], default=4)


def _bin3(x: np.ndarray) -> np.ndarray:
    return np.select([x < -0.1, x <= 0.1], [0, 1], default=2)


def acc_k(y, y_hat, k: int, S: float = 3.0) -> float:
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(y_hat, dtype=np.float64), -S, S)
    if k == 7:
        hit = round_half_away(np.clip(p, -3, 3)) == round_half_away(np.clip(y, -3, 3))
    elif k == 5:
        hit = _bin5(p) == _bin5(y)
    elif k == 3:
        hit = _bin3(p) == _bin3(y)
    elif k == 2:
        nz = y != 0
        if not nz.any():
            raise MetricError("Acc2 undefined: every label is zero")
        hit = (y[nz] > 0) == (p[nz] > 0)
    else:
        raise ValueError(f"unsupported k={k}")
    return float(np.mean(hit))


def f1_binary(y, y_hat, task: str = "regression") -> float:
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(y_hat, dtype=np.float64)
    if task == "regression":
        nz = y != 0
        truth, pred = y[nz] > 0, p[nz] > 0
    else:
        truth, pred = y > 0.5, p > 0
    tp = np.sum(truth & pred)
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / truth.sum() if truth.sum() else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def mae(y, y_hat) -> float:
    return float(np.mean(np.abs(np.asarray(y_hat, dtype=np.float64) - np.asarray(y, dtype=np.float64))))


def corr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac, bc = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(ac * ac) * np.sum(bc * bc))
    if denom == 0:
        raise MetricError("correlation undefined for a zero-variance vector")
    return float(np.clip(np.sum(ac * bc) / denom, -1.0, 1.0))


def spearman(a, b) -> float:
    return corr(rankdata(a, method="average"), rankdata(b, method="average"))


@dataclass
class EvalReport:
    pairwise_acc: float | None = None
    acc7: float | None = None
    acc5: float | None = None
    acc3: float | None = None
    acc2: float | None = None
    f1: float | None = None
    mae: float | None = None
    corr: float | None = None
    n_samples: int = 0
    n_excluded_zero: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        return format_table([self.to_dict()], METRIC_COLUMNS)


METRIC_COLUMNS = ("pairwise_acc", "acc7", "acc5", "acc3", "acc2", "f1", "mae", "corr", "n_samples")


def format_table(rows: list[dict], columns) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[k]) for b in body)) for k, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def evaluate(y, y_hat, task: str = "regression", S: float = 3.0, exclude_ties: bool = False) -> EvalReport:
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(y_hat, dtype=np.float64)
    rep = EvalReport(n_samples=int(y.size))
    if y.size >= 2:
        try:
            rep.pairwise_acc = pairwise_acc(y, p, exclude_ties)
        except MetricError as exc:
            rep.notes.append(str(exc))
    if task == "classification":
        rep.acc2 = float(np.mean((p > 0) == (y > 0.5)))
        rep.f1 = f1_binary(y, p, task)
        return rep
    rep.n_excluded_zero = int(np.sum(y == 0))
    rep.acc7 = acc_k(y, p, 7, S)
    rep.acc5 = acc_k(y, p, 5, S)
    rep.acc3 = acc_k(y, p, 3, S)
    try:
        rep.acc2 = acc_k(y, p, 2, S)
    except MetricError as exc:
        rep.notes.append(str(exc))
    rep.f1 = f1_binary(y, p, task)
    rep.mae = mae(y, p)
    try:
        rep.corr = corr(y, p)
    except MetricError as exc:
        rep.notes.append(str(exc))
    return rep
