"""Training objectives: ranking, distribution and boundary terms for regression,
MAE calibration, and the separation/compactness suite for binary labels.

Advantage weights are computed from detached predictions, so they scale the
hinge terms without contributing gradient of their own. Every composite loss
accepts precomputed weights; the gradient checks use that to freeze the weights
at the base point, which is exactly the surrogate the backward pass
differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError
from .groups import GroupSpec, MarginParams, pair_margins


@dataclass(frozen=True)
class Stage1Weights:
    lambda1: float = 0.9
    lambda2: float = 0.005
    lambda3: float = 0.001
    gamma: float = 1.0
    S: float = 3.0
    eps: float = 1e-8
    fallback_uniform: bool = True


@dataclass(frozen=True)
class Stage2Weights:
    beta1: float = 0.3
    beta2: float = 0.3
    beta3: float = 0.02
    S: float = 3.0
    eps: float = 1e-8
    fallback_uniform: bool = True


@dataclass(frozen=True)
class ClsWeights:
    theta1: float = 1.0
    theta2: float = 0.5
    theta3: float = 0.5
    theta4: float = 0.1
    m_sep: float = 1.0
    m_b: float = 0.5
    A_clip: float = 2.0
    eps: float = 1e-8


@dataclass
class PairBatch:
    """Predictions and labels for the flattened members of a batch of pairs.

    ``pairs`` rows are (i, j) positions into ``y_hat``. For regression they
    are ranking pairs oriented so that ``labels[i] > labels[j]``.
    """

    y_hat: Tensor
    labels: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.y_hat.shape != self.labels.shape:
            raise ShapeError("PairBatch", self.y_hat.shape, self.labels.shape)
        if self.pairs.size and (self.pairs.min() < 0 or self.pairs.max() >= self.labels.size):
            raise DataError("PairBatch: pair index out of range")

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def check_ordered(self) -> None:
        if self.n_pairs and not np.all(self.labels[self.pairs[:, 0]] > self.labels[self.pairs[:, 1]]):
            raise DataError("ranking pairs must satisfy s_i > s_j")


def ranking_pairs(labels, first, second) -> np.ndarray:
    """Orient index pairs so the higher label comes first; tied pairs are dropped."""
    labels = np.asarray(labels, dtype=np.float64)
    first, second = np.asarray(first), np.asarray(second)
    la, lb = labels[first], labels[second]
    keep = la != lb
    i = np.where(la > lb, first, second)[keep]
    j = np.where(la > lb, second, first)[keep]
    return np.stack([i, j], axis=1).astype(np.int64)


# ---------------------------------------------------------------- regression


def rank_hinge(y_i, y_j, margin) -> Tensor:
    return ad.relu(ad.sub(margin, ad.sub(y_i, y_j)))


@dataclass
class Advantages:
    rewards: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray
    degenerate: bool


def compute_advantages(batch: PairBatch, eps: float = 1e-8,
                       fallback_uniform: bool = True) -> Advantages:
    if batch.n_pairs == 0:
        raise DataError("advantage weights need at least one pair")
    y = ad.detach(batch.y_hat)
    r = ad.sigmoid(y[batch.pairs[:, 0]] - y[batch.pairs[:, 1]])
    mu = ad.mean(r)
    sd = ad.std(r)
    A = (r - mu) / (sd + eps)
    w = ad.relu(-A).data
    degenerate = bool(sd.data < eps)
    if degenerate:
        w = np.ones_like(w) if fallback_uniform else np.zeros_like(w)
    return Advantages(r.data, A.data, w, degenerate)


def advantage_weights(batch: PairBatch, eps: float = 1e-8, fallback_uniform: bool = True) -> np.ndarray:
    return compute_advantages(batch, eps, fallback_uniform).weights


def group_aware_ranking_loss(batch: PairBatch, spec: GroupSpec, mp: MarginParams,
                             eps: float = 1e-8, fallback_uniform: bool = True,
                             weights: np.ndarray | None = None) -> Tensor:
    if batch.n_pairs == 0:
        return Tensor(0.0)
    batch.check_ordered()
    i, j = batch.pairs[:, 0], batch.pairs[:, 1]
    margins, _ = pair_margins(batch.labels[i], batch.labels[j], spec, mp)
    if weights is None:
        weights = advantage_weights(batch, eps, fallback_uniform)
    hinge = rank_hinge(batch.y_hat[i], batch.y_hat[j], margins)
    return ad.mean(hinge * weights)


def distribution_reg_loss(y_hat: Tensor, s, gamma: float) -> Tensor:
    s = np.asarray(s, dtype=np.float64)
    if s.size < 2:
        raise DataError("distribution regularization needs at least 2 predictions")
    mean_term = ad.square(ad.mean(y_hat) - s.mean())
    std_term = ad.square(ad.std(y_hat) - s.std())
    return ad.relu(mean_term - gamma) + ad.relu(std_term - gamma)


def boundary_loss(y_hat: Tensor, S: float) -> Tensor:
    return ad.mean(ad.relu(ad.abs_(y_hat) - S))


def mae_loss(y_hat: Tensor, s) -> Tensor:
    return ad.mean(ad.abs_(y_hat - np.asarray(s, dtype=np.float64)))


def stage1_loss(batch: PairBatch, w: Stage1Weights, spec: GroupSpec, mp: MarginParams,
                weights: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    l_group = group_aware_ranking_loss(batch, spec, mp, w.eps, w.fallback_uniform, weights)
    l_reg = distribution_reg_loss(batch.y_hat, batch.labels, w.gamma)
    l_bound = boundary_loss(batch.y_hat, w.S)
    total = w.lambda1 * l_group + w.lambda2 * l_reg + w.lambda3 * l_bound
    # MAE is reported for the loss curves but is not part of the objective
    parts = {"L_group": l_group.item(), "L_reg": l_reg.item(), "L_bound": l_bound.item(),
             "L_mae": float(np.mean(np.abs(batch.y_hat.data - batch.labels))),
             "total": total.item()}
    return total, parts


def stage2_loss(batch: PairBatch, w: Stage2Weights, spec: GroupSpec, mp: MarginParams,
                weights: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    l_mae = mae_loss(batch.y_hat, batch.labels)
    l_group = group_aware_ranking_loss(batch, spec, mp, w.eps, w.fallback_uniform, weights)
    l_bound = boundary_loss(batch.y_hat, w.S)
    total = w.beta1 * l_mae + w.beta2 * l_group + w.beta3 * l_bound
    parts = {"L_group": l_group.item(), "L_reg": float("nan"), "L_bound": l_bound.item(),
             "L_mae": l_mae.item(), "total": total.item()}
    return total, parts


# ---------------------------------------------------------------- classification


def cls_separation_loss(pos: Tensor, neg: Tensor, m_sep: float,
                        weights: np.ndarray | None = None) -> Tensor:
    if pos.size == 0:
        raise DataError("separation loss needs at least one heterogeneous pair")
    if weights is None:
        weights = separation_weights(pos, neg)
    return ad.mean(rank_hinge(pos, neg, m_sep) * weights)


def separation_weights(pos: Tensor, neg: Tensor) -> np.ndarray:
    return (1.0 - ad.sigmoid(ad.detach(pos) - ad.detach(neg))).data


def compactness_advantages(y_i: Tensor, y_j: Tensor, eps: float, A_clip: float) -> np.ndarray:
    dist = ad.square(ad.detach(y_i) - ad.detach(y_j))
    r = ad.exp(-dist)
    A = (r - ad.mean(r)) / (ad.std(r) + eps)
    return ad.clip(A, -A_clip, A_clip).data


def cls_compactness_loss(y_i: Tensor, y_j: Tensor, eps: float = 1e-8, A_clip: float = 2.0,
                         advantages: np.ndarray | None = None) -> Tensor:
    if y_i.size == 0:
        return Tensor(0.0)
    if advantages is None:
        advantages = compactness_advantages(y_i, y_j, eps, A_clip)
    dist = ad.square(y_i - y_j)
    return ad.mean(ad.relu(dist * (-advantages)))


def cls_boundary_loss(pos: Tensor, neg: Tensor, m_b: float) -> Tensor:
    total = Tensor(0.0)
    if pos.size:
        total = total + ad.mean(ad.relu(m_b - pos))
    if neg.size:
        total = total + ad.mean(ad.relu(neg + m_b))
    return total


def cls_calibration_loss(logits: Tensor) -> Tensor:
    return ad.abs_(ad.mean(logits))


def bce_loss(logits: Tensor, labels) -> Tensor:
    s = np.asarray(labels, dtype=np.float64)
    # max(x, 0) - x*s + log(1 + exp(-|x|)) never exponentiates a positive number
    return ad.mean(ad.relu(logits) - logits * s + ad.log(1.0 + ad.exp(-ad.abs_(logits))))


@dataclass
class ClsPairs:
    """Index views of a classification pair batch."""

    pos: np.ndarray
    neg: np.ndarray
    same_i: np.ndarray
    same_j: np.ndarray


def split_cls_pairs(batch: PairBatch) -> ClsPairs:
    i, j = batch.pairs[:, 0], batch.pairs[:, 1]
    li, lj = batch.labels[i], batch.labels[j]
    het = li != lj
    pos = np.where(li > lj, i, j)[het]
    neg = np.where(li > lj, j, i)[het]
    return ClsPairs(pos, neg, i[~het], j[~het])


def cls_frozen_weights(batch: PairBatch, w: ClsWeights) -> dict[str, np.ndarray]:
    cp = split_cls_pairs(batch)
    y = batch.y_hat
    return {"sep": separation_weights(y[cp.pos], y[cp.neg]),
            "comp": compactness_advantages(y[cp.same_i], y[cp.same_j], w.eps, w.A_clip)
            if cp.same_i.size else np.zeros(0)}


def cls_stage1_loss(batch: PairBatch, w: ClsWeights,
                    frozen: dict[str, np.ndarray] | None = None) -> tuple[Tensor, dict[str, float]]:
    cp = split_cls_pairs(batch)
    y = batch.y_hat
    frozen = frozen or {}
    if cp.pos.size:
        l_sep = cls_separation_loss(y[cp.pos], y[cp.neg], w.m_sep, frozen.get("sep"))
    else:
        l_sep = Tensor(0.0)
    l_comp = cls_compactness_loss(y[cp.same_i], y[cp.same_j], w.eps, w.A_clip, frozen.get("comp"))
    is_pos = batch.labels > 0.5
    l_bound = cls_boundary_loss(y[np.flatnonzero(is_pos)], y[np.flatnonzero(~is_pos)], w.m_b)
    l_cal = cls_calibration_loss(y)
    total = w.theta1 * l_sep + w.theta2 * l_comp + w.theta3 * l_bound + w.theta4 * l_cal
    parts = {"L_sep": l_sep.item(), "L_comp": l_comp.item(), "L_bound": l_bound.item(),
             "L_cal": l_cal.item(), "L_bce": float("nan"), "total": total.item()}
    return total, parts


def cls_stage2_loss(batch: PairBatch) -> tuple[Tensor, dict[str, float]]:
    l_bce = bce_loss(batch.y_hat, batch.labels)
    parts = {"L_sep": float("nan"), "L_comp": float("nan"), "L_bound": float("nan"),
             "L_cal": cls_calibration_loss(ad.detach(batch.y_hat)).item(),
             "L_bce": l_bce.item(), "total": l_bce.item()}
    return l_bce, parts
