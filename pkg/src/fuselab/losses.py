"""Training objective: weighted cross-entropy, Lovasz-Softmax, weak-calibration KD and their sum.

Every loss consumes probabilities (rows of an N x N_cls matrix) and returns
``(loss, grad)`` where ``grad`` is the analytic derivative with respect to those
probability entries. Log arguments are clamped at ``epsilon``; clamped entries
carry zero gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import InvalidInputError, LabelRangeError, ShapeError
from .pointcloud import LabelArray

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-12
DEFAULT_KD_TEMPERATURE = 1.0
DEFAULT_LAMBDA1 = 1.0
DEFAULT_LAMBDA2 = 1.0
ROW_SUM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ProbDist:
    """N x N_cls matrix of per-point class probabilities."""

    p: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] < 1:
            raise ShapeError(f"probabilities must be N x N_cls, got {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise InvalidInputError("probabilities must lie in [0, 1]")
        if p.shape[0] and np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise InvalidInputError("probability rows must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, 'p', p)

    @property
    def n(self) -> int:
        return int(self.p.shape[0])

    @property
    def n_cls(self) -> int:
        return int(self.p.shape[1])


@dataclass(frozen=True, eq=False)
class LossConfig:
    class_weights: np.ndarray
    kd_temperature: float = DEFAULT_KD_TEMPERATURE
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        weights = np.array(self.class_weights, dtype=np.float64).reshape(-1)
        if weights.size < 1 or not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise InvalidInputError("class weights must be finite and positive")
        if not (math.isfinite(self.kd_temperature) and self.kd_temperature > 0):
            raise InvalidInputError(f"KD temperature must be > 0, got {self.kd_temperature}")
        for name in ('lambda1', 'lambda2'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidInputError(f"{name} must be >= 0, got {value}")
        if not (0 < self.epsilon < 1):
            raise InvalidInputError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        weights.setflags(write=False)
        object.__setattr__(self, 'class_weights', weights)

    @classmethod
    def uniform(cls, n_cls: int, **kwargs) -> 'LossConfig':
        return cls(np.ones(n_cls), **kwargs)

    def replace(self, **changes) -> 'LossConfig':
        values = dict(class_weights=self.class_weights, kd_temperature=self.kd_temperature,
                      lambda1=self.lambda1, lambda2=self.lambda2, epsilon=self.epsilon)
        values.update(changes)
        return LossConfig(**values)


def class_weights_from_labels(labels, n_cls: int) -> np.ndarray:
    """Inverse square-root class frequency, normalised to mean 1; absent classes get weight 1."""
    values = _labels(labels, n_cls, None)
    counts = np.bincount(values, minlength=n_cls).astype(np.float64)
    weights = np.ones(n_cls)
    present = counts > 0
    weights[present] = 1.0 / np.sqrt(counts[present] / counts.sum())
    return weights / weights.mean()


def _probs(p: Union[ProbDist, np.ndarray]) -> np.ndarray:
    """Raw arrays skip simplex validation so finite-difference checks stay usable."""
    if isinstance(p, ProbDist):
        return p.p
    array = np.asarray(p, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"probabilities must be N x N_cls, got {array.shape}")
    return array


def _labels(labels, n_cls: int, n: Optional[int]) -> np.ndarray:
    values = labels.labels if isinstance(labels, LabelArray) else np.asarray(labels, dtype=np.int64).reshape(-1)
    if n is not None and values.shape[0] != n:
        raise ShapeError(f"{values.shape[0]} labels for {n} probability rows")
    if values.size and (values.min() < 0 or values.max() >= n_cls):
        raise LabelRangeError(f"labels must lie in [0, {n_cls})")
    return values


def weighted_ce(p, labels, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """mean_i -w[y_i] * log(max(p[i, y_i], eps))."""
    p = _probs(p)
    n, n_cls = p.shape
    y = _labels(labels, n_cls, n)
    if cfg.class_weights.shape[0] != n_cls:
        raise ShapeError(f"{cfg.class_weights.shape[0]} class weights for {n_cls} classes")
    grad = np.zeros_like(p)
    if n == 0:
        return 0.0, grad
    rows = np.arange(n)
    target = p[rows, y]
    w = cfg.class_weights[y]
    live = target > cfg.epsilon
    losses = -w * np.log(np.where(live, target, cfg.epsilon))
    grad[rows, y] = np.where(live, -w / np.where(live, target, 1.0), 0.0) / n
    return math.fsum(losses) / n, grad


def _lovasz_deltas(fg_sorted: np.ndarray) -> np.ndarray:
    """Increments of the Jaccard error k / |gt U first-k| along the sorted order."""
    gts = fg_sorted.sum()
    prefix = np.arange(1, fg_sorted.shape[0] + 1, dtype=np.float64)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = prefix / union
    deltas = jaccard.copy()
    deltas[1:] = jaccard[1:] - jaccard[:-1]
    return deltas


def lovasz_softmax(p, labels) -> Tuple[float, np.ndarray]:
    """Lovasz-Softmax averaged over the classes present in ``labels``."""
    p = _probs(p)
    n, n_cls = p.shape
    y = _labels(labels, n_cls, n)
    grad = np.zeros_like(p)
    class_losses = []
    present = [c for c in range(n_cls) if np.any(y == c)]
    for c in present:
        fg = (y == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind='stable')
        deltas = _lovasz_deltas(fg[order])
        class_losses.append(math.fsum(errors[order] * deltas))
        sign = np.where(fg[order] > 0, -1.0, 1.0)
        grad[order, c] = deltas * sign
    if not present:
        return 0.0, grad
    grad /= len(present)
    return math.fsum(class_losses) / len(present), grad


def kd_loss(teacher, student, labels, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """Weak-calibration distillation; gradient is taken with respect to ``student`` only.

    Per point with target c:
        -t_c log s_c - lam^2 * sum_{k != c} N(t)_k log N(s^lam)_k
    where N renormalises over the non-target classes and s^lam is an elementwise
    power. Rows whose non-target mass is below epsilon (in either input) drop the
    second term.
    """
    t = _probs(teacher)
    s = _probs(student)
    if t.shape != s.shape:
        raise ShapeError(f"teacher {t.shape} and student {s.shape} shapes differ")
    n, n_cls = s.shape
    y = _labels(labels, n_cls, n)
    grad = np.zeros_like(s)
    if n == 0:
        return 0.0, grad
    eps = cfg.epsilon
    lam = cfg.kd_temperature
    rows = np.arange(n)

    t_c = t[rows, y]
    s_c = s[rows, y]
    live_c = s_c > eps
    target_terms = -t_c * np.log(np.where(live_c, s_c, eps))
    grad[rows, y] = np.where(live_c, -t_c / np.where(live_c, s_c, 1.0), 0.0)

    others = np.ones_like(s, dtype=bool)
    others[rows, y] = False
    t_rest = np.where(others, t, 0.0)
    s_rest = np.where(others, s, 0.0)
    t_sum = t_rest.sum(axis=1)
    s_sum = s_rest.sum(axis=1)
    positive = others & (s_rest > 0)
    safe_s = np.where(positive, s_rest, 1.0)
    s_pow = np.where(positive, safe_s ** lam, 0.0)
    z = s_pow.sum(axis=1)
    usable = (t_sum >= eps) & (s_sum >= eps) & (z > 0)
    if not usable.all():
        logger.debug(f"{int((~usable).sum())} rows with degenerate non-target mass skip the KD non-target term")

    q = t_rest / np.where(usable, t_sum, 1.0)[:, None]
    r = s_pow / np.where(usable, z, 1.0)[:, None]
    active = positive & (r > eps) & usable[:, None]
    log_r = np.log(np.where(active, r, eps))
    nontarget_terms = -(lam ** 2) * np.where(others & usable[:, None], q * log_r, 0.0).sum(axis=1)

    # d/ds_m of -lam^2 sum_k q_k (lam log s_k - log z) over active k.
    q_active = np.where(active, q, 0.0).sum(axis=1)
    d_pow = np.where(positive, lam * safe_s ** (lam - 1.0), 0.0)
    safe_z = np.where(usable, z, 1.0)[:, None]
    g_nontarget = -(lam ** 2) * (np.where(active, q * lam / safe_s, 0.0) - q_active[:, None] * d_pow / safe_z)
    grad += np.where(others & usable[:, None], g_nontarget, 0.0)

    grad /= n
    return math.fsum(target_terms + nontarget_terms) / n, grad


def segmentation_loss(p, labels, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """L_pc = weighted CE + Lovasz-Softmax."""
    ce, ce_grad = weighted_ce(p, labels, cfg)
    lovasz, lovasz_grad = lovasz_softmax(p, labels)
    return ce + lovasz, ce_grad + lovasz_grad


def total_loss(p, teacher, labels, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """lambda1 * (wce + lovasz) + lambda2 * kd; the KD term is skipped when lambda2 is 0."""
    seg, seg_grad = segmentation_loss(p, labels, cfg)
    loss = cfg.lambda1 * seg
    grad = cfg.lambda1 * seg_grad
    if cfg.lambda2 > 0:
        if teacher is None:
            raise InvalidInputError("lambda2 > 0 requires teacher probabilities")
        kd, kd_grad = kd_loss(teacher, p, labels, cfg)
        loss += cfg.lambda2 * kd
        grad = grad + cfg.lambda2 * kd_grad
    return loss, grad
