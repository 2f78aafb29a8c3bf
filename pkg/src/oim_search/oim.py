"""Online Instance Matching loss with a lookup table and a circular queue.

Features are compared against two external buffers: a lookup table holding
one running feature per labeled identity, and a FIFO queue of recent
unlabeled-identity features that act as extra negatives. Neither buffer is
a learned parameter; gradients flow only into the query feature.

Class ids are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NORM_EPS = 1e-12
UNIT_TOL = 1e-9


class DimensionError(ValueError):
    pass


class ZeroNormError(ArithmeticError):
    """Raised instead of dividing by a (near) zero norm."""


class DegenerateProbabilityError(ArithmeticError):
    """Raised when the target probability underflows to exactly zero."""


def normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm < NORM_EPS:
        raise ZeroNormError(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def _check_unit(v: np.ndarray, what: str) -> None:
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > UNIT_TOL:
        raise ValueError(f"{what} must have unit L2 norm, got {norm!r}")


@dataclass
class OimConfig:
    feature_dim: int
    num_labeled: int
    tau: float = 0.1
    gamma: float = 0.5
    queue_capacity: int = 5000
    subsample_labeled: Optional[int] = None
    subsample_unlabeled: Optional[int] = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.queue_capacity < 0:
            raise ValueError("queue_capacity must be non-negative")
        if self.feature_dim < 1 or self.num_labeled < 1:
            raise ValueError("feature_dim and num_labeled must be positive")
        if self.subsample_labeled is not None and not 1 <= self.subsample_labeled <= self.num_labeled:
            raise ValueError("subsample_labeled must lie in [1, num_labeled]")
        if self.subsample_unlabeled is not None and not 0 <= self.subsample_unlabeled <= self.queue_capacity:
            raise ValueError("subsample_unlabeled must lie in [0, queue_capacity]")


class LookupTable:
    """L running identity features, stored row-wise as an (L, D) array.

    Rows start at zero and become unit vectors on their first update.
    """

    def __init__(self, num_labeled: int, feature_dim: int):
        self.vectors = np.zeros((num_labeled, feature_dim))

    @property
    def num_labeled(self) -> int:
        return self.vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "LookupTable":
        other = LookupTable.__new__(LookupTable)
        other.vectors = self.vectors.copy()
        return other

    def initialized(self) -> np.ndarray:
        return np.any(self.vectors != 0.0, axis=1)


class CircularQueue:
    """Fixed-capacity ring buffer of unit feature vectors.

    `vectors` returns the live entries ordered oldest to newest.
    """

    def __init__(self, capacity: int, feature_dim: int):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self._buf = np.zeros((capacity, feature_dim))
        self._head = 0  # slot of the oldest entry once full
        self._size = 0

    @property
    def capacity(self) -> int:
        return self._buf.shape[0]

    @property
    def feature_dim(self) -> int:
        return self._buf.shape[1]

    def __len__(self) -> int:
        return self._size

    @property
    def vectors(self) -> np.ndarray:
        if self._size < self.capacity:
            return self._buf[: self._size].copy()
        return np.roll(self._buf, -self._head, axis=0)

    def copy(self) -> "CircularQueue":
        other = CircularQueue.__new__(CircularQueue)
        other._buf = self._buf.copy()
        other._head = self._head
        other._size = self._size
        return other

    def state(self) -> tuple[np.ndarray, int, int]:
        return self._buf.copy(), self._head, self._size

    @classmethod
    def from_state(cls, buf: np.ndarray, head: int, size: int) -> "CircularQueue":
        cq = cls.__new__(cls)
        cq._buf = np.array(buf, dtype=np.float64)
        cq._head = int(head)
        cq._size = int(size)
        return cq


@dataclass
class MatchScores:
    """Joint softmax over LUT and queue logits.

    Entries excluded by sub-sampling carry probability exactly 0 and a
    logit of -inf.
    """

    p: np.ndarray
    q: np.ndarray
    logits_labeled: np.ndarray
    logits_unlabeled: np.ndarray


def oim_forward(
    x: np.ndarray,
    lut: LookupTable,
    cq: CircularQueue,
    cfg: OimConfig,
    labeled_subset: Optional[np.ndarray] = None,
    unlabeled_subset: Optional[np.ndarray] = None,
) -> MatchScores:
    """Matching probabilities of `x` against every LUT row and queue entry.

    `labeled_subset` / `unlabeled_subset` restrict the softmax denominator to
    the given indices; everything else gets zero probability.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (lut.feature_dim,) or cq.feature_dim != lut.feature_dim:
        raise DimensionError(
            f"feature of shape {x.shape} vs LUT dim {lut.feature_dim}, queue dim {cq.feature_dim}"
        )
    V = lut.vectors
    U = cq.vectors
    logits_l = V @ x / cfg.tau
    logits_u = U @ x / cfg.tau

    mask_l = np.ones(len(logits_l), dtype=bool)
    mask_u = np.ones(len(logits_u), dtype=bool)
    if labeled_subset is not None:
        mask_l[:] = False
        mask_l[np.asarray(labeled_subset, dtype=int)] = True
    if unlabeled_subset is not None:
        mask_u[:] = False
        mask_u[np.asarray(unlabeled_subset, dtype=int)] = True
    if not mask_l.any() and not mask_u.any():
        raise ValueError("sub-sampling selected no logits at all")

    logits_l = np.where(mask_l, logits_l, -np.inf)
    logits_u = np.where(mask_u, logits_u, -np.inf)
    shift = max(logits_l.max(initial=-np.inf), logits_u.max(initial=-np.inf))
    e_l = np.exp(logits_l - shift)
    e_u = np.exp(logits_u - shift)
    z = e_l.sum() + e_u.sum()
    return MatchScores(p=e_l / z, q=e_u / z, logits_labeled=logits_l, logits_unlabeled=logits_u)


def oim_loss(scores: MatchScores, target: int) -> float:
    """Negative log-likelihood of the target class, -log p_t."""
    if not 0 <= target < len(scores.p):
        raise IndexError(f"target {target} out of range for {len(scores.p)} labeled classes")
    p_t = scores.p[target]
    if p_t <= 0.0:
        raise DegenerateProbabilityError(f"p[{target}] is zero; loss is undefined")
    # log-softmax form keeps precision when p_t is close to 1
    ll = scores.logits_labeled
    lu = scores.logits_unlabeled
    shift = max(ll.max(initial=-np.inf), lu.max(initial=-np.inf))
    log_z = shift + np.log(np.exp(ll - shift).sum() + np.exp(lu - shift).sum())
    return float(max(log_z - ll[target], 0.0))


def oim_grad_x(
    scores: MatchScores,
    target: int,
    lut: LookupTable,
    cq: CircularQueue,
    cfg: OimConfig,
) -> np.ndarray:
    """Gradient of `oim_loss` with respect to the query feature.

    (1/tau) * [ -(1 - p_t) v_t + sum_{j != t} p_j v_j + sum_k q_k u_k ]

    Buffers are constants here, so nothing is returned for them.
    """
    V = lut.vectors
    U = cq.vectors
    if scores.p.shape != (V.shape[0],) or scores.q.shape != (U.shape[0],):
        raise DimensionError("scores do not match the buffer shapes")
    if not 0 <= target < V.shape[0]:
        raise IndexError(f"target {target} out of range")
    coeff = scores.p.copy()
    coeff[target] -= 1.0
    return (coeff @ V + scores.q @ U) / cfg.tau


def lut_update(lut: LookupTable, target: int, x: np.ndarray, gamma: float) -> LookupTable:
    """Blend `x` into row `target` with momentum `gamma`, then renormalize.

    Updates in place and returns the table. If the blend cancels out the row
    is left untouched and ZeroNormError is raised.
    """
    if not 0 <= target < lut.num_labeled:
        raise IndexError(f"target {target} out of range")
    x = np.asarray(x, dtype=np.float64)
    _check_unit(x, "LUT update feature")
    if gamma == 1.0:
        return lut
    blended = gamma * lut.vectors[target] + (1.0 - gamma) * x
    lut.vectors[target] = normalize(blended)
    return lut


def queue_push(cq: CircularQueue, features: Sequence[np.ndarray]) -> CircularQueue:
    """Append `features` in order, evicting the oldest entries past capacity."""
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    for f in feats:
        if f.shape != (cq.feature_dim,):
            raise DimensionError(f"queue expects dim {cq.feature_dim}, got {f.shape}")
        _check_unit(f, "queue feature")
    if cq.capacity == 0:
        return cq
    for f in feats:
        if cq._size < cq.capacity:
            cq._buf[cq._size] = f
            cq._size += 1
        else:
            cq._buf[cq._head] = f
            cq._head = (cq._head + 1) % cq.capacity
    return cq


def subsample_indices(
    rng: np.random.Generator,
    total: int,
    keep: int,
    must_include: Optional[int] = None,
) -> np.ndarray:
    """Sorted uniform sample of `keep` distinct indices out of `total`."""
    if keep > total:
        raise ValueError(f"cannot keep {keep} of {total} indices")
    if keep < 0:
        raise ValueError("keep must be non-negative")
    if must_include is None:
        return np.sort(rng.choice(total, size=keep, replace=False))
    if not 0 <= must_include < total:
        raise IndexError(f"must_include {must_include} out of range")
    if keep == 0:
        raise ValueError("keep must be at least 1 when an index is forced")
    rest = np.delete(np.arange(total), must_include)
    picked = rng.choice(rest, size=keep - 1, replace=False)
    return np.sort(np.append(picked, must_include))


def sampled_forward(
    x: np.ndarray,
    target: int,
    lut: LookupTable,
    cq: CircularQueue,
    cfg: OimConfig,
    rng: np.random.Generator,
) -> MatchScores:
    """Forward pass with the denominator sub-sampled per `cfg`.

    The target row is always kept so that its probability is defined.
    """
    lab = None
    unl = None
    if cfg.subsample_labeled is not None and cfg.subsample_labeled < lut.num_labeled:
        lab = subsample_indices(rng, lut.num_labeled, cfg.subsample_labeled, must_include=target)
    if cfg.subsample_unlabeled is not None and cfg.subsample_unlabeled < len(cq):
        unl = subsample_indices(rng, len(cq), cfg.subsample_unlabeled)
    return oim_forward(x, lut, cq, cfg, labeled_subset=lab, unlabeled_subset=unl)
