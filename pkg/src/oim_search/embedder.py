"""Linear projection to the L2-normalized embedding, hand-written backprop,
SGD with momentum, and the parametric Softmax classifier baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .oim import NORM_EPS, DimensionError, ZeroNormError


@dataclass
class EmbedderParams:
    weight: np.ndarray  # (out_dim, in_dim)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "EmbedderParams":
        a = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(weight=rng.uniform(-a, a, size=(out_dim, in_dim)))


@dataclass
class SoftmaxClassifierParams:
    weight: np.ndarray  # (L, out_dim)
    bias: np.ndarray  # (L,)

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "SoftmaxClassifierParams":
        a = np.sqrt(6.0 / (num_classes + dim))
        return cls(weight=rng.uniform(-a, a, size=(num_classes, dim)), bias=np.zeros(num_classes))


@dataclass
class EmbedCache:
    raw: np.ndarray
    y: np.ndarray
    norm: float
    z: np.ndarray
    weight: np.ndarray


def embed_forward(raw: np.ndarray, params: EmbedderParams) -> tuple[np.ndarray, EmbedCache]:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (params.in_dim,):
        raise DimensionError(f"raw feature shape {raw.shape}, expected ({params.in_dim},)")
    y = params.weight @ raw
    norm = float(np.linalg.norm(y))
    if norm < NORM_EPS:
        raise ZeroNormError("projected feature has zero norm")
    z = y / norm
    return z, EmbedCache(raw=raw, y=y, norm=norm, z=z, weight=params.weight)


def embed_many(raws: np.ndarray, params: EmbedderParams) -> np.ndarray:
    """Row-wise embedding of an (N, in_dim) array; no cache kept."""
    y = np.asarray(raws, dtype=np.float64) @ params.weight.T
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise ZeroNormError("projected feature has zero norm")
    return y / norms


def embed_backward(cache: EmbedCache, dz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through z = Wx/|Wx|. Returns (dW, draw)."""
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != cache.z.shape:
        raise DimensionError(f"upstream gradient shape {dz.shape}, expected {cache.z.shape}")
    # the normalization Jacobian projects out the radial component
    dy = (dz - (cache.z @ dz) * cache.z) / cache.norm
    return np.outer(dy, cache.raw), cache.weight.T @ dy


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> None:
    """v <- momentum * v + g;  p <- p - lr * v.  Updates arrays in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise DimensionError(f"velocity shape mismatch for {name!r}")
        v = state.momentum * v + g
        state.velocity[name] = v
        p -= state.learning_rate * v


def softmax_cls_logits(z: np.ndarray, params: SoftmaxClassifierParams) -> np.ndarray:
    return params.weight @ z + params.bias


def softmax_cls_loss(
    z: np.ndarray, target: int, params: SoftmaxClassifierParams
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Cross-entropy over `W z + b`.

    Returns (loss, dL/dz, {"weight": dL/dW, "bias": dL/db}).
    """
    num_classes = params.weight.shape[0]
    if not 0 <= target < num_classes:
        raise IndexError(f"target {target} out of range for {num_classes} classes")
    logits = softmax_cls_logits(z, params)
    shift = logits.max()
    e = np.exp(logits - shift)
    log_z = shift + np.log(e.sum())
    prob = e / e.sum()
    loss = float(log_z - logits[target])
    dlogits = prob
    dlogits[target] -= 1.0
    return loss, params.weight.T @ dlogits, {"weight": np.outer(dlogits, z), "bias": dlogits}
