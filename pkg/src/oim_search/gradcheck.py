"""Finite-difference verification of every hand-derived gradient."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .embedder import (
    EmbedderParams,
    SoftmaxClassifierParams,
    embed_backward,
    embed_forward,
    softmax_cls_loss,
)
from .oim import CircularQueue, LookupTable, OimConfig, oim_forward, oim_grad_x, oim_loss, queue_push

FD_STEP = 1e-6
# gradient norms below this are compared in absolute terms
REL_FLOOR = 1e-3


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), REL_FLOOR))


def _unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class OimCase:
    x: np.ndarray
    target: int
    lut: LookupTable
    queue: CircularQueue
    cfg: OimConfig

    def describe(self) -> dict:
        return {"L": self.cfg.num_labeled, "Q": len(self.queue), "D": self.cfg.feature_dim,
                "tau": self.cfg.tau, "target": self.target}


def random_oim_case(rng: np.random.Generator, dim: int | None = None) -> OimCase:
    """Random buffers with L in 1..16, Q in 0..32, D in 2..32, tau in {0.05, 0.1, 1}.

    About a fifth of LUT rows stay at zero, as they would before their first
    update.
    """
    L = int(rng.integers(1, 17))
    Q = int(rng.integers(0, 33))
    D = int(rng.integers(2, 33)) if dim is None else dim
    tau = float(rng.choice([0.05, 0.1, 1.0]))
    cfg = OimConfig(feature_dim=D, num_labeled=L, tau=tau, queue_capacity=Q)
    lut = LookupTable(L, D)
    rows = _unit(rng, L, D)
    keep = rng.random(L) >= 0.2
    lut.vectors[keep] = rows[keep]
    cq = CircularQueue(Q, D)
    if Q:
        queue_push(cq, list(_unit(rng, int(rng.integers(0, Q + 1)), D)))
    return OimCase(_unit(rng, 1, D)[0], int(rng.integers(L)), lut, cq, cfg)


@dataclass
class CheckResult:
    name: str
    cases: int
    tolerance: float
    max_rel_error: float = 0.0
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def record(self, err: float, info: dict) -> None:
        if err > self.max_rel_error or not self.worst:
            self.max_rel_error = max(err, self.max_rel_error)
            self.worst = info

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def check_oim_grad(n: int = 100, seed: int = 0, tolerance: float = 1e-6, corrupt: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    res = CheckResult("oim_grad_x", n, tolerance)
    for _ in range(n):
        c = random_oim_case(rng)
        analytic = oim_grad_x(oim_forward(c.x, c.lut, c.queue, c.cfg), c.target, c.lut, c.queue, c.cfg)
        if corrupt:
            analytic = analytic * (1 + 1e-3) + 1e-3
        numeric = central_diff(lambda x: oim_loss(oim_forward(x, c.lut, c.queue, c.cfg), c.target), c.x)
        res.record(rel_error(analytic, numeric), c.describe())
    return res


def composite_loss_and_grad(raw, params: EmbedderParams, case: OimCase):
    z, cache = embed_forward(raw, params)
    scores = oim_forward(z, case.lut, case.queue, case.cfg)
    dz = oim_grad_x(scores, case.target, case.lut, case.queue, case.cfg)
    return oim_loss(scores, case.target), embed_backward(cache, dz)[0]


def check_composite(n: int = 20, seed: int = 1, tolerance: float = 1e-5, corrupt: bool = False) -> CheckResult:
    """raw -> projection -> normalize -> OIM loss, gradient w.r.t. the weights."""
    rng = np.random.default_rng(seed)
    res = CheckResult("composite_dW", n, tolerance)
    for _ in range(n):
        out_dim = int(rng.integers(2, 17))
        in_dim = int(rng.integers(2, 25))
        case = random_oim_case(rng, dim=out_dim)
        params = EmbedderParams.init(in_dim, out_dim, rng)
        raw = rng.standard_normal(in_dim)
        _, analytic = composite_loss_and_grad(raw, params, case)
        if corrupt:
            analytic = analytic * (1 + 1e-3) + 1e-3

        def f(w):
            z, _ = embed_forward(raw, EmbedderParams(w))
            return oim_loss(oim_forward(z, case.lut, case.queue, case.cfg), case.target)

        numeric = central_diff(f, params.weight)
        res.record(rel_error(analytic, numeric), {**case.describe(), "in_dim": in_dim})
    return res


def check_embed_backward(n: int = 20, seed: int = 2, tolerance: float = 1e-6) -> CheckResult:
    """Linear probe loss c.z so the upstream gradient is the constant c."""
    rng = np.random.default_rng(seed)
    res = CheckResult("embed_backward", n, tolerance)
    for _ in range(n):
        in_dim, out_dim = (int(v) for v in rng.integers(2, 17, size=2))
        params = EmbedderParams.init(in_dim, out_dim, rng)
        raw = rng.standard_normal(in_dim)
        probe = rng.standard_normal(out_dim)
        _, cache = embed_forward(raw, params)
        dW, draw = embed_backward(cache, probe)
        num_w = central_diff(lambda w: float(probe @ embed_forward(raw, EmbedderParams(w))[0]), params.weight)
        num_r = central_diff(lambda r: float(probe @ embed_forward(r, params)[0]), raw)
        res.record(max(rel_error(dW, num_w), rel_error(draw, num_r)), {"in_dim": in_dim, "out_dim": out_dim})
    return res


def check_softmax(n: int = 20, seed: int = 3, tolerance: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    res = CheckResult("softmax_cls_loss", n, tolerance)
    for _ in range(n):
        L = int(rng.integers(2, 17))
        D = int(rng.integers(2, 17))
        params = SoftmaxClassifierParams(rng.standard_normal((L, D)), rng.standard_normal(L))
        z = _unit(rng, 1, D)[0]
        t = int(rng.integers(L))
        _, dz, dp = softmax_cls_loss(z, t, params)
        num_z = central_diff(lambda v: softmax_cls_loss(v, t, params)[0], z)
        num_w = central_diff(lambda w: softmax_cls_loss(z, t, SoftmaxClassifierParams(w, params.bias))[0], params.weight)
        num_b = central_diff(lambda b: softmax_cls_loss(z, t, SoftmaxClassifierParams(params.weight, b))[0], params.bias)
        err = max(rel_error(dz, num_z), rel_error(dp["weight"], num_w), rel_error(dp["bias"], num_b))
        res.record(err, {"L": L, "D": D})
    return res


def run_gradcheck(seed: int = 0, corrupt: bool = False) -> dict:
    """Run all suites. `corrupt` perturbs the OIM gradients as a negative control."""
    checks = [
        check_oim_grad(seed=seed, corrupt=corrupt),
        check_composite(seed=seed + 1, corrupt=corrupt),
        check_embed_backward(seed=seed + 2),
        check_softmax(seed=seed + 3),
    ]
    return {
        "passed": all(c.passed for c in checks),
        "fd_step": FD_STEP,
        "rel_floor": REL_FLOOR,
        "checks": [c.as_dict() for c in checks],
    }
