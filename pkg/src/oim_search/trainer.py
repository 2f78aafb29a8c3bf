"""Training loop for the embedder under the OIM loss or a Softmax baseline."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .embedder import (
    EmbedderParams,
    OptimizerState,
    SoftmaxClassifierParams,
    embed_backward,
    embed_forward,
    embed_many,
    sgd_step,
    softmax_cls_logits,
    softmax_cls_loss,
)
from .oim import (
    CircularQueue,
    LookupTable,
    OimConfig,
    lut_update,
    oim_grad_x,
    oim_loss,
    queue_push,
    sampled_forward,
)
from .synth import LABELED, UNLABELED, SynthWorld

LOSS_KINDS = ("oim", "softmax", "softmax_pretrained")
CHECKPOINT_VERSION = 1
METRICS_HEADER = ["iteration", "lr", "loss", "train_accuracy"]


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    scenes_per_batch: int = 2
    total_iters: int = 2000
    lr_base: float = 0.01
    lr_drop_iter: int = 1600
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    loss_kind: str = "oim"
    out_dim: int = 32
    tau: float = 0.1
    gamma: float = 0.5
    queue_capacity: int = 128
    subsample_labeled: Optional[int] = None
    subsample_unlabeled: Optional[int] = None
    pretrain_iters: int = 200
    pretrain_lr: float = 0.5
    accuracy_window: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.lr_drop_iter > self.total_iters:
            raise ValueError("lr_drop_iter must not exceed total_iters")
        if self.scenes_per_batch < 1:
            raise ValueError("scenes_per_batch must be positive")

    def oim_config(self, num_labeled: int) -> OimConfig:
        return OimConfig(
            feature_dim=self.out_dim,
            num_labeled=num_labeled,
            tau=self.tau,
            gamma=self.gamma,
            queue_capacity=self.queue_capacity,
            subsample_labeled=self.subsample_labeled,
            subsample_unlabeled=self.subsample_unlabeled,
        )


@dataclass
class Sample:
    raw: np.ndarray
    kind: str
    label: int  # class id for labeled samples, pool id for unlabeled, -1 for background


@dataclass
class StepMetrics:
    iteration: int
    lr: float
    loss: float = math.nan
    accuracy: float = math.nan
    skipped: bool = False


@dataclass
class TrainState:
    config: TrainConfig
    num_labeled: int
    raw_dim: int
    embedder: EmbedderParams
    optimizer: OptimizerState
    rng: np.random.Generator
    classifier: Optional[SoftmaxClassifierParams] = None
    lut: Optional[LookupTable] = None
    queue: Optional[CircularQueue] = None
    iteration: int = 0
    history: list[StepMetrics] = field(default_factory=list)
    pretrain_losses: list[float] = field(default_factory=list)

    @property
    def oim(self) -> OimConfig:
        return self.config.oim_config(self.num_labeled)


def init_state(cfg: TrainConfig, num_labeled: int, raw_dim: int) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    embedder = EmbedderParams.init(raw_dim, cfg.out_dim, rng)
    state = TrainState(
        config=cfg,
        num_labeled=num_labeled,
        raw_dim=raw_dim,
        embedder=embedder,
        optimizer=OptimizerState(learning_rate=cfg.lr_base, momentum=cfg.momentum),
        rng=rng,
    )
    if cfg.loss_kind == "oim":
        state.lut = LookupTable(num_labeled, cfg.out_dim)
        state.queue = CircularQueue(cfg.queue_capacity, cfg.out_dim)
    else:
        state.classifier = SoftmaxClassifierParams.init(num_labeled, cfg.out_dim, rng)
    return state


def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.lr_base if iteration < cfg.lr_drop_iter else cfg.lr_base * cfg.lr_drop_factor


def build_minibatch(world: SynthWorld, rng: np.random.Generator, scenes_per_batch: int) -> list[Sample]:
    """Every person in `scenes_per_batch` distinct training scenes drawn uniformly."""
    scenes = world.train_scenes
    if not scenes:
        raise ValueError("world has no training scenes")
    picked = rng.choice(len(scenes), size=min(scenes_per_batch, len(scenes)), replace=False)
    return [Sample(p.raw_feature, p.kind, p.identity) for i in picked for p in scenes[i].persons]


def _params(state: TrainState) -> dict[str, np.ndarray]:
    params = {"embedder.weight": state.embedder.weight}
    if state.classifier is not None:
        params["classifier.weight"] = state.classifier.weight
        params["classifier.bias"] = state.classifier.bias
    return params


def train_step(state: TrainState, batch: list[Sample]) -> StepMetrics:
    """One iteration. Background samples are ignored; unlabeled samples only
    feed the queue. All gradients use the buffers as they were at the start
    of the step; buffer updates follow in sample order."""
    cfg = state.config
    lr = lr_schedule(cfg, state.iteration)
    metrics = StepMetrics(iteration=state.iteration, lr=lr)
    labeled = [s for s in batch if s.kind == LABELED]
    if not labeled:
        metrics.skipped = True
        state.iteration += 1
        state.history.append(metrics)
        return metrics

    n = len(labeled)
    grads = {name: np.zeros_like(p) for name, p in _params(state).items()}
    total_loss = 0.0
    correct = 0
    feats = []
    if cfg.loss_kind == "oim":
        ocfg = state.oim
        for s in labeled:
            z, cache = embed_forward(s.raw, state.embedder)
            scores = sampled_forward(z, s.label, state.lut, state.queue, ocfg, state.rng)
            total_loss += oim_loss(scores, s.label)
            correct += int(np.argmax(scores.p) == s.label)
            dz = oim_grad_x(scores, s.label, state.lut, state.queue, ocfg)
            grads["embedder.weight"] += embed_backward(cache, dz)[0] / n
            feats.append(z)
        unlabeled = [s.raw for s in batch if s.kind == UNLABELED]
        queue_feats = list(embed_many(np.asarray(unlabeled), state.embedder)) if unlabeled else []
    else:
        for s in labeled:
            z, cache = embed_forward(s.raw, state.embedder)
            loss, dz, dcls = softmax_cls_loss(z, s.label, state.classifier)
            total_loss += loss
            correct += int(np.argmax(softmax_cls_logits(z, state.classifier)) == s.label)
            grads["embedder.weight"] += embed_backward(cache, dz)[0] / n
            grads["classifier.weight"] += dcls["weight"] / n
            grads["classifier.bias"] += dcls["bias"] / n

    state.optimizer.learning_rate = lr
    sgd_step(_params(state), grads, state.optimizer)

    if cfg.loss_kind == "oim":
        for s, z in zip(labeled, feats):
            lut_update(state.lut, s.label, z, cfg.gamma)
        queue_push(state.queue, queue_feats)

    metrics.loss = total_loss / n
    metrics.accuracy = correct / n
    state.iteration += 1
    state.history.append(metrics)
    return metrics


def pretrain_classifier(state: TrainState, world: SynthWorld, iters: int) -> TrainState:
    """Fit the Softmax classifier on frozen embeddings of all labeled training
    instances with full-batch gradient descent. The embedder is untouched;
    per-iteration losses land in `state.pretrain_losses`."""
    if state.config.loss_kind != "softmax_pretrained":
        raise ValueError("pretraining applies only to loss_kind='softmax_pretrained'")
    losses: list[float] = []
    if iters > 0:
        samples = [p for s in world.train_scenes for p in s.persons if p.kind == LABELED]
        z = embed_many(np.asarray([p.raw_feature for p in samples]), state.embedder)
        targets = np.asarray([p.identity for p in samples])
        cls = state.classifier
        for _ in range(iters):
            logits = z @ cls.weight.T + cls.bias
            logits -= logits.max(axis=1, keepdims=True)
            log_prob = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            losses.append(float(-log_prob[np.arange(len(targets)), targets].mean()))
            dlogits = np.exp(log_prob)
            dlogits[np.arange(len(targets)), targets] -= 1.0
            dlogits /= len(targets)
            cls.weight -= state.config.pretrain_lr * (dlogits.T @ z)
            cls.bias -= state.config.pretrain_lr * dlogits.sum(axis=0)
    state.pretrain_losses.extend(losses)
    return state


def trailing_accuracy(history: list[StepMetrics], upto: int, window: int) -> float:
    """Mean train accuracy over non-skipped steps in [upto - window, upto)."""
    vals = [m.accuracy for m in history if upto - window <= m.iteration < upto and not m.skipped]
    return float(np.mean(vals)) if vals else math.nan


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def metrics_rows(history: list[StepMetrics]) -> list[list[str]]:
    return [[str(m.iteration), _fmt(m.lr), _fmt(m.loss), _fmt(m.accuracy)] for m in history]


def write_metrics_csv(history: list[StepMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows(history))


def train(
    state: TrainState,
    world: SynthWorld,
    until: Optional[int] = None,
    callback: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run steps until `until` (default: total_iters). `callback` fires after each step."""
    until = state.config.total_iters if until is None else until
    while state.iteration < until:
        batch = build_minibatch(world, state.rng, state.config.scenes_per_batch)
        train_step(state, batch)
        if callback is not None:
            callback(state)
    return state


def train_model(cfg: TrainConfig, world: SynthWorld, callback=None) -> TrainState:
    state = init_state(cfg, len(world.train_identities), world.raw_dim)
    if cfg.loss_kind == "softmax_pretrained":
        pretrain_classifier(state, world, cfg.pretrain_iters)
    return train(state, world, callback=callback)


# checkpoints: a single .npz whose "header" entry is a JSON document


def checkpoint_save(state: TrainState, path: str | Path, extra: Optional[dict] = None) -> None:
    header = {
        "format": "oim-search-checkpoint",
        "version": CHECKPOINT_VERSION,
        "loss_kind": state.config.loss_kind,
        "raw_dim": state.raw_dim,
        "out_dim": state.embedder.out_dim,
        "num_labeled": state.num_labeled,
        "iteration": state.iteration,
        "config": asdict(state.config),
        "rng_state": state.rng.bit_generator.state,
        "optimizer": {"learning_rate": state.optimizer.learning_rate, "momentum": state.optimizer.momentum},
        "history": [[m.iteration, m.lr, m.loss, m.accuracy, m.skipped] for m in state.history],
        "extra": extra or {},
    }
    arrays = {"embedder.weight": state.embedder.weight}
    for name, v in state.optimizer.velocity.items():
        arrays[f"velocity/{name}"] = v
    if state.classifier is not None:
        arrays["classifier.weight"] = state.classifier.weight
        arrays["classifier.bias"] = state.classifier.bias
    if state.lut is not None:
        buf, head, size = state.queue.state()
        arrays["lut"] = state.lut.vectors
        arrays["queue"] = buf
        header["queue_head"] = head
        header["queue_size"] = size
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def read_checkpoint_header(path: str | Path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if header.get("format") != "oim-search-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version {header.get('version')!r}")
    return header


def checkpoint_load(path: str | Path, expect: Optional[TrainConfig] = None, raw_dim: Optional[int] = None) -> TrainState:
    """Restore a state saved by `checkpoint_save`.

    With `expect` / `raw_dim`, shapes and loss kind are checked against them.
    """
    header = read_checkpoint_header(path)
    cfg_dict = dict(header["config"])
    cfg = TrainConfig(**cfg_dict)
    if expect is not None:
        if expect.out_dim != header["out_dim"] or expect.loss_kind != header["loss_kind"]:
            raise CheckpointError(
                f"{path}: checkpoint has out_dim={header['out_dim']} loss={header['loss_kind']}, "
                f"expected out_dim={expect.out_dim} loss={expect.loss_kind}"
            )
    if raw_dim is not None and raw_dim != header["raw_dim"]:
        raise CheckpointError(f"{path}: checkpoint raw_dim {header['raw_dim']} != {raw_dim}")

    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k].copy() for k in data.files if k != "header"}
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    opt = OptimizerState(
        learning_rate=header["optimizer"]["learning_rate"],
        momentum=header["optimizer"]["momentum"],
        velocity={k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")},
    )
    state = TrainState(
        config=cfg,
        num_labeled=header["num_labeled"],
        raw_dim=header["raw_dim"],
        embedder=EmbedderParams(arrays["embedder.weight"]),
        optimizer=opt,
        rng=rng,
        iteration=header["iteration"],
        history=[StepMetrics(i, lr, loss, acc, skipped) for i, lr, loss, acc, skipped in header["history"]],
    )
    if state.embedder.weight.shape != (header["out_dim"], header["raw_dim"]):
        raise CheckpointError(f"{path}: embedder weight shape does not match header")
    if "classifier.weight" in arrays:
        state.classifier = SoftmaxClassifierParams(arrays["classifier.weight"], arrays["classifier.bias"])
    if "lut" in arrays:
        lut = LookupTable(header["num_labeled"], header["out_dim"])
        if arrays["lut"].shape != lut.vectors.shape:
            raise CheckpointError(f"{path}: LUT shape does not match header")
        lut.vectors = arrays["lut"]
        state.lut = lut
        state.queue = CircularQueue.from_state(arrays["queue"], header["queue_head"], header["queue_size"])
    return state
