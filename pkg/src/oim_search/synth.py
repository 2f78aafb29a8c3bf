"""Synthetic person-search world and a parametric detector simulator.

Identity is carried entirely by raw feature vectors on the unit sphere:
each identity has a prototype and every instance is the prototype plus
isotropic Gaussian noise, renormalized. Boxes carry only geometry.

Labeled identity ids are global: train identities are 0..L-1 (and double as
OIM class ids), test identities follow at L..L+T-1. Unlabeled identities use
their own pool ids. Background entries have identity -1.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry import BoundingBox, iou

log = logging.getLogger(__name__)

LABELED = "labeled"
UNLABELED = "unlabeled"
BACKGROUND = "background"

RECORD_VERSION = 1


@dataclass
class SynthConfig:
    num_labeled: int = 32
    num_unlabeled_pool: int = 32
    num_test_identities: int = 50
    raw_dim: int = 64
    scenes_train: int = 128
    scenes_test: int = 160
    persons_per_scene: float = 3.0
    background_per_scene: float = 1.5
    max_instances: int = 6
    noise_sigma: float = 0.1
    scene_extent: float = 100.0
    box_scale_range: tuple[float, float] = (10.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        self.box_scale_range = tuple(float(v) for v in self.box_scale_range)
        counts = (self.num_labeled, self.num_test_identities, self.raw_dim,
                  self.scenes_train, self.scenes_test)
        if min(counts) < 1 or self.num_unlabeled_pool < 0:
            raise ValueError("identity, scene and dimension counts must be positive")
        if self.noise_sigma < 0 or self.persons_per_scene < 0 or self.background_per_scene < 0:
            raise ValueError("noise_sigma and per-scene rates must be non-negative")
        lo, hi = self.box_scale_range
        if not 0 < lo <= hi < self.scene_extent:
            raise ValueError("box_scale_range must satisfy 0 < min <= max < scene_extent")
        if self.max_instances < 2:
            raise ValueError("max_instances must be at least 2")


@dataclass
class Person:
    box: BoundingBox
    kind: str
    identity: int
    raw_feature: np.ndarray


@dataclass
class SynthScene:
    scene_id: int
    split: str
    extent: float
    persons: list[Person]


@dataclass
class SynthWorld:
    config: SynthConfig
    labeled_prototypes: np.ndarray  # (L + T, raw_dim)
    unlabeled_prototypes: np.ndarray  # (P, raw_dim)
    scenes: list[SynthScene]
    train_identities: list[int]
    test_identities: list[int]
    separation_accuracy: float = 1.0

    @property
    def raw_dim(self) -> int:
        return self.labeled_prototypes.shape[1]

    @property
    def train_scenes(self) -> list[SynthScene]:
        return [s for s in self.scenes if s.split == "train"]

    @property
    def test_scenes(self) -> list[SynthScene]:
        return [s for s in self.scenes if s.split == "test"]

    def scene(self, scene_id: int) -> SynthScene:
        return self.scenes[scene_id]


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _instance_feature(rng, prototype, sigma):
    if sigma == 0:
        return prototype.copy()
    v = prototype + sigma * rng.standard_normal(prototype.shape)
    return v / np.linalg.norm(v)


def _assign_appearances(rng, n_ids, n_scenes, mean_per_scene, cap):
    """Instance count per identity: two each, then spread the remaining
    budget (mean_per_scene * n_scenes slots) uniformly, capped."""
    if n_ids == 0:
        return np.zeros(0, dtype=int)
    if n_scenes < 2:
        raise ValueError("need at least two scenes per split so every identity can appear twice")
    cap = min(cap, n_scenes)
    counts = np.full(n_ids, 2, dtype=int)
    remaining = int(round(mean_per_scene * n_scenes)) - counts.sum()
    while remaining > 0:
        eligible = np.flatnonzero(counts < cap)
        if len(eligible) == 0:
            break
        counts[rng.choice(eligible)] += 1
        remaining -= 1
    return counts


def _random_box(rng, extent, scale_range):
    lo, hi = scale_range
    w, h = rng.uniform(lo, hi, size=2)
    x1 = rng.uniform(0.0, extent - w)
    y1 = rng.uniform(0.0, extent - h)
    return BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


def _place_box(rng, extent, scale_range, taken, max_overlap=0.1, tries=100):
    box = _random_box(rng, extent, scale_range)
    for _ in range(tries):
        if all(iou(box, t) <= max_overlap for t in taken):
            break
        box = _random_box(rng, extent, scale_range)
    return box


def _populate_split(rng, cfg, split, first_scene_id, n_scenes, members):
    """`members` is a list of (kind, identity, prototype, count)."""
    slots: list[list[tuple]] = [[] for _ in range(n_scenes)]
    for kind, ident, proto, count in members:
        for s in rng.choice(n_scenes, size=count, replace=False):
            slots[s].append((kind, ident, proto))
    scenes = []
    for i in range(n_scenes):
        entries = slots[i] + [(BACKGROUND, -1, None)] * int(rng.poisson(cfg.background_per_scene))
        persons, taken = [], []
        for kind, ident, proto in entries:
            box = _place_box(rng, cfg.scene_extent, cfg.box_scale_range, taken)
            taken.append(box)
            if kind == BACKGROUND:
                feat = _unit_rows(rng, 1, cfg.raw_dim)[0]
            else:
                feat = _instance_feature(rng, proto, cfg.noise_sigma)
            persons.append(Person(box=box, kind=kind, identity=ident, raw_feature=feat))
        scenes.append(SynthScene(scene_id=first_scene_id + i, split=split,
                                 extent=cfg.scene_extent, persons=persons))
    return scenes


def separation_accuracy(world: SynthWorld) -> float:
    """Fraction of identity instances whose nearest prototype is their own."""
    protos = np.vstack([world.labeled_prototypes, world.unlabeled_prototypes])
    offset = world.labeled_prototypes.shape[0]
    feats, owners = [], []
    for scene in world.scenes:
        for p in scene.persons:
            if p.kind == BACKGROUND:
                continue
            feats.append(p.raw_feature)
            owners.append(p.identity if p.kind == LABELED else offset + p.identity)
    if not feats:
        return 1.0
    nearest = np.argmax(np.asarray(feats) @ protos.T, axis=1)
    return float(np.mean(nearest == np.asarray(owners)))


def gen_world(cfg: SynthConfig) -> SynthWorld:
    """Generate a world deterministically from `cfg.seed`."""
    rng = np.random.default_rng(cfg.seed)
    L, T, P = cfg.num_labeled, cfg.num_test_identities, cfg.num_unlabeled_pool
    labeled = _unit_rows(rng, L + T, cfg.raw_dim)
    unlabeled = _unit_rows(rng, P, cfg.raw_dim)

    train_counts = _assign_appearances(rng, L + P, cfg.scenes_train, cfg.persons_per_scene, cfg.max_instances)
    train_members = [(LABELED, i, labeled[i], train_counts[i]) for i in range(L)]
    train_members += [(UNLABELED, j, unlabeled[j], train_counts[L + j]) for j in range(P)]
    train = _populate_split(rng, cfg, "train", 0, cfg.scenes_train, train_members)

    test_counts = _assign_appearances(rng, T, cfg.scenes_test, cfg.persons_per_scene, cfg.max_instances)
    test_members = [(LABELED, L + i, labeled[L + i], test_counts[i]) for i in range(T)]
    test = _populate_split(rng, cfg, "test", cfg.scenes_train, cfg.scenes_test, test_members)

    world = SynthWorld(
        config=cfg,
        labeled_prototypes=labeled,
        unlabeled_prototypes=unlabeled,
        scenes=train + test,
        train_identities=list(range(L)),
        test_identities=list(range(L, L + T)),
    )
    world.separation_accuracy = separation_accuracy(world)
    if world.separation_accuracy < 0.99:
        log.warning("nearest-prototype accuracy %.4f < 0.99; identities overlap at this noise level",
                    world.separation_accuracy)
    return world


@dataclass
class DetectorConfig:
    miss_rate: float = 0.02
    false_alarm_rate: float = 1.0
    jitter_sigma: float = 0.05
    true_score_noise: float = 0.05
    false_alarm_score_max: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must lie in [0, 1]")
        if self.false_alarm_rate < 0 or self.jitter_sigma < 0 or self.true_score_noise < 0:
            raise ValueError("rates and noise levels must be non-negative")


@dataclass
class Detection:
    scene_id: int
    index: int
    box: BoundingBox
    score: float
    raw_feature: np.ndarray
    source: int = -1  # index of the scene entry it came from, -1 for false alarms


def _jitter_box(rng, box, sigma, extent):
    dx = sigma * box.width * rng.standard_normal(2)
    dy = sigma * box.height * rng.standard_normal(2)
    x1, x2 = sorted(np.clip([box.x1 + dx[0], box.x2 + dx[1]], 0.0, extent))
    y1, y2 = sorted(np.clip([box.y1 + dy[0], box.y2 + dy[1]], 0.0, extent))
    # keep a sliver of width so the box stays valid
    x2 = max(x2, x1 + 1e-3)
    y2 = max(y2, y1 + 1e-3)
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def simulate_detections(
    scene: SynthScene,
    det: DetectorConfig,
    rng: np.random.Generator,
    raw_dim: Optional[int] = None,
) -> list[Detection]:
    """Detector output for one scene: misses, misaligned boxes, false alarms.

    A misaligned box sees less of the person, so its feature is mixed with
    clutter in proportion to the lost overlap. True persons score roughly
    their box IoU; clutter and false alarms score uniformly in
    [0, false_alarm_score_max].
    """
    out: list[Detection] = []
    if raw_dim is None and scene.persons:
        raw_dim = scene.persons[0].raw_feature.shape[0]
    for src, person in enumerate(scene.persons):
        if rng.random() < det.miss_rate:
            continue
        box, feat = person.box, person.raw_feature
        if det.jitter_sigma > 0:
            box = _jitter_box(rng, person.box, det.jitter_sigma, scene.extent)
            overlap = iou(box, person.box)
            clutter = _unit_rows(rng, 1, feat.shape[0])[0]
            mixed = overlap * feat + (1.0 - overlap) * clutter
            feat = mixed / np.linalg.norm(mixed)
        else:
            overlap = 1.0
        if person.kind == BACKGROUND:
            score = rng.uniform(0.0, det.false_alarm_score_max)
        else:
            score = overlap + det.true_score_noise * rng.standard_normal()
        out.append(Detection(scene.scene_id, len(out), box, float(score), feat, source=src))
    n_fa = int(rng.poisson(det.false_alarm_rate))
    for _ in range(n_fa):
        if raw_dim is None:
            raise ValueError("cannot infer feature dimension for an empty scene; pass raw_dim")
        box = _random_box(rng, scene.extent, _fa_scale(scene))
        feat = _unit_rows(rng, 1, raw_dim)[0]
        score = rng.uniform(0.0, det.false_alarm_score_max)
        out.append(Detection(scene.scene_id, len(out), box, float(score), feat))
    return out


def _fa_scale(scene: SynthScene) -> tuple[float, float]:
    sides = [v for p in scene.persons for v in (p.box.width, p.box.height)]
    return (min(sides), max(sides)) if sides else (1.0, scene.extent / 4)


def detect_world(
    world: SynthWorld,
    det: DetectorConfig,
    rng: np.random.Generator,
    scenes: Optional[Iterable[SynthScene]] = None,
) -> dict[int, list[Detection]]:
    """Run the simulator over `scenes` (default: the test split), in scene order."""
    scenes = world.test_scenes if scenes is None else scenes
    return {s.scene_id: simulate_detections(s, det, rng, raw_dim=world.raw_dim) for s in scenes}


def threshold_detections(dets: Iterable[Detection], score_threshold: float) -> list[Detection]:
    return [d for d in dets if d.score >= score_threshold]


def detection_recall_precision(
    scenes: Iterable[SynthScene],
    dets: dict[int, list[Detection]],
    score_threshold: float = -math.inf,
    iou_threshold: float = 0.5,
) -> tuple[float, float]:
    """Recall over true persons and precision over kept detections.

    A detection is correct if it comes from a labeled or unlabeled person
    and still overlaps that person's box at `iou_threshold`.
    """
    n_true = n_found = n_kept = 0
    for s in scenes:
        persons = s.persons
        n_true += sum(p.kind != BACKGROUND for p in persons)
        found = set()
        kept = threshold_detections(dets.get(s.scene_id, []), score_threshold)
        n_kept += len(kept)
        for d in kept:
            if d.source >= 0 and persons[d.source].kind != BACKGROUND and iou(d.box, persons[d.source].box) >= iou_threshold:
                found.add(d.source)
        n_found += len(found)
    recall = n_found / n_true if n_true else 0.0
    precision = n_found / n_kept if n_kept else 1.0
    return recall, precision


# record files: one JSON object per line


def _person_record(p: Person) -> dict:
    return {"box": p.box.as_list(), "kind": p.kind, "identity": p.identity,
            "raw_feature": p.raw_feature.tolist()}


def write_world_records(world: SynthWorld, path: str | Path) -> None:
    cfg = asdict(world.config)
    cfg["box_scale_range"] = list(cfg["box_scale_range"])
    with open(path, "w") as fh:
        header = {
            "record": "world",
            "format_version": RECORD_VERSION,
            "config": cfg,
            "train_identities": world.train_identities,
            "test_identities": world.test_identities,
            "separation_accuracy": world.separation_accuracy,
            "labeled_prototypes": world.labeled_prototypes.tolist(),
            "unlabeled_prototypes": world.unlabeled_prototypes.tolist(),
        }
        fh.write(json.dumps(header) + "\n")
        for s in world.scenes:
            rec = {"record": "scene", "scene_id": s.scene_id, "split": s.split, "extent": s.extent,
                   "persons": [_person_record(p) for p in s.persons]}
            fh.write(json.dumps(rec) + "\n")


def read_world_records(path: str | Path) -> SynthWorld:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "world":
        raise ValueError(f"{path}: missing world header record")
    head = lines[0]
    if head.get("format_version") != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {head.get('format_version')}")
    cfg = SynthConfig(**head["config"])
    scenes = []
    for rec in lines[1:]:
        if rec["record"] != "scene":
            raise ValueError(f"{path}: unexpected record {rec['record']!r}")
        persons = [Person(BoundingBox(*p["box"]), p["kind"], p["identity"], np.asarray(p["raw_feature"], dtype=np.float64))
                   for p in rec["persons"]]
        scenes.append(SynthScene(rec["scene_id"], rec["split"], rec["extent"], persons))
    scenes.sort(key=lambda s: s.scene_id)
    unl = np.asarray(head["unlabeled_prototypes"], dtype=np.float64).reshape(-1, cfg.raw_dim)
    return SynthWorld(
        config=cfg,
        labeled_prototypes=np.asarray(head["labeled_prototypes"], dtype=np.float64),
        unlabeled_prototypes=unl,
        scenes=scenes,
        train_identities=head["train_identities"],
        test_identities=head["test_identities"],
        separation_accuracy=head["separation_accuracy"],
    )


def write_detection_records(dets: dict[int, list[Detection]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for scene_id in sorted(dets):
            for d in dets[scene_id]:
                rec = {"record": "detection", "scene_id": d.scene_id, "index": d.index,
                       "box": d.box.as_list(), "score": d.score, "source": d.source,
                       "raw_feature": d.raw_feature.tolist()}
                fh.write(json.dumps(rec) + "\n")


def read_detection_records(path: str | Path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("record") != "detection":
                raise ValueError(f"{path}: unexpected record {rec.get('record')!r}")
            d = Detection(rec["scene_id"], rec["index"], BoundingBox(*rec["box"]), rec["score"],
                          np.asarray(rec["raw_feature"], dtype=np.float64), rec["source"])
            out.setdefault(d.scene_id, []).append(d)
    return out
