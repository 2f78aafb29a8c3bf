"""Person-search evaluation: per-query galleries, cosine ranking, CMC top-K
and detection-style average precision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .embedder import EmbedderParams, embed_many
from .geometry import BoundingBox, iou
from .oim import DimensionError
from .synth import LABELED, Detection, DetectorConfig, SynthWorld, detect_world, threshold_detections


@dataclass(frozen=True)
class Query:
    identity: int
    scene_id: int
    person_index: int


@dataclass
class SearchProtocol:
    queries: list[Query]
    galleries: list[list[int]]  # scene ids, sorted
    ground_truth_scenes: list[list[int]]
    gallery_size: int
    seed: Optional[int] = None


@dataclass
class QueryResult:
    ranked: list[tuple[Detection, float]]
    ground_truths: list[tuple[int, BoundingBox]] = field(default_factory=list)


def _identity_scenes(world: SynthWorld) -> dict[int, list[tuple[int, int]]]:
    """identity -> [(scene_id, person_index)] over the test split."""
    where: dict[int, list[tuple[int, int]]] = {i: [] for i in world.test_identities}
    for s in world.test_scenes:
        for j, p in enumerate(s.persons):
            if p.kind == LABELED:
                where[p.identity].append((s.scene_id, j))
    return where


def build_protocol(world: SynthWorld, gallery_size: int, rng: np.random.Generator) -> SearchProtocol:
    """One query per test identity, drawn at random among its instances.

    Each gallery holds every other scene containing the identity, topped up
    with filler scenes. Fillers are taken first from scenes no earlier
    gallery has covered yet, so the galleries jointly span the test split
    whenever the total gallery budget allows.
    """
    test_ids = [s.scene_id for s in world.test_scenes]
    where = _identity_scenes(world)
    if gallery_size < 1 or gallery_size > len(test_ids):
        raise ValueError(f"gallery_size must lie in [1, {len(test_ids)}], got {gallery_size}")

    queries, gt_scenes = [], []
    for ident in world.test_identities:
        inst = where[ident]
        if len(inst) < 2:
            raise ValueError(f"test identity {ident} has fewer than two instances")
        q_scene, q_person = inst[rng.integers(len(inst))]
        gts = sorted({sid for sid, _ in inst if sid != q_scene})
        if len(gts) > gallery_size:
            raise ValueError(f"gallery_size {gallery_size} is smaller than the {len(gts)} "
                             f"ground-truth scenes of identity {ident}")
        queries.append(Query(ident, q_scene, q_person))
        gt_scenes.append(gts)

    uncovered = set(test_ids)
    galleries = []
    for q, gts in zip(queries, gt_scenes):
        gts_set = set(gts)
        fillers_pool = [sid for sid in test_ids if sid not in gts_set]
        n_fill = gallery_size - len(gts)
        fresh = [sid for sid in fillers_pool if sid in uncovered]
        stale = [sid for sid in fillers_pool if sid not in uncovered]
        take_fresh = min(n_fill, len(fresh))
        chosen = list(rng.choice(fresh, size=take_fresh, replace=False)) if take_fresh else []
        if n_fill > take_fresh:
            chosen += list(rng.choice(stale, size=n_fill - take_fresh, replace=False))
        gallery = sorted(gts + [int(s) for s in chosen])
        uncovered.difference_update(gallery)
        galleries.append(gallery)
    return SearchProtocol(queries, galleries, gt_scenes, gallery_size)


def rank_gallery(
    query_feature: np.ndarray,
    gallery: Sequence[tuple[Detection, np.ndarray]],
    ground_truths: Optional[list[tuple[int, BoundingBox]]] = None,
) -> QueryResult:
    """Sort gallery detections by cosine similarity, highest first.

    Ties are broken by (scene_id, detection index).
    """
    ground_truths = [] if ground_truths is None else ground_truths
    if not gallery:
        return QueryResult([], ground_truths)
    feats = np.asarray([f for _, f in gallery], dtype=np.float64)
    if feats.shape[1] != len(query_feature):
        raise DimensionError(f"gallery features of dim {feats.shape[1]}, query of dim {len(query_feature)}")
    sims = feats @ query_feature
    dets = [d for d, _ in gallery]
    order = np.lexsort(([d.index for d in dets], [d.scene_id for d in dets], -sims))
    return QueryResult([(dets[i], float(sims[i])) for i in order], ground_truths)


def _is_hit(det: Detection, gts: list[tuple[int, BoundingBox]], thr: float) -> bool:
    return any(sid == det.scene_id and iou(det.box, box) >= thr for sid, box in gts)


def cmc_topk(results: Sequence[QueryResult], k: int, iou_threshold: float = 0.5) -> float:
    if not results:
        raise ValueError("no query results")
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = sum(any(_is_hit(d, r.ground_truths, iou_threshold) for d, _ in r.ranked[:k]) for r in results)
    return hits / len(results)


def _greedy_flags(result: QueryResult, thr: float) -> list[bool]:
    """True-positive flag per ranked detection; each ground truth matches once,
    to the unmatched box of highest IoU."""
    used = [False] * len(result.ground_truths)
    flags = []
    for det, _ in result.ranked:
        best, best_j = thr, -1
        for j, (sid, box) in enumerate(result.ground_truths):
            if used[j] or sid != det.scene_id:
                continue
            o = iou(det.box, box)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            used[best_j] = True
        flags.append(best_j >= 0)
    return flags


def average_precision(result: QueryResult, iou_threshold: float = 0.5) -> float:
    """Area under the stepwise precision-recall curve.

    Ground truths never retrieved still count in the recall denominator.
    Accumulated in exact rationals, so the result is correctly rounded.
    """
    n_gt = len(result.ground_truths)
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    ap = Fraction(0)
    tp = 0
    for rank, hit in enumerate(_greedy_flags(result, iou_threshold), start=1):
        if hit:
            tp += 1
            ap += Fraction(tp, rank)
    return float(ap / n_gt)


def mean_ap(results: Sequence[QueryResult], iou_threshold: float = 0.5) -> float:
    if not results:
        raise ValueError("no query results")
    return mean_of([average_precision(r, iou_threshold) for r in results])


def mean_of(values: Sequence[float]) -> float:
    """Exact arithmetic mean, correctly rounded (order-independent)."""
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))


@dataclass
class SearchReport:
    gallery_size: int
    seed: Optional[int]
    cmc: dict[int, float]
    mean_ap: float
    per_query_ap: list[float]

    def as_dict(self) -> dict:
        return {
            "gallery_size": self.gallery_size,
            "seed": self.seed,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "mAP": self.mean_ap,
            "per_query_ap": self.per_query_ap,
        }


def query_results(
    world: SynthWorld,
    protocol: SearchProtocol,
    detections: dict[int, list[Detection]],
    params: EmbedderParams,
    iou_threshold: float = 0.5,
) -> list[QueryResult]:
    """Embed everything once and rank each query's gallery.

    Detections in the query's own scene that cover the query box are
    dropped so a query never retrieves itself.
    """
    all_dets = [d for sid in sorted(detections) for d in detections[sid]]
    feats = embed_many(np.asarray([d.raw_feature for d in all_dets]), params) if all_dets else np.zeros((0, params.out_dim))
    by_scene: dict[int, list[tuple[Detection, np.ndarray]]] = {}
    for d, f in zip(all_dets, feats):
        by_scene.setdefault(d.scene_id, []).append((d, f))

    results = []
    for q, gallery_ids, gt_ids in zip(protocol.queries, protocol.galleries, protocol.ground_truth_scenes):
        q_person = world.scene(q.scene_id).persons[q.person_index]
        q_feat = embed_many(q_person.raw_feature[None, :], params)[0]
        gallery = []
        for sid in gallery_ids:
            for d, f in by_scene.get(sid, []):
                if sid == q.scene_id and iou(d.box, q_person.box) >= iou_threshold:
                    continue
                gallery.append((d, f))
        gts = [(sid, p.box) for sid in gt_ids for p in world.scene(sid).persons
               if p.kind == LABELED and p.identity == q.identity]
        results.append(rank_gallery(q_feat, gallery, gts))
    return results


def evaluate_search(
    world: SynthWorld,
    params: EmbedderParams,
    gallery_size: int,
    protocol_seed: int,
    detector: Optional[DetectorConfig] = None,
    detector_seed: int = 0,
    score_threshold: float = -math.inf,
    ks: Sequence[int] = (1, 5, 10),
    iou_threshold: float = 0.5,
    detections: Optional[dict[int, list[Detection]]] = None,
) -> SearchReport:
    """Full search evaluation of an embedder on the test split."""
    if detections is None:
        detections = detect_world(world, detector or DetectorConfig(), np.random.default_rng(detector_seed))
    kept = {sid: threshold_detections(ds, score_threshold) for sid, ds in detections.items()}
    protocol = build_protocol(world, gallery_size, np.random.default_rng(protocol_seed))
    protocol.seed = protocol_seed
    results = query_results(world, protocol, kept, params, iou_threshold)
    aps = [average_precision(r, iou_threshold) for r in results]
    return SearchReport(
        gallery_size=gallery_size,
        seed=protocol_seed,
        cmc={k: cmc_topk(results, k, iou_threshold) for k in ks},
        mean_ap=mean_of(aps),
        per_query_ap=aps,
    )
