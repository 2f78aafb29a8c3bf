"""Random query results for metric property tests."""

import numpy as np

from oim_search.evaluation import QueryResult
from oim_search.geometry import BoundingBox
from oim_search.synth import Detection


def random_result(rng, n_scenes=3, n_gt=None, n_det=None):
    n_gt = n_gt or int(rng.integers(1, 5))
    n_det = n_det if n_det is not None else int(rng.integers(0, 15))
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 80, 2)
        gts.append((int(rng.integers(n_scenes)), BoundingBox(x, y, x + 10, y + 20)))
    dets = []
    for i in range(n_det):
        if gts and rng.random() < 0.5:
            sid, g = gts[rng.integers(len(gts))]
            dx = rng.normal(0, 2.5, 4)
            x1, x2 = sorted([g.x1 + dx[0], g.x2 + dx[1]])
            y1, y2 = sorted([g.y1 + dx[2], g.y2 + dx[3]])
            box = BoundingBox(x1, y1, x2 + 1e-6, y2 + 1e-6)
        else:
            sid = int(rng.integers(n_scenes))
            x, y = rng.uniform(0, 80, 2)
            box = BoundingBox(x, y, x + 10, y + 20)
        dets.append((Detection(sid, i, box, 1.0, np.zeros(2)), float(rng.uniform(-1, 1))))
    dets.sort(key=lambda t: -t[1])
    return QueryResult(dets, gts)


def as_oracle(r):
    return ([(d.scene_id, d.box.as_list()) for d, _ in r.ranked], [(s, b.as_list()) for s, b in r.ground_truths])
