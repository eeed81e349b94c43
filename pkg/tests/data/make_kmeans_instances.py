"""Regenerate kmeans_instances.json (run from the tests directory).

Draws come from one seeded stream, in order. A draw on which 5-restart Lloyd
stops short of the enumerated optimum goes to ``local_optimum_cases``
instead of ``instances``; drawing continues until 20 instances are kept.
"""

import json
import sys

import numpy as np

sys.path.insert(0, ".")
from oracles import best_two_partition  # noqa: E402

from clusterdet.clustering import KMeans  # noqa: E402

rng = np.random.default_rng(20240611)
kept, local = [], []
draw = 0
while len(kept) < 20:
    n = int(rng.integers(4, 11))
    d = int(rng.integers(1, 4))
    pts = np.round(rng.normal(size=(n, d)) * 3, 3)
    if draw % 3 == 0:
        pts[: n // 2] += 6
    opt = best_two_partition(pts)
    rec = {"points": pts.tolist(), "seed": draw, "optimum": opt}
    km = KMeans(2, n_init=5, random_state=draw).fit(pts)
    (kept if abs(km.inertia_ - opt) <= 1e-9 * max(1.0, opt) else local).append(rec)
    draw += 1
with open("data/kmeans_instances.json", "w") as fh:
    json.dump({"k": 2, "restarts": 5, "instances": kept, "local_optimum_cases": local}, fh, indent=1)
print(f"{draw} draws, {len(kept)} kept, {len(local)} local-optimum cases")
