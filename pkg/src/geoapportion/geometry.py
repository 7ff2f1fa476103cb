"""Convex-hull geometry of the row-normalized data cloud.

Rows of a non-negative matrix, divided by their sums, live in the probability
simplex. The source profiles are the corners of the hull of that cloud; this
module finds hull vertices, thins them with k-means, and picks the K-subset
spanning the largest polytope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import linprog
from sklearn.cluster import KMeans

from .nnls import nnls_batch

SUBSET_BUDGET = 2_000_000
PRUNE_FACTOR = 40
LP_AUTO_LIMIT = 200


class GeometryError(ValueError):
    pass


@dataclass
class SimplexCloud:
    """Row-normalized data.

    ``points[i]`` is input row ``retained[i]`` divided by ``row_sums[i]``.
    """

    points: np.ndarray
    row_sums: np.ndarray
    retained: np.ndarray
    dropped_zero_rows: np.ndarray

    def __len__(self):
        return self.points.shape[0]


@dataclass
class VertexSet:
    """Hull vertices (``indices``) and the pruned candidates, both as cloud row numbers."""

    indices: np.ndarray
    candidate_indices: np.ndarray
    method: str = "lp"


@dataclass
class ProfileMatrix:
    """K x J row-stochastic source profiles.

    ``indices`` records which cloud rows were selected (None when the rows
    did not come from the cloud).
    """

    H_star: np.ndarray
    pollutant_names: list[str] | None = None
    indices: np.ndarray | None = None
    volume: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def n_sources(self):
        return self.H_star.shape[0]


def normalize_rows(values) -> SimplexCloud:
    values = np.asarray(getattr(values, "values", values), dtype=float)
    if (values < 0).any():
        raise GeometryError("row normalization needs a non-negative matrix")
    sums = values.sum(axis=1)
    keep = sums > 0
    if not keep.any():
        raise GeometryError("every row is zero")
    retained = np.flatnonzero(keep)
    points = values[keep] / sums[keep, None]
    return SimplexCloud(points, sums[keep], retained, np.flatnonzero(~keep))


# ---------------------------------------------------------------------------
# extreme points


def _unique_points(points, tol):
    # points closer than the certification tolerance count as one
    decimals = int(np.ceil(-np.log10(tol))) + 1 if tol > 0 else 15
    _, first = np.unique(np.round(points, decimals), axis=0, return_index=True)
    first = np.sort(first)
    return points[first], first


def direction_bank(J, n_random=256, seed=0):
    """Coordinate axes, signed pairwise coordinate differences and random unit vectors."""
    eye = np.eye(J)
    pairs = np.array([eye[i] - eye[j] for i in range(J) for j in range(J) if i != j]).reshape(-1, J)
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((n_random, J))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.vstack([eye, pairs, rand])


def _bank_certified(points, directions, tol, block=64):
    """Indices (into ``points``) that strictly maximize some direction by more than ``tol``."""
    hits = set()
    m = points.shape[0]
    if m == 1:
        return np.array([0])
    for start in range(0, directions.shape[0], block):
        D = directions[start:start + block]
        vals = points @ D.T
        top = np.argmax(vals, axis=0)
        cols = np.arange(D.shape[0])
        best = vals[top, cols].copy()
        vals[top, cols] = -np.inf
        runner_up = vals.max(axis=0)
        hits.update(top[best - runner_up > tol].tolist())
    return np.array(sorted(hits), dtype=int)


def _lp_is_extreme(points, i, tol):
    """True when ``points[i]`` is farther than ``tol`` (L1) from the hull of the others."""
    others = np.delete(points, i, axis=0)
    m, J = others.shape
    # variables: lambda (m), s_plus (J), s_minus (J)
    c = np.concatenate([np.zeros(m), np.ones(2 * J)])
    A_eq = np.zeros((J + 1, m + 2 * J))
    A_eq[:J, :m] = others.T
    A_eq[:J, m:m + J] = np.eye(J)
    A_eq[:J, m + J:] = -np.eye(J)
    A_eq[J, :m] = 1.0
    b_eq = np.concatenate([points[i], [1.0]])
    res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise GeometryError(f"extremality LP failed for point {i}: {res.message}")
    return res.fun > tol


def find_extreme_points(cloud: SimplexCloud, method="auto", tol=1e-8, n_directions=256, seed=0):
    """Hull vertices of the cloud.

    ``method="lp"`` certifies each distinct point with a convex-combination LP
    (exact). ``method="directions"`` keeps points that strictly maximize a
    linear functional from :func:`direction_bank`; every such point is a
    vertex but some vertices may be missed. ``"auto"`` uses the LP when the
    cloud has at most ``LP_AUTO_LIMIT`` distinct points. Duplicated points
    are reported once, by their smallest row index.
    """
    points = cloud.points
    uniq, first = _unique_points(points, tol)
    if uniq.shape[0] < 2:
        raise GeometryError("degenerate cloud: all points coincide")
    if method == "auto":
        method = "lp" if uniq.shape[0] <= LP_AUTO_LIMIT else "directions"
    bank = direction_bank(points.shape[1], n_directions, seed)
    certified = _bank_certified(uniq, bank, tol)
    if method == "lp":
        known = np.zeros(uniq.shape[0], dtype=bool)
        known[certified] = True
        extreme = [i for i in range(uniq.shape[0]) if known[i] or _lp_is_extreme(uniq, i, tol)]
        certified = np.array(extreme, dtype=int)
    elif method != "directions":
        raise ValueError(f"unknown extreme-point method {method!r}")
    idx = np.sort(first[certified])
    return VertexSet(indices=idx, candidate_indices=idx.copy(), method=method)


def prune_vertices(vset: VertexSet, cloud: SimplexCloud, K, seed=0, factor=PRUNE_FACTOR, max_iter=100):
    """Thin the hull vertices to ``min(factor * K, N)`` well-spread candidates.

    k-means (k-means++ seeding) runs on the vertex coordinates; each cluster
    contributes the member vertex nearest its centroid.
    """
    idx = np.asarray(vset.indices)
    if idx.size == 0:
        raise GeometryError("no hull vertices to prune")
    n0 = min(factor * K, idx.size)
    if n0 >= idx.size:
        return VertexSet(idx, idx.copy(), vset.method)
    X = cloud.points[idx]
    km = KMeans(n_clusters=n0, init="k-means++", n_init=1, max_iter=max_iter, random_state=seed)
    labels = km.fit_predict(X)
    reps = []
    for c in range(n0):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        d = np.sum((X[members] - km.cluster_centers_[c]) ** 2, axis=1)
        reps.append(idx[members[np.argmin(d)]])
    return VertexSet(idx, np.array(sorted(reps), dtype=int), vset.method)


# ---------------------------------------------------------------------------
# volumes and subset search


def _batch_volumes(P, subsets):
    """(K-1)-volumes of the simplices with vertex rows ``P[subsets[s]]``."""
    subsets = np.asarray(subsets)
    K = subsets.shape[1]
    if K == 1:
        return np.ones(subsets.shape[0])
    E = P[subsets[:, 1:]] - P[subsets[:, :1]]
    gram = E @ np.swapaxes(E, 1, 2)
    det = np.linalg.det(gram)
    return np.sqrt(np.clip(det, 0.0, None)) / math.factorial(K - 1)


def polytope_volume(points):
    """(K-1)-dimensional volume of the simplex spanned by the K rows of ``points``."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    return float(_batch_volumes(P, np.arange(P.shape[0])[None, :])[0])


def _exhaustive(P, K, chunk=200_000):
    m = P.shape[0]
    best_vol, best = -1.0, None
    it = combinations(range(m), K)
    while True:
        block = np.fromiter(
            (i for combo in _take(it, chunk) for i in combo), dtype=np.int64
        ).reshape(-1, K)
        if block.size == 0:
            break
        vols = _batch_volumes(P, block)
        j = int(np.argmax(vols))
        if vols[j] > best_vol:
            best_vol, best = float(vols[j]), block[j]
    return best, best_vol


def _take(it, n):
    for _ in range(n):
        try:
            yield next(it)
        except StopIteration:
            return


def _greedy_swap(P, K, max_rounds=1000):
    m = P.shape[0]
    centroid = P.mean(axis=0)
    chosen = [int(np.argmax(np.sum((P - centroid) ** 2, axis=1)))]
    while len(chosen) < K:
        rest = np.array([i for i in range(m) if i not in chosen])
        subsets = np.column_stack([np.tile(chosen, (rest.size, 1)), rest])
        if len(chosen) == 1:
            score = np.sum((P[rest] - P[chosen[0]]) ** 2, axis=1)
        else:
            score = _batch_volumes(P, subsets)
        chosen.append(int(rest[np.argmax(score)]))
    vol = _batch_volumes(P, np.array([chosen]))[0]
    for _ in range(max_rounds):
        rest = np.array([i for i in range(m) if i not in chosen])
        if rest.size == 0:
            break
        best_gain, best_move = vol * (1 + 1e-12), None
        for pos in range(K):
            subsets = np.tile(chosen, (rest.size, 1))
            subsets[:, pos] = rest
            vols = _batch_volumes(P, subsets)
            j = int(np.argmax(vols))
            if vols[j] > best_gain:
                best_gain, best_move = vols[j], (pos, int(rest[j]))
        if best_move is None:
            break
        chosen[best_move[0]] = best_move[1]
        vol = best_gain
    return np.array(sorted(chosen)), float(_batch_volumes(P, np.array([sorted(chosen)]))[0])


def max_volume_subset(P, K, strategy="auto", budget=SUBSET_BUDGET):
    """Positions of the K rows of ``P`` spanning the largest simplex, and its volume."""
    P = np.asarray(P, dtype=float)
    m = P.shape[0]
    if K < 1 or m < K:
        raise GeometryError(f"need at least K={K} candidates, have {m}")
    if strategy == "auto":
        strategy = "exhaustive" if math.comb(m, K) <= budget else "greedy-swap"
    if strategy == "exhaustive":
        return _exhaustive(P, K)
    if strategy == "greedy-swap":
        return _greedy_swap(P, K)
    raise ValueError(f"unknown subset strategy {strategy!r}")


def select_max_volume(vset: VertexSet, cloud: SimplexCloud, K, strategy="auto", budget=SUBSET_BUDGET,
                      pollutant_names=None) -> ProfileMatrix:
    cand = np.sort(np.asarray(vset.candidate_indices))
    pos, vol = max_volume_subset(cloud.points[cand], K, strategy, budget)
    if not vol > 1e-14:
        raise GeometryError(f"every {K}-subset of the {cand.size} candidates is degenerate")
    chosen = cand[pos]
    H = cloud.points[chosen]
    H = H / H.sum(axis=1, keepdims=True)
    return ProfileMatrix(H, pollutant_names, chosen, vol, {"strategy": strategy})


def xray_select(cloud: SimplexCloud, K, tol=1e-10, pollutant_names=None) -> ProfileMatrix:
    """Greedy cone expansion: repeatedly add the point farthest from the
    non-negative span of the points chosen so far."""
    X = cloud.points
    if X.shape[0] < K:
        raise GeometryError(f"need at least {K} rows, have {X.shape[0]}")
    chosen = [int(np.argmax(np.einsum("ij,ij->i", X, X)))]
    while len(chosen) < K:
        H = X[chosen]
        W = nnls_batch(H @ H.T, X @ H.T)
        resid = np.einsum("ij,ij->i", X - W @ H, X - W @ H)
        resid[chosen] = -1.0
        nxt = int(np.argmax(resid))
        if resid[nxt] <= tol**2:
            raise GeometryError(f"data cone has rank below K={K}: residuals vanish after {len(chosen)} picks")
        chosen.append(nxt)
    H = X[chosen]
    H = H / H.sum(axis=1, keepdims=True)
    return ProfileMatrix(H, pollutant_names, np.array(chosen), polytope_volume(H), {"strategy": "xray"})
