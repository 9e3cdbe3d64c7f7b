"""Point-cloud distances and the generative-evaluation suite.

Pair distances (Chamfer, L1 Chamfer, EMD) feed reference-by-generated
matrices, from which coverage, minimum matching distance and 1-NN accuracy
are read off.  ICP alignment is provided for the paired (conditional)
protocol.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import AlignmentFailure, SizeError, UsageError
from .rng import make_rng

DISTANCES = ("cd", "emd", "cd-l1")
EXACT_EMD_LIMIT = 1024
_DENSE_LIMIT = 4_000_000


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("GECCO_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _points(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or len(p) == 0:
        raise SizeError("point clouds must be non-empty (N, D) arrays")
    return p


def _sq_dists(p, q):
    return ((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)


def nearest_sq(p, q):
    """Squared distance from every point of ``p`` to its nearest neighbour in ``q``."""
    if len(p) * len(q) <= _DENSE_LIMIT:
        return _sq_dists(p, q).min(axis=1)
    d, _ = cKDTree(q).query(p)
    return d * d


# ---------------------------------------------------------------- pair distances

def chamfer(p, q, norm: str = "squared") -> float:
    """Symmetric Chamfer distance; each directed term is averaged over its own set.

    ``norm="squared"`` averages squared nearest distances, ``"l1"`` plain ones.
    """
    p, q = _points(p), _points(q)
    a, b = nearest_sq(p, q), nearest_sq(q, p)
    if norm == "l1":
        a, b = np.sqrt(a), np.sqrt(b)
    elif norm != "squared":
        raise UsageError(f"unknown chamfer norm {norm!r}")
    return float(a.mean() + b.mean())


def _cost(p, q):
    return np.sqrt(_sq_dists(p, q))


def auction_assignment(cost, eps=None):
    """Minimum-cost assignment by Jacobi auction with ε-scaling.

    Returns ``cols`` with row ``i`` assigned to column ``cols[i]``; the total
    cost is within ``n * eps`` of optimal.
    """
    cost = np.asarray(cost, dtype=float)
    n = len(cost)
    cmax = float(cost.max()) if cost.size else 0.0
    if eps is None:
        eps = 1e-3 * cmax / n if cmax > 0 else 1e-12
    benefit = -cost
    prices = np.zeros(n)
    step = max(cmax / 4.0, eps)
    rows = np.arange(n)
    while True:
        owner = np.full(n, -1)
        assigned = np.full(n, -1)
        while True:
            free = np.flatnonzero(assigned < 0)
            if free.size == 0:
                break
            values = benefit[free] - prices
            if n == 1:
                best, bid_inc = np.zeros(1, dtype=int), np.full(1, step)
            else:
                top2 = np.argpartition(-values, 1, axis=1)[:, :2]
                v = np.take_along_axis(values, top2, axis=1)
                first = v[:, 0] >= v[:, 1]
                best = np.where(first, top2[:, 0], top2[:, 1])
                gap = np.abs(v[:, 0] - v[:, 1])
                bid_inc = gap + step
            bids = prices[best] + bid_inc
            # highest bid per object wins; ties go to the lowest row index
            order = np.lexsort((free, -bids, best))
            obj = best[order]
            win = order[np.r_[True, obj[1:] != obj[:-1]]]
            objs, winners = best[win], free[win]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = winners
            assigned[winners] = objs
            prices[objs] = bids[win]
        if step <= eps:
            break
        step = max(step / 4.0, eps)
    return assigned[rows]


def emd(p, q, method: str = "auto", eps=None) -> float:
    """Mean matched distance under the optimal bijection between equal-size clouds."""
    p, q = _points(p), _points(q)
    if len(p) != len(q):
        raise SizeError("EMD needs equal point counts")
    cost = _cost(p, q)
    if method == "auto":
        method = "exact" if len(p) <= EXACT_EMD_LIMIT else "auction"
    if method == "exact":
        r, c = linear_sum_assignment(cost)
    elif method == "auction":
        r, c = np.arange(len(p)), auction_assignment(cost, eps)
    else:
        raise UsageError(f"unknown EMD method {method!r}")
    return float(cost[r, c].sum() / len(p))


def pair_distance(p, q, metric: str) -> float:
    if metric == "cd":
        return chamfer(p, q, "squared")
    if metric == "cd-l1":
        return chamfer(p, q, "l1")
    if metric == "emd":
        return emd(p, q)
    raise UsageError(f"unknown distance {metric!r}")


# ---------------------------------------------------------------- set metrics

@dataclass
class DistanceMatrix:
    values: np.ndarray
    metric: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise UsageError("distance matrices must be finite and non-negative")


def pairwise_matrix(S_r, S_g, metric: str = "cd", workers: int | None = None) -> DistanceMatrix:
    """All reference-by-generated distances; each entry is computed on its own."""
    if len(S_r) == 0 or len(S_g) == 0:
        raise SizeError("sets must be non-empty")
    if metric not in DISTANCES:
        raise UsageError(f"unknown distance {metric!r}")
    out = np.empty((len(S_r), len(S_g)))

    def row(i):
        for j in range(len(S_g)):
            out[i, j] = pair_distance(S_r[i], S_g[j], metric)

    n = worker_count(workers)
    if n == 1:
        for i in range(len(S_r)):
            row(i)
    else:
        with ThreadPoolExecutor(n) as pool:
            list(pool.map(row, range(len(S_r))))
    return DistanceMatrix(out, metric)


def _values(m):
    return m.values if isinstance(m, DistanceMatrix) else np.asarray(m, dtype=float)


def coverage(matrix) -> float:
    """Fraction of references that are the nearest reference of some generated sample."""
    M = _values(matrix)
    return len(np.unique(M.argmin(axis=0))) / M.shape[0]


def mmd(matrix) -> float:
    """Mean over references of the distance to the closest generated sample."""
    return float(_values(matrix).min(axis=1).mean())


def one_nna_from_matrices(rr, rg, gg) -> float:
    """Leave-one-out 1-NN accuracy over the union of two equal-size sets.

    An element counts as correct only if its same-set neighbour is strictly
    closer than every opposite-set element; ties go to the opposite set.
    """
    rr, rg, gg = _values(rr), _values(rg), _values(gg)
    n = rr.shape[0]
    if rr.shape != (n, n) or gg.shape != (n, n) or rg.shape != (n, n):
        raise SizeError("1-NNA needs equal-size sets")

    def hits(same, opp):
        same = same.copy()
        np.fill_diagonal(same, np.inf)
        return int(np.count_nonzero(same.min(axis=1) < opp.min(axis=1)))

    return (hits(rr, rg) + hits(gg, rg.T)) / (2 * n)


def one_nna(S_r, S_g, metric: str = "cd", workers=None) -> float:
    if len(S_r) != len(S_g):
        raise SizeError("1-NNA needs equal-size sets")
    return one_nna_from_matrices(pairwise_matrix(S_r, S_r, metric, workers),
                                 pairwise_matrix(S_r, S_g, metric, workers),
                                 pairwise_matrix(S_g, S_g, metric, workers))


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)     # (metric, distance) -> value
    matrices: dict = field(default_factory=dict)   # distance -> reference-by-generated matrix

    def __getitem__(self, key):
        return self.values[key]

    def rows(self):
        return [(m, d, v) for (m, d), v in self.values.items()]

    def to_csv(self) -> str:
        return "metric,distance,value\n" + "".join(f"{m},{d},{v!r}\n" for m, d, v in self.rows())

    def to_text(self) -> str:
        return "".join(f"{m:>8s} {d:>6s} {v:.6g}\n" for m, d, v in self.rows())


def evaluate_sets(S_r, S_g, distances=("cd", "emd"), paired: bool = False, workers=None) -> MetricReport:
    """COV, MMD and (for equal sizes) 1-NNA per distance; with ``paired`` also
    the mean distance between matched clouds ``r_i``, ``g_i``."""
    report = MetricReport()
    for d in distances:
        rg = pairwise_matrix(S_r, S_g, d, workers)
        report.matrices[d] = rg
        report.values[("cov", d)] = coverage(rg)
        report.values[("mmd", d)] = mmd(rg)
        if len(S_r) == len(S_g):
            report.values[("1-nna", d)] = one_nna_from_matrices(
                pairwise_matrix(S_r, S_r, d, workers), rg, pairwise_matrix(S_g, S_g, d, workers))
            if paired:
                report.values[("paired", d)] = float(np.mean(np.diag(rg.values)))
    return report


def oracle_eval(train, reference, distances=("cd",), seed=0, workers=None) -> MetricReport:
    """Score training samples drawn without replacement as if they were generated."""
    if len(train) < len(reference):
        raise SizeError("oracle needs at least as many training as reference clouds")
    idx = make_rng(seed).choice(len(train), size=len(reference), replace=False)
    return evaluate_sets(reference, [train[i] for i in idx], distances, workers=workers)


# ---------------------------------------------------------------- alignment

@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if not np.allclose(R.T @ R, np.eye(len(R)), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise AlignmentFailure("rotation is not orthonormal with det +1")
        if self.scale <= 0:
            raise AlignmentFailure("scale must be positive")
        self.rotation, self.translation = R, np.asarray(self.translation, dtype=float)

    @classmethod
    def identity(cls, dim=3) -> "RigidTransform":
        return cls(np.eye(dim), np.zeros(dim))

    def apply(self, points):
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


def procrustes(src, dst, estimate_scale=False) -> RigidTransform:
    """Least-squares similarity (or rigid) map taking ``src`` rows onto ``dst`` rows."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(b.T @ a / len(src))
    sign = np.ones(len(S))
    sign[-1] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = (U * sign) @ Vt
    var = (a * a).sum() / len(src)
    scale = float((S * sign).sum() / var) if estimate_scale else 1.0
    return RigidTransform(R, mu_d - scale * R @ mu_s, scale)


def _check_rank(points, name):
    centred = points - points.mean(0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if len(points) < 3 or sv[0] == 0 or (len(sv) > 1 and sv[1] <= 1e-12 * sv[0]):
        raise AlignmentFailure(f"{name} is degenerate (fewer than 3 non-collinear points)")


def icp_align(source, target, estimate_scale: bool = False, max_iters: int = 100, tol: float = 1e-12):
    """Align ``source`` to ``target`` by nearest-neighbour ICP.

    Returns ``(transform, aligned, history)`` where ``history`` is the mean
    squared correspondence distance after each accepted iteration; it never
    increases.  With ``estimate_scale`` the iteration starts from a
    centroid-and-spread match.
    """
    src, dst = _points(source), _points(target)
    _check_rank(src, "source")
    _check_rank(dst, "target")
    tree = cKDTree(dst)
    if estimate_scale:
        s = np.sqrt(((dst - dst.mean(0)) ** 2).sum(1).mean() / ((src - src.mean(0)) ** 2).sum(1).mean())
        T = RigidTransform(np.eye(src.shape[1]), dst.mean(0) - s * src.mean(0), float(s))
    else:
        T = RigidTransform.identity(src.shape[1])
    d, idx = tree.query(T.apply(src))
    history = [float(np.mean(d * d))]
    for _ in range(max_iters):
        cand = procrustes(src, dst[idx], estimate_scale)
        d, new_idx = tree.query(cand.apply(src))
        obj = float(np.mean(d * d))
        if obj > history[-1]:
            break
        T, idx = cand, new_idx
        history.append(obj)
        if history[-2] - obj < tol:
            break
    return T, T.apply(src), history
