"""Keyframe pose graph with similarity edges and a staged robust solve.

Conventions
-----------
A keyframe ``i`` has a global similarity ``(s_i, R_i, c_i)`` mapping its
local-map coordinates to the world: ``X_w = s_i R_i^T X^(i) + c_i``. An edge
``i -> j`` stores ``K_j``'s pose read in ``K_i``'s local map (``R_ij``
world-to-camera rotation, ``c_ij`` camera centre) and the scale ratio
``s_ij = s_i / s_j``. Consistency therefore reads

    R_j = R_ij R_i,   c_j = c_i + s_i R_i^T c_ij,   s_j = s_i / s_ij.

Rotations, scales and positions are solved one after another, each as a
least-absolute-deviation problem.
"""
from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geometry import (Rotation, SimilarityTransform, exp_so3_matrix, geodesic_distance, log_so3_matrix,
                       sim3_compose, sim3_invert)

log = logging.getLogger(__name__)

DIRECT, EXTENDED, LOOP = "D", "E", "L"
QUAT_TOL = 1e-6


class DisconnectedGraphError(ValueError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__("pose graph is disconnected; components: %s" % self.components)


class PoseGraphFileError(ValueError):
    def __init__(self, msg, lineno=None):
        self.lineno = lineno
        super().__init__("line %d: %s" % (lineno, msg) if lineno else msg)


@dataclass
class Sim3Edge:
    from_kf: int
    to_kf: int
    scale: float
    rotation: np.ndarray      # R_ij
    position: np.ndarray      # c_ij
    kind: str = DIRECT
    outlier: bool = False
    injected: bool = False    # experiment bookkeeping: a deliberately false loop

    def __post_init__(self):
        if self.from_kf == self.to_kf:
            raise ValueError("edge endpoints must differ")
        if not self.scale > 0:
            raise ValueError("edge scale must be positive")
        if self.kind not in (DIRECT, EXTENDED, LOOP):
            raise ValueError("unknown edge kind %r" % self.kind)
        self.rotation = np.asarray(self.rotation.matrix if isinstance(self.rotation, Rotation)
                                   else self.rotation, dtype=float)
        self.position = np.asarray(self.position, dtype=float).reshape(3)

    def as_similarity(self) -> SimilarityTransform:
        """Map-j coordinates to map-i coordinates."""
        return SimilarityTransform(1.0 / self.scale, Rotation.from_matrix(self.rotation.T), self.position)


def edge_from_similarity(i, j, T: SimilarityTransform, kind=EXTENDED) -> Sim3Edge:
    return Sim3Edge(i, j, 1.0 / T.scale, T.rotation.matrix.T, T.translation, kind)


def compose_edges(e_ij: Sim3Edge, e_jk: Sim3Edge, kind=EXTENDED) -> Sim3Edge:
    """Edge i -> k obtained by chaining i -> j and j -> k."""
    if e_ij.to_kf != e_jk.from_kf:
        raise ValueError("edges do not chain")
    T = sim3_compose(e_ij.as_similarity(), e_jk.as_similarity())
    return edge_from_similarity(e_ij.from_kf, e_jk.to_kf, T, kind)


def invert_edge(e: Sim3Edge) -> Sim3Edge:
    T = sim3_invert(e.as_similarity())
    return replace(edge_from_similarity(e.to_kf, e.from_kf, T, e.kind), outlier=e.outlier, injected=e.injected)


@dataclass
class GlobalPoses:
    ids: list
    scales: np.ndarray
    rotations: np.ndarray     # world-to-camera
    positions: np.ndarray

    def index(self, kf) -> int:
        return self.ids.index(kf)

    def similarity(self, kf) -> SimilarityTransform:
        """Local map of ``kf`` to world."""
        i = self.index(kf)
        return SimilarityTransform(self.scales[i], Rotation.from_matrix(self.rotations[i].T), self.positions[i])

    def copy(self) -> GlobalPoses:
        return GlobalPoses(list(self.ids), self.scales.copy(), self.rotations.copy(), self.positions.copy())

    @classmethod
    def identity(cls, ids) -> GlobalPoses:
        n = len(ids)
        return cls(list(ids), np.ones(n), np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)))

    def max_difference(self, other: GlobalPoses) -> float:
        if list(self.ids) != list(other.ids):
            raise ValueError("different keyframe sets")
        return float(max(np.abs(self.scales - other.scales).max(initial=0),
                         np.abs(self.rotations - other.rotations).max(initial=0),
                         np.abs(self.positions - other.positions).max(initial=0)))


# -- robust linear solvers --------------------------------------------------

@dataclass
class SolveStats:
    inner: int = 0
    outer: int = 0
    objective: float = 0.0


def _weighted_lsq(A, b, w):
    Aw = A.multiply(w[:, None]).tocsr() if sp.issparse(A) else A * w[:, None]
    H = (A.T @ Aw)
    g = Aw.T @ b
    if sp.issparse(H):
        H = H.tocsc()
        x = spsolve(H, g)
    else:
        x = np.linalg.solve(H, g)
    return np.atleast_1d(np.asarray(x, dtype=float))


def irls(A, b, x0=None, loss="l1", eps=1e-6, delta=1.0, max_iters=100, rel_tol=1e-10):
    """Minimize ``sum rho(A x - b)`` by iteratively reweighted least squares.

    ``loss`` is "l1" (weights 1/max(|r|, eps)) or "huber" (threshold ``delta``).
    A warm start ``x0`` seeds the first weights from its residuals.
    Returns ``x, iterations, objective``.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)

    def weights(r):
        a = np.abs(r)
        if loss == "l1":
            return 1.0 / np.maximum(a, eps)
        if loss == "huber":
            return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))
        if loss == "l2":
            return np.ones_like(a)
        raise ValueError("unknown loss %r" % loss)

    def objective(r):
        a = np.abs(r)
        if loss == "l1":
            return float(a.sum())
        if loss == "huber":
            return float(np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta)).sum())
        return float(0.5 * (a * a).sum())

    if x0 is None:
        w = np.ones(len(b))
        x = None
        f_prev = np.inf
    else:
        x = np.asarray(x0, dtype=float)
        r = A @ x - b
        f_prev = objective(r)
        w = weights(r)
    it = 0
    for it in range(1, max_iters + 1):
        x_new = _weighted_lsq(A, b, w)
        r = A @ x_new - b
        f = objective(r)
        if x is not None and f > f_prev:
            # the reweighted step cannot increase the objective in exact
            # arithmetic; a tiny increase means we are at the floor
            break
        x = x_new
        done = np.isfinite(f_prev) and abs(f_prev - f) <= rel_tol * max(f_prev, 1e-300)
        f_prev = f
        if loss == "l2" or done or f == 0.0:
            break
        w = weights(r)
    return x, it, f_prev


def lp_l1(A, b):
    """Exact least-absolute-deviation solution via linear programming."""
    from scipy.optimize import linprog
    A = sp.csr_matrix(A)
    m, n = A.shape
    I = sp.identity(m, format="csr")
    # variables [x, t]; minimize sum t s.t. A x - t <= b, -A x - t <= -b
    A_ub = sp.vstack([sp.hstack([A, -I]), sp.hstack([-A, -I])]).tocsc()
    b_ub = np.concatenate([b, -b])
    c = np.concatenate([np.zeros(n), np.ones(m)])
    bounds = [(None, None)] * n + [(0, None)] * m
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError("LP solve failed: %s" % res.message)
    x = res.x[:n]
    return x, int(res.nit), float(np.abs(A @ x - b).sum())


def _robust_solve(A, b, x0, loss, method, stats: SolveStats, delta=1.0, eps=1e-6):
    if A.shape[1] == 0:
        # only the gauge keyframe: nothing to solve for
        return np.zeros(0)
    if x0 is not None and A.shape[0]:
        r = A @ x0 - b
        if np.abs(r).max() <= 1e-12 * max(1.0, float(np.abs(b).max())):
            # a warm start that already satisfies every edge is optimal
            stats.objective = float(np.abs(r).sum())
            return np.asarray(x0, dtype=float)
    if method == "lp" and loss == "l1":
        x, it, f = lp_l1(A, b)
    else:
        x, it, f = irls(A, b, x0, loss=loss, eps=eps, delta=delta)
    stats.inner += it
    stats.objective = f
    return x


# -- graph ---------------------------------------------------------------------

class PoseGraph:
    def __init__(self, keyframes=()):
        self.keyframes: list = []
        self.edges: list[Sim3Edge] = []
        for k in keyframes:
            self.add_keyframe(k)

    def add_keyframe(self, kf):
        if kf in self.keyframes:
            raise ValueError("keyframe %r already present" % (kf,))
        self.keyframes.append(kf)

    def add_edge(self, edge: Sim3Edge) -> Sim3Edge:
        for k in (edge.from_kf, edge.to_kf):
            if k not in self.keyframes:
                raise KeyError("unknown keyframe %r" % (k,))
        self.edges.append(edge)
        return edge

    def find_edge(self, i, j):
        for e in self.edges:
            if e.from_kf == i and e.to_kf == j:
                return e
            if e.from_kf == j and e.to_kf == i:
                return invert_edge(e)
        return None

    def neighbours(self, kf):
        out = set()
        for e in self.edges:
            if e.from_kf == kf:
                out.add(e.to_kf)
            elif e.to_kf == kf:
                out.add(e.from_kf)
        return out

    def active_edges(self, exclude=()):
        ex = set(id(e) for e in exclude)
        return [e for e in self.edges if id(e) not in ex]

    def components(self, edges=None):
        edges = self.edges if edges is None else edges
        parent = {k: k for k in self.keyframes}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for e in edges:
            ra, rb = find(e.from_kf), find(e.to_kf)
            if ra != rb:
                parent[rb] = ra
        comps: dict = {}
        for k in self.keyframes:
            comps.setdefault(find(k), []).append(k)
        return list(comps.values())

    def check_connected(self, edges=None):
        comps = self.components(edges)
        if len(comps) > 1:
            raise DisconnectedGraphError(comps)


# -- edge construction ----------------------------------------------------------

def relative_scale(points_i, points_j, center_i=None, center_j=None) -> float:
    """Median ratio of distances from a common anchor centre, map j over map i.

    ``points_i``/``points_j`` are the same physical points in the two maps and
    ``center_i``/``center_j`` one common camera centre expressed in each map.
    With world scales ``s_i, s_j`` the result estimates ``s_i / s_j``.
    """
    Pi = np.asarray(points_i, dtype=float).reshape(-1, 3)
    Pj = np.asarray(points_j, dtype=float).reshape(-1, 3)
    ci = np.zeros(3) if center_i is None else np.asarray(center_i, dtype=float)
    cj = np.zeros(3) if center_j is None else np.asarray(center_j, dtype=float)
    di = np.linalg.norm(Pi - ci, axis=1)
    dj = np.linalg.norm(Pj - cj, axis=1)
    ok = (di > 0) & np.isfinite(di) & np.isfinite(dj)
    if not ok.any():
        raise ValueError("no usable shared point for the relative scale")
    return float(np.median(dj[ok] / di[ok]))


def _shared_points(map_i, map_j):
    common, a, b = np.intersect1d(map_i.track_ids, map_j.track_ids, return_indices=True)
    return common, map_i.points[a], map_j.points[b]


def add_direct_edge(graph: PoseGraph, map_i, map_j) -> Sim3Edge:
    """Edge from ``map_i``'s keyframe to the next keyframe, read from ``map_i``."""
    kf_j = map_j.keyframe_id
    if kf_j not in map_i.frame_ids:
        raise KeyError("keyframe %r has no pose in the local map of %r" % (kf_j, map_i.keyframe_id))
    R, c = map_i.pose_of(kf_j)
    _, Pi, Pj = _shared_points(map_i, map_j)
    s = relative_scale(Pi, Pj, c, np.zeros(3))
    return graph.add_edge(Sim3Edge(map_i.keyframe_id, kf_j, s, R, c, DIRECT))


def add_extended_edge(graph: PoseGraph, map_k, map_j, via: Sim3Edge, direct: Sim3Edge, shared_tracks: int,
                      min_shared=50):
    """Edge K_k -> K_j composed from ``via`` (k -> i) and ``direct`` (i -> j).

    Created only when the two keyframes share strictly more than
    ``min_shared`` tracks; returns None otherwise.
    """
    if shared_tracks <= min_shared:
        return None
    e = compose_edges(via, direct, EXTENDED)
    if map_k is not None and map_j is not None:
        _, Pk, Pj = _shared_points(map_k, map_j)
        if len(Pk):
            e.scale = relative_scale(Pk, Pj, e.position, np.zeros(3))
    return graph.add_edge(e)


def loop_edge(graph: PoseGraph, map_i, map_j, data, min_shared=12, pnp_config=None, seed=0):
    """Loop edge K_i -> K_j from PnP on map-i points, refined by two-camera BA.

    Returns None when the candidate lacks support.
    """
    from .pnp import PnPFailure, pnp_ransac
    from .rank1vo import LocalMap
    from .refine import gather_observations, local_bundle_adjust

    fr = data.frame(map_j.keyframe_id)
    common, a, b = np.intersect1d(map_i.track_ids, fr.ids, return_indices=True)
    if len(common) < min_shared:
        return None
    X = map_i.points[a]
    try:
        res = pnp_ransac(X, fr.pixels[b], data.intrinsics, pnp_config, seed=seed)
    except PnPFailure:
        return None
    if res.inliers.sum() < 6:
        return None
    inl = res.inliers
    R, c = res.rotation, res.position
    # two-camera refinement over the shared inlier points
    if np.linalg.norm(c) > 0:
        two = LocalMap(map_i.keyframe_id, [map_i.keyframe_id, map_j.keyframe_id],
                       np.stack([np.eye(3), R]), np.stack([np.zeros(3), c]), common[inl],
                       map_i.anchors[a[inl]], map_i.inv_depth[a[inl]])
        obs = gather_observations(two, data)
        # the point cloud pins the scale, so the distance is left free
        out = local_bundle_adjust(two, obs, data.intrinsics, fix_scale=False)
        R, c = out.map.rotations[1], out.map.positions[1]
    _, Pi, Pj = _shared_points(map_i, map_j)
    if len(Pi) == 0:
        return None
    s = relative_scale(Pi, Pj, c, np.zeros(3))
    return graph.add_edge(Sim3Edge(map_i.keyframe_id, map_j.keyframe_id, s, R, c, LOOP))


# -- staged solve -----------------------------------------------------------------

@dataclass
class SolveConfig:
    loss: str = "l1"              # "l1" | "huber" | "l2"
    method: str = "lp"            # "lp" | "irls"; lp applies to the l1 loss only
    huber_delta: float = 1.0
    eps: float = 1e-6
    rot_tol: float = 1e-8
    rot_max_outer: int = 50


@dataclass
class SolveReport:
    poses: GlobalPoses
    rotation: SolveStats = field(default_factory=SolveStats)
    scale: SolveStats = field(default_factory=SolveStats)
    position: SolveStats = field(default_factory=SolveStats)

    @property
    def inner_iterations(self) -> int:
        return self.rotation.inner + self.scale.inner + self.position.inner


def _unknown_index(ids, gauge):
    idx = {}
    for k in ids:
        if k != gauge:
            idx[k] = len(idx)
    return idx


def _rotation_objective(edges, pos, R, cfg) -> float:
    r = np.array([log_so3_matrix(e.rotation @ R[pos[e.from_kf]] @ R[pos[e.to_kf]].T) for e in edges]).ravel()
    a = np.abs(r)
    if cfg.loss == "l1":
        return float(a.sum())
    if cfg.loss == "huber":
        dl = cfg.huber_delta
        return float(np.where(a <= dl, 0.5 * a * a, dl * (a - 0.5 * dl)).sum())
    return float(0.5 * (a * a).sum())


def solve_rotations(graph: PoseGraph, init: GlobalPoses, edges=None, config: SolveConfig | None = None,
                    stats: SolveStats | None = None, warm=False) -> np.ndarray:
    """Iterated linearized robust rotation averaging; gauge keyframe stays at identity."""
    cfg = config or SolveConfig()
    stats = stats if stats is not None else SolveStats()
    edges = graph.edges if edges is None else edges
    graph.check_connected(edges)
    ids = init.ids
    gauge = ids[0]
    pos = {k: i for i, k in enumerate(ids)}
    uidx = _unknown_index(ids, gauge)
    R = init.rotations.copy()
    R[pos[gauge]] = np.eye(3)
    n = 3 * len(uidx)
    delta_prev = None
    for outer in range(1, cfg.rot_max_outer + 1):
        rows, cols, vals = [], [], []
        b = np.zeros(3 * len(edges))
        for e_i, e in enumerate(edges):
            i, j = pos[e.from_kf], pos[e.to_kf]
            r = log_so3_matrix(e.rotation @ R[i] @ R[j].T)
            base = 3 * e_i
            b[base:base + 3] = -r
            if e.from_kf in uidx:
                ui = 3 * uidx[e.from_kf]
                for a in range(3):
                    for c in range(3):
                        rows.append(base + a)
                        cols.append(ui + c)
                        vals.append(e.rotation[a, c])
            if e.to_kf in uidx:
                uj = 3 * uidx[e.to_kf]
                for a in range(3):
                    rows.append(base + a)
                    cols.append(uj + a)
                    vals.append(-1.0)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(b), n))
        x0 = np.zeros(n) if (warm or outer > 1) else None
        d = _robust_solve(A, b, x0, cfg.loss, cfg.method, stats, cfg.huber_delta, cfg.eps)
        d = d.reshape(-1, 3)
        # the linearization is poor for large residuals (false loops near pi);
        # halve the step until the true robust objective stops increasing
        f0 = _rotation_objective(edges, pos, R, cfg)
        t = 1.0
        for _ in range(30):
            R_new = R.copy()
            for k, u in uidx.items():
                R_new[pos[k]] = exp_so3_matrix(t * d[u]) @ R[pos[k]]
            if _rotation_objective(edges, pos, R_new, cfg) <= f0 * (1 + 1e-12) + 1e-300:
                break
            t *= 0.5
        else:
            t = 0.0
            R_new = R
        R = R_new
        stats.outer = outer
        step = t * float(np.abs(d).max(initial=0.0))
        if step < cfg.rot_tol:
            break
        if delta_prev is not None and step > 0.999 * delta_prev and step < 1e-6:
            break
        delta_prev = step
    # re-orthonormalize
    for k in range(len(R)):
        U, _, Vt = np.linalg.svd(R[k])
        R[k] = U @ Vt
    return R


def solve_scales(graph: PoseGraph, ids, edges=None, config: SolveConfig | None = None,
                 stats: SolveStats | None = None, init=None) -> np.ndarray:
    cfg = config or SolveConfig()
    stats = stats if stats is not None else SolveStats()
    edges = graph.edges if edges is None else edges
    graph.check_connected(edges)
    gauge = ids[0]
    uidx = _unknown_index(ids, gauge)
    rows, cols, vals = [], [], []
    b = np.zeros(len(edges))
    for e_i, e in enumerate(edges):
        # log s_i - log s_j = log s_ij
        b[e_i] = math.log(e.scale)
        if e.from_kf in uidx:
            rows.append(e_i)
            cols.append(uidx[e.from_kf])
            vals.append(1.0)
        if e.to_kf in uidx:
            rows.append(e_i)
            cols.append(uidx[e.to_kf])
            vals.append(-1.0)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(edges), len(uidx)))
    x0 = None
    if init is not None:
        x0 = np.array([math.log(init[ids.index(k)]) for k in uidx])
    x = _robust_solve(A, b, x0, cfg.loss, cfg.method, stats, cfg.huber_delta, cfg.eps)
    out = np.ones(len(ids))
    for k, u in uidx.items():
        out[ids.index(k)] = math.exp(x[u])
    return out


def solve_positions(graph: PoseGraph, ids, rotations, scales, edges=None, config: SolveConfig | None = None,
                    stats: SolveStats | None = None, init=None) -> np.ndarray:
    cfg = config or SolveConfig()
    stats = stats if stats is not None else SolveStats()
    edges = graph.edges if edges is None else edges
    graph.check_connected(edges)
    gauge = ids[0]
    pos = {k: i for i, k in enumerate(ids)}
    uidx = _unknown_index(ids, gauge)
    rows, cols, vals = [], [], []
    b = np.zeros(3 * len(edges))
    for e_i, e in enumerate(edges):
        i = pos[e.from_kf]
        # c_j - c_i = s_i R_i^T c_ij, component-wise
        b[3 * e_i:3 * e_i + 3] = scales[i] * rotations[i].T @ e.position
        for a in range(3):
            if e.to_kf in uidx:
                rows.append(3 * e_i + a)
                cols.append(3 * uidx[e.to_kf] + a)
                vals.append(1.0)
            if e.from_kf in uidx:
                rows.append(3 * e_i + a)
                cols.append(3 * uidx[e.from_kf] + a)
                vals.append(-1.0)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(b), 3 * len(uidx)))
    x0 = None
    if init is not None:
        x0 = np.concatenate([init[pos[k]] for k in uidx]) if uidx else np.zeros(0)
    x = _robust_solve(A, b, x0, cfg.loss, cfg.method, stats, cfg.huber_delta, cfg.eps)
    out = np.zeros((len(ids), 3))
    for k, u in uidx.items():
        out[pos[k]] = x[3 * u:3 * u + 3]
    return out


def chain_initialization(graph: PoseGraph, edges=None, ids=None) -> GlobalPoses:
    """Poses propagated along a spanning tree from the gauge keyframe.

    The tree grows breadth-first over direct edges first, then extended
    edges, and uses loop edges only for keyframes still unreached, so a
    false loop cannot seed the initial guess when odometry connects.
    """
    edges = graph.edges if edges is None else edges
    ids = list(graph.keyframes if ids is None else ids)
    graph.check_connected(edges)
    gp = GlobalPoses.identity(ids)
    pos = {k: i for i, k in enumerate(ids)}
    done = [ids[0]]
    seen = {ids[0]}
    for allowed in ((DIRECT,), (DIRECT, EXTENDED), (DIRECT, EXTENDED, LOOP)):
        adj: dict = {k: [] for k in ids}
        for e in edges:
            if e.kind in allowed:
                adj[e.from_kf].append(e)
                adj[e.to_kf].append(e)
        frontier = list(done)
        while frontier:
            nxt = []
            for k in frontier:
                for e in adj[k]:
                    other = e.to_kf if e.from_kf == k else e.from_kf
                    if other in seen:
                        continue
                    ee = e if e.from_kf == k else invert_edge(e)
                    _propagate(gp, pos[k], pos[other], ee)
                    seen.add(other)
                    nxt.append(other)
            done += nxt
            frontier = nxt
    return gp


def _propagate(gp: GlobalPoses, i, j, e: Sim3Edge):
    gp.rotations[j] = e.rotation @ gp.rotations[i]
    gp.positions[j] = gp.positions[i] + gp.scales[i] * gp.rotations[i].T @ e.position
    gp.scales[j] = gp.scales[i] / e.scale


def solve(graph: PoseGraph, init: GlobalPoses | None = None, config: SolveConfig | None = None,
          exclude=(), warm=False) -> SolveReport:
    """Three-stage solve: rotations, then scales, then positions."""
    cfg = config or SolveConfig()
    edges = graph.active_edges(exclude)
    if init is None:
        init = chain_initialization(graph, edges)
        warm_lin = False
    else:
        warm_lin = warm
    ids = list(init.ids)
    rep = SolveReport(init.copy())
    R = solve_rotations(graph, init, edges, cfg, rep.rotation, warm=warm_lin)
    s = solve_scales(graph, ids, edges, cfg, rep.scale, init=init.scales if warm_lin else None)
    c = solve_positions(graph, ids, R, s, edges, cfg, rep.position, init=init.positions if warm_lin else None)
    rep.poses = GlobalPoses(ids, s, R, c)
    return rep


def solve_l1(graph, init=None, method="lp", exclude=()) -> SolveReport:
    return solve(graph, init, SolveConfig(loss="l1", method=method), exclude)


def solve_l2_baseline(graph, init=None, delta=1.0, exclude=()) -> SolveReport:
    """Same staged structure with a Huber loss; the contrast method for false loops."""
    return solve(graph, init, SolveConfig(loss="huber", huber_delta=delta), exclude)


def incremental_update(graph: PoseGraph, new_kf, previous: GlobalPoses | None,
                       config: SolveConfig | None = None) -> SolveReport:
    """Re-solve after ``new_kf`` joined, warm-started from ``previous``."""
    if previous is None or not previous.ids:
        gp = GlobalPoses.identity([new_kf])
        return SolveReport(gp)
    if not graph.neighbours(new_kf):
        raise DisconnectedGraphError([previous.ids, [new_kf]])
    init = previous.copy()
    ids = list(previous.ids) + [new_kf]
    init = GlobalPoses(ids, np.append(init.scales, 1.0), np.concatenate([init.rotations, np.eye(3)[None]]),
                       np.concatenate([init.positions, np.zeros((1, 3))]))
    # seed the newcomer from the edge to its most recent solved neighbour
    nb = [k for k in previous.ids if k in graph.neighbours(new_kf)]
    anchor = nb[-1]
    e = graph.find_edge(anchor, new_kf)
    _propagate(init, ids.index(anchor), len(ids) - 1, e)
    return solve(graph, init, config, warm=True)


# -- residuals & outliers ---------------------------------------------------------

@dataclass
class EdgeResidual:
    rotation: float
    log_scale: float
    position: float


def edge_residuals(graph: PoseGraph, poses: GlobalPoses, edges=None) -> list[EdgeResidual]:
    edges = graph.edges if edges is None else edges
    out = []
    for e in edges:
        i, j = poses.index(e.from_kf), poses.index(e.to_kf)
        Ri, Rj = poses.rotations[i], poses.rotations[j]
        rot = float(np.linalg.norm(log_so3_matrix(e.rotation @ Ri @ Rj.T)))
        ls = math.log(poses.scales[i]) - math.log(poses.scales[j]) - math.log(e.scale)
        pr = (poses.positions[j] - poses.positions[i]) - poses.scales[i] * Ri.T @ e.position
        out.append(EdgeResidual(rot, float(ls), float(np.linalg.norm(pr))))
    return out


@dataclass
class OutlierThresholds:
    rotation: float = math.radians(5.0)
    log_scale: float = math.log(1.5)
    position_factor: float = 3.0


def flag_edges(graph: PoseGraph, poses: GlobalPoses, th: OutlierThresholds | None = None) -> list[Sim3Edge]:
    th = th or OutlierThresholds()
    res = edge_residuals(graph, poses)
    lengths = [np.linalg.norm(poses.positions[poses.index(e.to_kf)] - poses.positions[poses.index(e.from_kf)])
               for e in graph.edges]
    med = float(np.median(lengths)) if lengths else 0.0
    flagged = []
    for e, r in zip(graph.edges, res):
        if r.rotation > th.rotation or abs(r.log_scale) > th.log_scale or r.position > th.position_factor * med:
            flagged.append(e)
    return flagged


def mark_outlier_edges(graph: PoseGraph, report: SolveReport, th: OutlierThresholds | None = None,
                       config: SolveConfig | None = None):
    """Flag edges with large residuals, drop flagged loops and re-solve once.

    Returns ``(flagged edges, final report)``. Direct edges may be flagged
    but are never excluded.
    """
    flagged = flag_edges(graph, report.poses, th)
    for e in graph.edges:
        e.outlier = any(e is f for f in flagged)
    drop = [e for e in flagged if e.kind == LOOP]
    if not drop:
        return flagged, report
    try:
        final = solve(graph, None, config, exclude=drop)
    except DisconnectedGraphError:
        return flagged, report
    return flagged, final


# -- synthetic graphs & false loops ----------------------------------------------

def exact_edge(gt: GlobalPoses, i, j, kind) -> Sim3Edge:
    a, b = gt.index(i), gt.index(j)
    Ri, Rj = gt.rotations[a], gt.rotations[b]
    return Sim3Edge(i, j, gt.scales[a] / gt.scales[b], Rj @ Ri.T,
                    Ri @ (gt.positions[b] - gt.positions[a]) / gt.scales[a], kind)


def synthetic_trajectory(n_kf, seed=0, radius=5.0) -> GlobalPoses:
    """Keyframes on a loop with smooth heading and random local-map scales."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 31])))
    ids = list(range(n_kf))
    ang = 2 * np.pi * np.arange(n_kf) / n_kf
    pos = np.stack([radius * np.cos(ang), radius * np.sin(ang), 0.3 * np.sin(3 * ang)], axis=1)
    pos -= pos[0]
    rots = []
    for k in range(n_kf):
        Rk = exp_so3_matrix(np.array([0.0, ang[k], 0.0]) + rng.normal(0, 0.05, 3))
        rots.append(Rk)
    rots = np.array(rots)
    rots = rots @ rots[0].T
    scales = np.exp(rng.uniform(-0.5, 0.5, n_kf))
    scales /= scales[0]
    return GlobalPoses(ids, scales, rots, pos)


def synthetic_graph(n_kf=20, n_loops=5, seed=0, extended=True, rot_noise_deg=0.0, scale_noise=0.0,
                    pos_noise=0.0, loop_gap=4):
    """Pose graph with exact (or noise-perturbed) edges from a known trajectory.

    Returns ``(graph, ground truth)``. Loops join keyframes more than
    ``loop_gap - 1`` apart, spread evenly over the sequence.
    """
    gt = synthetic_trajectory(n_kf, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 37])))
    g = PoseGraph(gt.ids)
    pairs = [(k, k + 1, DIRECT) for k in range(n_kf - 1)]
    if extended:
        pairs += [(k, k + 2, EXTENDED) for k in range(n_kf - 2)]
    cand = [(i, j) for i in range(n_kf) for j in range(i + loop_gap, n_kf)]
    if n_loops:
        pick = np.linspace(0, len(cand) - 1, n_loops + 2)[1:-1].round().astype(int)
        pairs += [(cand[p][0], cand[p][1], LOOP) for p in pick]
    for i, j, kind in pairs:
        e = exact_edge(gt, i, j, kind)
        if rot_noise_deg:
            e.rotation = exp_so3_matrix(rng.normal(0, math.radians(rot_noise_deg), 3)) @ e.rotation
        if scale_noise:
            e.scale *= math.exp(rng.normal(0, scale_noise))
        if pos_noise:
            e.position = e.position + rng.normal(0, pos_noise, 3) * max(np.linalg.norm(e.position), 1e-12)
        g.add_edge(e)
    return g, gt


def inject_false_loops(graph: PoseGraph, count, seed=0, diameter=None, loop_gap=4) -> list[Sim3Edge]:
    """Add ``count`` Loop edges with random similarity between distant keyframes."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 41])))
    ids = graph.keyframes
    if diameter is None:
        diameter = 1.0
    existing = {(e.from_kf, e.to_kf) for e in graph.edges} | {(e.to_kf, e.from_kf) for e in graph.edges}
    cand = [(ids[a], ids[b]) for a in range(len(ids)) for b in range(a + loop_gap, len(ids))
            if (ids[a], ids[b]) not in existing]
    order = rng.permutation(len(cand))
    out = []
    for k in order[:count]:
        i, j = cand[k]
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = Rotation(q if q[0] >= 0 else -q).matrix
        s = math.exp(rng.uniform(-math.log(2), math.log(2)))
        d = rng.normal(size=3)
        c = d / np.linalg.norm(d) * diameter * rng.uniform(0.5, 1.0)
        e = Sim3Edge(i, j, s, R, c, LOOP, injected=True)
        out.append(graph.add_edge(e))
    return out


def gauge_align(poses: GlobalPoses, reference: GlobalPoses) -> GlobalPoses:
    """Re-express ``poses`` so its first keyframe matches ``reference``'s first keyframe."""
    T0 = reference.similarity(reference.ids[0])
    P0 = poses.similarity(poses.ids[0])
    G = sim3_compose(T0, sim3_invert(P0))   # world' <- world
    out = poses.copy()
    for k in range(len(out.ids)):
        Tk = sim3_compose(G, poses.similarity(out.ids[k]))
        out.scales[k] = Tk.scale
        out.rotations[k] = Tk.rotation.matrix.T
        out.positions[k] = Tk.translation
    return out


def pose_errors(poses: GlobalPoses, gt: GlobalPoses) -> dict:
    """Errors after fixing the gauge on the first keyframe."""
    al = gauge_align(poses, gt)
    rot = [geodesic_distance(Rotation.from_matrix(a), Rotation.from_matrix(b))
           for a, b in zip(al.rotations, gt.rotations)]
    return {
        "rotation_max": float(max(rot)),
        "log_scale_max": float(np.abs(np.log(al.scales / gt.scales)).max()),
        "position_max": float(np.linalg.norm(al.positions - gt.positions, axis=1).max()),
        "position_mean": float(np.linalg.norm(al.positions - gt.positions, axis=1).mean()),
    }


# -- file format -------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def _quat_of(R):
    return Rotation.from_matrix(R).quat


def format_pose_graph(graph: PoseGraph, solution: GlobalPoses | None = None) -> str:
    lines = ["KF %d" % k for k in graph.keyframes]
    for e in graph.edges:
        vals = [e.scale] + list(_quat_of(e.rotation)) + list(e.position)
        lines.append("EDGE %d %d %s %s" % (e.from_kf, e.to_kf, e.kind, " ".join(_fmt(v) for v in vals)))
    if solution is not None:
        lines.extend(format_solution(solution).splitlines())
    return "\n".join(lines) + "\n"


def format_solution(sol: GlobalPoses) -> str:
    lines = []
    for k, s, R, c in zip(sol.ids, sol.scales, sol.rotations, sol.positions):
        vals = [s] + list(_quat_of(R)) + list(c)
        lines.append("SOLUTION %d %s" % (k, " ".join(_fmt(v) for v in vals)))
    return "\n".join(lines) + ("\n" if lines else "")


def _quat(vals, lineno):
    q = np.asarray(vals, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise PoseGraphFileError("quaternion not normalized", lineno)
    return Rotation(q).matrix


def parse_pose_graph(source):
    """Read a pose-graph file; returns ``(graph, solution or None)``."""
    if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source):
        with open(source) as fh:
            return parse_pose_graph(fh)
    if isinstance(source, str):
        source = io.StringIO(source)
    g = PoseGraph()
    sol = {}
    for lineno, raw in enumerate(source, 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "KF":
                if len(args) != 1:
                    raise PoseGraphFileError("KF needs one id", lineno)
                g.add_keyframe(int(args[0]))
            elif tag == "EDGE":
                if len(args) != 11:
                    raise PoseGraphFileError("EDGE needs 11 fields", lineno)
                i, j, kind = int(args[0]), int(args[1]), args[2]
                v = [float(x) for x in args[3:]]
                g.add_edge(Sim3Edge(i, j, v[0], _quat(v[1:5], lineno), v[5:8], kind))
            elif tag == "SOLUTION":
                if len(args) != 9:
                    raise PoseGraphFileError("SOLUTION needs 9 fields", lineno)
                v = [float(x) for x in args[1:]]
                sol[int(args[0])] = (v[0], _quat(v[1:5], lineno), np.array(v[5:8]))
            else:
                raise PoseGraphFileError("unknown record %r" % tag, lineno)
        except PoseGraphFileError:
            raise
        except (ValueError, KeyError) as exc:
            raise PoseGraphFileError(str(exc), lineno) from None
    solution = None
    if sol:
        ids = list(sol)
        solution = GlobalPoses(ids, np.array([sol[k][0] for k in ids]), np.array([sol[k][1] for k in ids]),
                               np.array([sol[k][2] for k in ids]))
    return g, solution
