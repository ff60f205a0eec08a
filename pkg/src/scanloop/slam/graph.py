"""Pose graph over keyframes and its batch optimizer."""

import copy
import logging
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from scanloop.common.exceptions import ContractError
from scanloop.geometry.transform import RigidTransform, se3_exp, se3_log

logger = logging.getLogger(__name__)

EDGE_KINDS = ("odometry", "loop", "relocalization")
_JACOBIAN_STEP = 1e-6
_MAX_DAMPING = 1e10


@dataclass(frozen=True, eq=False)
class Edge:
    """Constraint T_source^-1 T_target ~ measurement."""

    source: int
    target: int
    measurement: RigidTransform
    kind: str = "odometry"
    weight: float = 1.0
    reliability: float | None = None

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ContractError(f"unknown edge kind {self.kind!r}")
        if self.weight <= 0:
            raise ContractError(f"edge weight must be positive, got {self.weight}")
        if self.kind != "odometry" and self.reliability is None:
            raise ContractError(f"{self.kind} edges carry the solver reliability score")
        if self.source == self.target:
            raise ContractError("self-loop edge")

    def residual(self, source: RigidTransform, target: RigidTransform) -> np.ndarray:
        error = self.measurement.inverse() @ source.inverse() @ target
        return np.sqrt(self.weight) * se3_log(error)


@dataclass
class PGOResult:
    poses: dict[int, RigidTransform]
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "converged": self.converged,
        }


class PoseGraph:
    """Keyframe poses plus relative constraints; safe to mutate from several threads."""

    def __init__(self):
        self.nodes: dict[int, RigidTransform] = {}
        self.edges: list[Edge] = []
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.nodes)

    # ── Mutation ──

    def add_node(self, node_id: int, pose: RigidTransform) -> None:
        with self._lock:
            if node_id in self.nodes:
                raise ContractError(f"node {node_id} already exists")
            self.nodes[node_id] = pose

    def add_edge(self, edge: Edge) -> Edge:
        with self._lock:
            for end in (edge.source, edge.target):
                if end not in self.nodes:
                    raise ContractError(f"edge references unknown node {end}")
            self.edges.append(edge)
        return edge

    def remove_edges(self, target: int, kind: str) -> int:
        with self._lock:
            kept = [e for e in self.edges if not (e.target == target and e.kind == kind)]
            removed = len(self.edges) - len(kept)
            self.edges = kept
        return removed

    def pose(self, node_id: int) -> RigidTransform:
        with self._lock:
            return self.nodes[node_id]

    def shift_from(self, node_id: int, correction: RigidTransform) -> None:
        """Left-multiply ``correction`` onto ``node_id`` and every later node."""
        with self._lock:
            for nid in self.nodes:
                if nid >= node_id:
                    self.nodes[nid] = correction @ self.nodes[nid]

    def apply(self, poses: dict[int, RigidTransform]) -> RigidTransform:
        """Install optimized poses; nodes added since the snapshot follow the newest one.

        Returns the correction applied to the newest optimized node.
        """
        with self._lock:
            newest = max(poses)
            correction = poses[newest] @ self.nodes[newest].inverse()
            for nid in list(self.nodes):
                if nid in poses:
                    self.nodes[nid] = poses[nid]
                else:
                    self.nodes[nid] = correction @ self.nodes[nid]
        return correction

    def snapshot(self) -> "PoseGraph":
        with self._lock:
            clone = PoseGraph()
            clone.nodes = dict(self.nodes)
            clone.edges = copy.copy(self.edges)
        return clone

    # ── Queries ──

    def edges_of(self, kind: str) -> list[Edge]:
        with self._lock:
            return [e for e in self.edges if e.kind == kind]

    def is_connected(self) -> bool:
        with self._lock:
            ids = list(self.nodes)
            if len(ids) <= 1:
                return True
            position = {nid: i for i, nid in enumerate(ids)}
            rows = [position[e.source] for e in self.edges]
            cols = [position[e.target] for e in self.edges]
        adjacency = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        count, _ = connected_components(adjacency, directed=False)
        return count == 1

    def cost(self, poses: dict[int, RigidTransform] | None = None) -> float:
        with self._lock:
            poses = self.nodes if poses is None else poses
            return _cost(self.edges, poses)


def _cost(edges: list[Edge], poses: dict[int, RigidTransform]) -> float:
    total = 0.0
    for e in edges:
        r = e.residual(poses[e.source], poses[e.target])
        total += float(r @ r)
    return total


def _edge_jacobians(
    edge: Edge, source: RigidTransform, target: RigidTransform
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences under right perturbation T <- T exp(delta)."""
    J_s = np.empty((6, 6))
    J_t = np.empty((6, 6))
    h = _JACOBIAN_STEP
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        plus, minus = se3_exp(step), se3_exp(-step)
        J_s[:, k] = edge.residual(source @ plus, target) - edge.residual(source @ minus, target)
        J_t[:, k] = edge.residual(source, target @ plus) - edge.residual(source, target @ minus)
    return J_s / (2 * h), J_t / (2 * h)


def _linearize(
    edges: list[Edge], poses: dict[int, RigidTransform], column: dict[int, int]
) -> tuple[coo_matrix, np.ndarray]:
    rows, cols, vals = [], [], []
    residuals = np.empty(6 * len(edges))
    for i, e in enumerate(edges):
        src, tgt = poses[e.source], poses[e.target]
        residuals[6 * i : 6 * i + 6] = e.residual(src, tgt)
        J_s, J_t = _edge_jacobians(e, src, tgt)
        for node, J in ((e.source, J_s), (e.target, J_t)):
            if node not in column:
                continue
            r_idx, c_idx = np.meshgrid(
                np.arange(6 * i, 6 * i + 6),
                np.arange(column[node], column[node] + 6),
                indexing="ij",
            )
            rows.append(r_idx.ravel())
            cols.append(c_idx.ravel())
            vals.append(J.ravel())
    shape = (6 * len(edges), 6 * len(column))
    if not vals:
        return coo_matrix(shape), residuals
    J = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape)
    return J, residuals


def _retract(
    poses: dict[int, RigidTransform], column: dict[int, int], delta: np.ndarray
) -> dict[int, RigidTransform]:
    out = dict(poses)
    for node, c in column.items():
        out[node] = poses[node] @ se3_exp(delta[c : c + 6])
    return out


def optimize_pose_graph(
    graph: PoseGraph,
    max_iterations: int = 50,
    damping: float = 1e-4,
    tolerance: float = 1e-12,
) -> PGOResult:
    """Damped Gauss-Newton over node poses; the first node stays fixed.

    Minimizes sum_e w_e |log(Z_e^-1 T_i^-1 T_j)|^2. Only steps that lower the
    cost are accepted, so ``history`` is non-increasing. Running out of
    iterations returns the best iterate with ``converged=False``.
    """
    snapshot = graph.snapshot()
    poses = dict(snapshot.nodes)
    edges = snapshot.edges
    if len(poses) <= 1 or not edges:
        cost = _cost(edges, poses)
        return PGOResult(poses, cost, cost, 0, True, [cost])
    if not snapshot.is_connected():
        raise ContractError("pose graph is not connected")

    ids = list(poses)
    column = {nid: 6 * i for i, nid in enumerate(ids[1:])}
    cost = _cost(edges, poses)
    initial = cost
    history = [cost]
    lam = damping
    converged = cost <= tolerance
    iterations = 0

    while not converged and iterations < max_iterations:
        iterations += 1
        J, r = _linearize(edges, poses, column)
        J = J.tocsr()
        H = (J.T @ J).tocsc()
        g = J.T @ r
        accepted = False
        while lam < _MAX_DAMPING:
            A = H + diags(lam * (H.diagonal() + 1.0)).tocsc()
            delta = spsolve(A, -g)
            candidate = _retract(poses, column, delta)
            new_cost = _cost(edges, candidate)
            if new_cost < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left at any damping
            converged = True
            break
        improvement = cost - new_cost
        poses, cost = candidate, new_cost
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if cost <= tolerance or improvement <= tolerance * max(1.0, cost):
            converged = True

    if not converged:
        logger.warning(
            "pose graph optimization hit the iteration limit",
            extra={"fields": {"iterations": iterations, "cost": cost, "initial": initial}},
        )
    else:
        logger.debug(
            "pose graph optimized",
            extra={"fields": {"iterations": iterations, "cost": cost, "initial": initial}},
        )
    return PGOResult(poses, initial, cost, iterations, converged, history)
