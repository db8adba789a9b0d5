"""
SIM(3) pose-graph optimization for loop closure.

Keyframe poses are lifted to similarities with unit scale and linked by
odometry edges; a confirmed loop adds one edge whose measurement carries
the accumulated scale drift. The residual of an edge i -> j is
``log(dS_ij^-1 * S_j * S_i^-1)``.
"""

import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .eval_metrics import umeyama_alignment
    from .exceptions import (
        DegenerateCollinearException, DisconnectedGraphException, LoopRejectedException,
        NotEnoughConstraintsException, SingularSystemException, SlamException, ValidationException,
    )
    from .lie_geometry import (
        Pose, SimPose, adjoint_sim3, compose, inverse, relative, retract_sim3,
        sim3_left_jacobian_inv, sim3_log,
    )
    from .utils import LOGGER_NAME
    from .window_ba import Patch, PatchKey
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from eval_metrics import umeyama_alignment
    from exceptions import (
        DegenerateCollinearException, DisconnectedGraphException, LoopRejectedException,
        NotEnoughConstraintsException, SingularSystemException, SlamException, ValidationException,
    )
    from lie_geometry import (
        Pose, SimPose, adjoint_sim3, compose, inverse, relative, retract_sim3,
        sim3_left_jacobian_inv, sim3_log,
    )
    from utils import LOGGER_NAME
    from window_ba import Patch, PatchKey


EDGE_KINDS = ('odometry', 'loop')
DEFAULT_MAX_ITERS = 50
STEP_TOLERANCE = 1e-8

logger = logging.getLogger(LOGGER_NAME)


@dataclass
class Sim3Node:
    frame_id: int
    pose: SimPose
    fixed: bool = False


@dataclass
class Sim3Edge:
    src: int
    dst: int
    measurement: SimPose
    kind: str = 'odometry'
    information: np.ndarray = field(default_factory=lambda: np.eye(7))

    def __post_init__(self):
        if self.src == self.dst:
            raise ValidationException(f"Pose-graph edge connects node {self.src} to itself")
        if self.kind not in EDGE_KINDS:
            raise ValidationException(f"Invalid edge kind: {self.kind}. Must be one of {', '.join(EDGE_KINDS)}")
        self.information = np.asarray(self.information, dtype=float).reshape(7, 7)


@dataclass
class PoseGraph:
    nodes: List[Sim3Node] = field(default_factory=list)
    edges: List[Sim3Edge] = field(default_factory=list)

    def node(self, frame_id: int) -> Sim3Node:
        for node in self.nodes:
            if node.frame_id == frame_id:
                return node
        raise ValidationException(f"Unknown pose-graph node: {frame_id}")

    def set_fixed(self, frame_id: int) -> None:
        """Make ``frame_id`` the only fixed node."""
        self.node(frame_id)
        for node in self.nodes:
            node.fixed = node.frame_id == frame_id

    def loop_edges(self) -> List[Sim3Edge]:
        return [e for e in self.edges if e.kind == 'loop']


@dataclass
class PGOResult:
    initial_cost: float
    final_cost: float
    iterations: int
    loop_residuals_before: List[float]
    loop_residuals_after: List[float]
    converged: bool


@dataclass
class LoopMeasurement:
    """Similarity constraint between an old keyframe and the current one."""

    measurement: SimPose
    world_alignment: SimPose
    inliers: int
    rmse: float


def lift_trajectory(keyframe_poses: Sequence[Pose],
                    frame_ids: Optional[Sequence[int]] = None) -> Tuple[List[Sim3Node], List[Sim3Edge]]:
    """
    Lift SE(3) keyframe poses to unit-scale SIM(3) nodes chained by odometry edges.

    Raises:
        ValidationException: With fewer than 2 keyframes
    """
    if len(keyframe_poses) < 2:
        raise ValidationException(f"Need at least 2 keyframes to build a pose graph, got {len(keyframe_poses)}")
    ids = list(range(len(keyframe_poses))) if frame_ids is None else list(frame_ids)
    nodes = [Sim3Node(fid, SimPose.from_pose(pose)) for fid, pose in zip(ids, keyframe_poses)]
    edges = []
    for a, b in zip(nodes[:-1], nodes[1:]):
        edges.append(Sim3Edge(a.frame_id, b.frame_id, relative(a.pose, b.pose), 'odometry'))
    return nodes, edges


def loop_residual(edge: Sim3Edge, S_i: SimPose, S_j: SimPose) -> np.ndarray:
    """Twist7 residual log(dS^-1 * S_j * S_i^-1)."""
    error = compose(compose(inverse(edge.measurement), S_j), inverse(S_i))
    return sim3_log(error)


def residual_jacobians(edge: Sim3Edge, S_i: SimPose, S_j: SimPose) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Residual and its 7x7 Jacobians for left perturbations of S_i and S_j.

    Returns:
        Tuple (r, J_i, J_j)
    """
    meas_inv = inverse(edge.measurement)
    error = compose(compose(meas_inv, S_j), inverse(S_i))
    r = sim3_log(error)
    jl_inv = sim3_left_jacobian_inv(r)
    J_j = jl_inv @ adjoint_sim3(meas_inv)
    J_i = -jl_inv @ adjoint_sim3(error)
    return r, J_i, J_j


class PoseGraphOptimizer:
    """Damped Gauss-Newton on the 7-dof tangent of every free node."""

    def __init__(self, max_iters: int = DEFAULT_MAX_ITERS, step_tolerance: float = STEP_TOLERANCE):
        self.logger = logging.getLogger(LOGGER_NAME)
        self.max_iters = max_iters
        self.step_tolerance = step_tolerance

    def _check(self, graph: PoseGraph) -> Dict[int, int]:
        index = {}
        for idx, node in enumerate(graph.nodes):
            if node.frame_id in index:
                raise ValidationException(f"Duplicate pose-graph node {node.frame_id}")
            index[node.frame_id] = idx
        for edge in graph.edges:
            if edge.src not in index or edge.dst not in index:
                raise ValidationException(f"Edge {edge.src}->{edge.dst} references an unknown node")
        if not any(node.fixed for node in graph.nodes):
            raise NotEnoughConstraintsException("Pose graph has no fixed node")

        n = len(graph.nodes)
        if graph.edges:
            src = [index[e.src] for e in graph.edges]
            dst = [index[e.dst] for e in graph.edges]
            adjacency = sparse.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
        else:
            adjacency = sparse.coo_matrix((n, n))
        _, labels = csgraph.connected_components(adjacency, directed=False)
        fixed_labels = {labels[idx] for idx, node in enumerate(graph.nodes) if node.fixed}
        unreachable = [node.frame_id for idx, node in enumerate(graph.nodes) if labels[idx] not in fixed_labels]
        if unreachable:
            raise DisconnectedGraphException(
                f"{len(unreachable)} pose-graph nodes unreachable from a fixed node (first: {unreachable[0]})"
            )
        return index

    def _cost(self, graph: PoseGraph, poses: List[SimPose], index: Dict[int, int]) -> float:
        total = 0.0
        for edge in graph.edges:
            r = loop_residual(edge, poses[index[edge.src]], poses[index[edge.dst]])
            total += 0.5 * float(r @ edge.information @ r)
        return total

    def _linearize(self, graph: PoseGraph, poses: List[SimPose], index: Dict[int, int], cols: Dict[int, int]):
        n = 7 * len(cols)
        rows_h, cols_h, vals_h = [], [], []
        g = np.zeros(n)
        cost = 0.0
        for edge in graph.edges:
            i, j = index[edge.src], index[edge.dst]
            r, J_i, J_j = residual_jacobians(edge, poses[i], poses[j])
            W = edge.information
            cost += 0.5 * float(r @ W @ r)
            blocks = []
            if i in cols:
                blocks.append((cols[i], J_i))
            if j in cols:
                blocks.append((cols[j], J_j))
            for ca, Ja in blocks:
                g[ca:ca + 7] -= Ja.T @ W @ r
                for cb, Jb in blocks:
                    block = Ja.T @ W @ Jb
                    rr, cc = np.meshgrid(np.arange(ca, ca + 7), np.arange(cb, cb + 7), indexing='ij')
                    rows_h.append(rr.ravel())
                    cols_h.append(cc.ravel())
                    vals_h.append(block.ravel())
        if rows_h:
            H = sparse.coo_matrix((np.concatenate(vals_h), (np.concatenate(rows_h), np.concatenate(cols_h))),
                                  shape=(n, n)).tocsc()
        else:
            H = sparse.csc_matrix((n, n))
        return H, g, cost

    def optimize(self, graph: PoseGraph, max_iters: Optional[int] = None) -> PGOResult:
        """
        Optimize every free node in place.

        Args:
            graph: Pose graph with at least one fixed node
            max_iters: Iteration cap (default 50)

        Returns:
            PGOResult with costs and loop residual norms before and after

        Raises:
            DisconnectedGraphException: If a node cannot be reached from a fixed node
            SingularSystemException: If the damped system cannot be solved
        """
        max_iters = self.max_iters if max_iters is None else max_iters
        try:
            index = self._check(graph)
            free = [idx for idx, node in enumerate(graph.nodes) if not node.fixed]
            cols = {idx: 7 * k for k, idx in enumerate(free)}
            poses = [node.pose for node in graph.nodes]

            def loop_norms(current):
                return [float(np.linalg.norm(loop_residual(e, current[index[e.src]], current[index[e.dst]])))
                        for e in graph.loop_edges()]

            before = loop_norms(poses)
            H, g, cost = self._linearize(graph, poses, index, cols)
            initial_cost = cost
            lam = 1e-6
            iterations = 0
            converged = not free or cost <= 1e-24

            while not converged and iterations < max_iters:
                accepted = False
                while lam <= 1e8:
                    damped = (H + lam * sparse.diags(H.diagonal() + 1e-12)).tocsc()
                    step = spsolve(damped, g)
                    if not np.all(np.isfinite(step)):
                        lam *= 10.0
                        continue
                    trial = list(poses)
                    for idx, col in cols.items():
                        trial[idx] = retract_sim3(poses[idx], step[col:col + 7])
                    trial_cost = self._cost(graph, trial, index)
                    if trial_cost <= cost:
                        accepted = True
                        break
                    lam *= 10.0

                if not accepted:
                    if iterations == 0 and not np.isfinite(cost):
                        raise SingularSystemException("Pose-graph normal equations could not be solved")
                    converged = True
                    break

                iterations += 1
                self.logger.debug(f"PGO iter {iterations}: cost {cost:.6g} -> {trial_cost:.6g}")
                poses = trial
                lam = max(lam / 10.0, 1e-12)
                H, g, cost = self._linearize(graph, poses, index, cols)
                if np.linalg.norm(step) < self.step_tolerance or cost <= 1e-24:
                    converged = True

            for node, pose in zip(graph.nodes, poses):
                node.pose = pose
            after = loop_norms(poses)
            self.logger.info(
                f"Pose graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges, cost {initial_cost:.6g} -> "
                f"{cost:.6g} in {iterations} iterations"
            )
            return PGOResult(initial_cost, cost, iterations, before, after, converged)

        except SlamException:
            raise
        except Exception as e:
            error_msg = f"Unexpected error in pose-graph optimization: {str(e)}"
            self.logger.error(error_msg)
            raise SingularSystemException(error_msg)


def optimize(graph: PoseGraph, max_iters: int = DEFAULT_MAX_ITERS) -> PGOResult:
    """Convenience function to optimize a pose graph in place."""
    return PoseGraphOptimizer(max_iters=max_iters).optimize(graph)


def apply_correction(nodes: Iterable[Sim3Node], map_patches: Dict[PatchKey, Patch],
                     anchors: Optional[Dict[int, int]] = None) -> Tuple[Dict[int, Pose], Dict[PatchKey, Patch]]:
    """
    Absorb node scales back into rigid poses and inverse depths.

    A node ``(s, R, t)`` becomes the rigid pose ``(R, t / s)`` and every patch
    hosted in it has its inverse depth multiplied by ``s``, which keeps each
    patch's world point at ``S^-1`` of its camera point. Patches hosted in a
    frame that is not a node use the scale of ``anchors[frame]``.

    Node scales act on camera coordinates, so a map stretch by ``c`` (every
    depth and relative translation times ``c``) is the node scale ``1 / c``:
    a uniform node scale of 0.5 doubles the map, 2 halves it.

    Returns:
        Tuple (corrected poses by frame id, corrected copies of the patches)
    """
    anchors = anchors or {}
    poses = {}
    scales = {}
    for node in nodes:
        s = node.pose.scale
        scales[node.frame_id] = s
        poses[node.frame_id] = Pose(node.pose.rotation, node.pose.translation / s)

    patches = {}
    for key, patch in map_patches.items():
        host = patch.frame_id
        s = scales.get(host, scales.get(anchors.get(host), 1.0))
        patches[key] = Patch(patch.frame_id, patch.patch_id, patch.center.copy(), patch.inv_depth * s,
                             patch.footprint)
    return poses, patches


def estimate_loop_measurement(old_points: np.ndarray, new_points: np.ndarray, old_pose: Pose,
                              new_pose: Pose, min_points: int = 8,
                              max_rel_rmse: float = 0.05) -> LoopMeasurement:
    """
    Loop edge measurement from 3D points seen at the old place and re-triangulated now.

    ``old_points`` are world positions of old map patches, ``new_points`` the
    same physical points triangulated from the current window. A similarity T
    with ``new ~ T(old)`` is fitted, refitted once on the inliers, and turned
    into the edge measurement ``S_new * T * S_old^-1``.

    Raises:
        LoopRejectedException: With fewer than ``min_points`` usable points or a poor fit
    """
    old_points = np.asarray(old_points, dtype=float).reshape(-1, 3)
    new_points = np.asarray(new_points, dtype=float).reshape(-1, 3)
    ok = np.all(np.isfinite(old_points), axis=1) & np.all(np.isfinite(new_points), axis=1)
    old_points, new_points = old_points[ok], new_points[ok]
    if len(old_points) < min_points:
        raise LoopRejectedException(f"Only {len(old_points)} co-visible points, need {min_points}")

    try:
        s, R, t = umeyama_alignment(old_points, new_points)
        errors = np.linalg.norm(s * old_points @ R.T + t - new_points, axis=1)
        cutoff = max(3.0 * np.median(errors), 1e-12)
        inliers = errors <= cutoff
        if inliers.sum() < min_points:
            raise LoopRejectedException(f"Only {int(inliers.sum())} inlier points, need {min_points}")
        s, R, t = umeyama_alignment(old_points[inliers], new_points[inliers])
    except DegenerateCollinearException as e:
        raise LoopRejectedException(f"Degenerate loop geometry: {str(e)}")

    fitted = s * old_points[inliers] @ R.T + t
    residual = np.linalg.norm(fitted - new_points[inliers], axis=1)
    rmse = float(np.sqrt(np.mean(residual ** 2)))
    spread = float(np.sqrt(np.mean(np.sum((new_points[inliers] - new_points[inliers].mean(axis=0)) ** 2, axis=1))))
    if spread <= 0 or rmse > max_rel_rmse * spread:
        raise LoopRejectedException(f"Loop alignment residual {rmse:.3g} too large for point spread {spread:.3g}")

    matrix = np.eye(4)
    matrix[:3, :3] = s * R
    matrix[:3, 3] = t
    alignment = SimPose.from_matrix(matrix)
    measurement = compose(compose(SimPose.from_pose(new_pose), alignment), inverse(SimPose.from_pose(old_pose)))
    return LoopMeasurement(measurement, alignment, int(inliers.sum()), rmse)
