"""
Sliding-window bundle adjustment with a depth-prior regularizer.

The objective over a window is::

    E = sum_edges  c_e * huber(|reproject(e) - observed_e|)
      + sum_patches  0.5 * mu * (inv_depth - 1 / aligned_prior)^2

solved by Levenberg-Marquardt. Each residual touches at most one inverse
depth, so the depth block of the normal equations is diagonal and is
eliminated per patch (Schur complement) before the pose system is
factorized.
"""

import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, cho_factor, cho_solve

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .exceptions import (
        BehindCameraException, EmptyHistoryException, NotEnoughConstraintsException,
        SingularSystemException, SlamException, ValidationException,
    )
    from .lie_geometry import MIN_DEPTH, CameraIntrinsics, Pose, reproject_patch, retract
    from .utils import LOGGER_NAME
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from exceptions import (
        BehindCameraException, EmptyHistoryException, NotEnoughConstraintsException,
        SingularSystemException, SlamException, ValidationException,
    )
    from lie_geometry import MIN_DEPTH, CameraIntrinsics, Pose, reproject_patch, retract
    from utils import LOGGER_NAME


MIN_INV_DEPTH = 1e-6
INITIAL_DAMPING = 1e-4
MAX_DAMPING = 1e8
FROZEN_DEPTH_INFORMATION = 1e-10
COST_FLOOR = 1e-18
FUNCTION_TOLERANCE = 1e-6
STEP_TOLERANCE = 1e-12

PatchKey = Tuple[int, int]

logger = logging.getLogger(LOGGER_NAME)


@dataclass
class Patch:
    """A p x p patch hosted in one frame with a single optimized inverse depth."""

    frame_id: int
    patch_id: int
    center: np.ndarray
    inv_depth: float
    footprint: int = 3

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.inv_depth = float(self.inv_depth)

    @property
    def key(self) -> PatchKey:
        return (self.frame_id, self.patch_id)


@dataclass
class CorrespondenceEdge:
    """
    Observed location in frame ``dst_frame`` of patch ``patch_id`` hosted in ``src_frame``.

    ``prior_depth`` is the destination frame's monocular depth sampled at the
    observed pixel (NaN when the front-end did not provide one).
    """

    src_frame: int
    patch_id: int
    dst_frame: int
    observed: np.ndarray
    confidence: float = 1.0
    prior_depth: float = float('nan')
    active: bool = True

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float).reshape(2)
        self.confidence = float(self.confidence)
        if self.src_frame == self.dst_frame:
            raise ValidationException(
                f"Edge for patch {self.patch_id} connects frame {self.src_frame} to itself"
            )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationException(f"Edge confidence must be in [0, 1]: {self.confidence}")

    @property
    def patch_key(self) -> PatchKey:
        return (self.src_frame, self.patch_id)


@dataclass
class DepthPrior:
    """Per-patch monocular depths of one frame plus its alignment scale alpha."""

    frame_id: int
    prior_depths: Dict[int, float] = field(default_factory=dict)
    alpha: Optional[float] = None

    def aligned_depth(self, patch_id: int) -> Optional[float]:
        """Prior depth expressed in map units, D / alpha, or None when unavailable."""
        depth = self.prior_depths.get(patch_id)
        if depth is None or not np.isfinite(depth) or depth <= 0:
            return None
        alpha = self.alpha if self.alpha is not None else 1.0
        return depth / alpha


@dataclass
class BAWindow:
    """Frames, patches, edges and priors jointly optimized by one solve."""

    K: CameraIntrinsics
    frame_ids: List[int]
    poses: Dict[int, Pose]
    patches: Dict[PatchKey, Patch]
    edges: List[CorrespondenceEdge]
    priors: Dict[int, DepthPrior] = field(default_factory=dict)
    mu: float = 0.05
    huber_delta: float = 2.0
    fixed_frames: Set[int] = field(default_factory=set)
    fixed_patches: Set[PatchKey] = field(default_factory=set)
    depth_residual_space: str = 'inverse'
    optimize_focal: bool = False

    def validate(self) -> None:
        """
        Check window consistency.

        Raises:
            ValidationException: If an edge references something outside the window
        """
        frames = set(self.frame_ids)
        missing = [fid for fid in frames if fid not in self.poses]
        if missing:
            raise ValidationException(f"Window frames without pose: {sorted(missing)}")
        for edge in self.edges:
            if edge.src_frame not in frames or edge.dst_frame not in frames:
                raise ValidationException(
                    f"Edge {edge.src_frame}->{edge.dst_frame} references a frame outside the window"
                )
            if edge.patch_key not in self.patches:
                raise ValidationException(f"Edge references unknown patch {edge.patch_key}")
        if self.mu < 0:
            raise ValidationException(f"mu must be non-negative: {self.mu}")
        if self.huber_delta <= 0:
            raise ValidationException(f"huber_delta must be positive: {self.huber_delta}")


@dataclass
class BAResult:
    initial_cost: float
    final_cost: float
    iterations: int
    weights: np.ndarray
    converged: bool
    damping: float
    # per-edge reprojection error at the final state, NaN behind the camera
    residual_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class WindowStep:
    """One damped Gauss-Newton step, split per variable."""

    pose_deltas: Dict[int, np.ndarray]
    depth_deltas: Dict[PatchKey, float]
    focal_delta: float = 0.0


def align_prior_scale(prior_depths: Iterable[float], recent_inv_depths: Iterable[float],
                      formula: str = 'unit_consistent') -> float:
    """
    Scale alpha relating a frame's monocular depths to the map.

    Args:
        prior_depths: Prior depth samples D of the frame
        recent_inv_depths: Inverse depths of recent keyframe patches
        formula: 'unit_consistent' divides by the median patch depth,
            'literal' by the median inverse depth

    Returns:
        alpha = median(D) / median(patch depth)

    Raises:
        EmptyHistoryException: If either sample set is empty
    """
    priors = np.asarray([p for p in prior_depths if np.isfinite(p) and p > 0], dtype=float)
    inv_depths = np.asarray([d for d in recent_inv_depths if np.isfinite(d) and d > 0], dtype=float)
    if priors.size == 0:
        raise EmptyHistoryException("No prior depth samples for scale alignment")
    if inv_depths.size == 0:
        raise EmptyHistoryException("No recent patches for scale alignment")

    if formula == 'literal':
        return float(np.median(priors) / np.median(inv_depths))
    return float(np.median(priors) / np.median(1.0 / inv_depths))


def robust_weight(residual_norm: float, huber_delta: float) -> float:
    """Huber IRLS weight: 1 inside delta, delta / |r| outside."""
    if residual_norm <= huber_delta:
        return 1.0
    return huber_delta / residual_norm


def huber_cost(norms: np.ndarray, huber_delta: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=float)
    return np.where(norms <= huber_delta, 0.5 * norms ** 2, huber_delta * (norms - 0.5 * huber_delta))


def residual_reprojection(edge: CorrespondenceEdge, window: BAWindow) -> np.ndarray:
    """Predicted minus observed pixel; zero and inactive when the patch lands behind the camera."""
    patch = window.patches[edge.patch_key]
    try:
        predicted = reproject_patch(window.K, window.poses[edge.src_frame], window.poses[edge.dst_frame],
                                    patch.center, patch.inv_depth)
    except BehindCameraException:
        edge.active = False
        return np.zeros(2)
    edge.active = True
    return predicted - edge.observed


def residual_depth(patch: Patch, prior: Optional[DepthPrior], mu: float,
                   space: str = 'inverse') -> float:
    """
    Depth-prior residual of one patch.

    inverse: sqrt(mu) * (inv_depth - alpha / D)
    metric:  sqrt(mu) * (1 / inv_depth - D / alpha)
    """
    if prior is None or mu <= 0:
        return 0.0
    target = prior.aligned_depth(patch.patch_id)
    if target is None:
        return 0.0
    if space == 'metric':
        return float(np.sqrt(mu) * (1.0 / patch.inv_depth - target))
    return float(np.sqrt(mu) * (patch.inv_depth - 1.0 / target))


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def project_edges(K: CameraIntrinsics, Rs: np.ndarray, ts: np.ndarray, host: np.ndarray,
                  target: np.ndarray, centers: np.ndarray, inv_depths: np.ndarray,
                  jacobians: bool = False):
    """
    Vectorized patch reprojection over many edges.

    Args:
        K: Camera intrinsics
        Rs, ts: Stacked world-to-camera rotations (F, 3, 3) and translations (F, 3)
        host, target: Frame indices per edge
        centers: Patch centers in the host frame (N, 2)
        inv_depths: Patch inverse depths (N,)
        jacobians: Also return Jacobians

    Returns:
        (pixels, valid) or (pixels, valid, J_host, J_target, J_depth, J_focal)
    """
    R_h, t_h = Rs[host], ts[host]
    R_j, t_j = Rs[target], ts[target]
    R_hj = np.einsum('nij,nkj->nik', R_j, R_h)
    t_hj = t_j - np.einsum('nij,nj->ni', R_hj, t_h)

    rays = np.stack([(centers[:, 0] - K.cx) / K.fx,
                     (centers[:, 1] - K.cy) / K.fy,
                     np.ones(len(centers))], axis=1)
    Y = np.einsum('nij,nj->ni', R_hj, rays) + t_hj * inv_depths[:, None]
    valid = Y[:, 2] > MIN_DEPTH * inv_depths
    z = np.where(valid, Y[:, 2], 1.0)

    pixels = np.stack([K.fx * Y[:, 0] / z + K.cx, K.fy * Y[:, 1] / z + K.cy], axis=1)
    if not jacobians:
        return pixels, valid

    n = len(host)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = K.fx / z
    Jp[:, 0, 2] = -K.fx * Y[:, 0] / z ** 2
    Jp[:, 1, 1] = K.fy / z
    Jp[:, 1, 2] = -K.fy * Y[:, 1] / z ** 2

    dY = np.zeros((n, 3, 6))
    dY[:, :, :3] = inv_depths[:, None, None] * np.eye(3)
    dY[:, :, 3:] = -_skew_batch(Y)
    J_target = Jp @ dY

    adjoint = np.zeros((n, 6, 6))
    adjoint[:, :3, :3] = R_hj
    adjoint[:, :3, 3:] = _skew_batch(t_hj) @ R_hj
    adjoint[:, 3:, 3:] = R_hj
    J_host = -J_target @ adjoint

    J_depth = np.einsum('nij,nj->ni', Jp, t_hj)

    dray = np.stack([-(centers[:, 0] - K.cx) / K.fx ** 2,
                     -(centers[:, 1] - K.cy) / K.fy ** 2,
                     np.zeros(n)], axis=1)
    J_focal = (np.stack([Y[:, 0] / z, Y[:, 1] / z], axis=1)
               + np.einsum('nij,nj->ni', Jp, np.einsum('nij,nj->ni', R_hj, dray)))
    return pixels, valid, J_host, J_target, J_depth, J_focal


class _WindowLayout:
    """Index bookkeeping that maps window contents to flat arrays and columns."""

    def __init__(self, window: BAWindow):
        self.frame_ids = list(window.frame_ids)
        self.frame_index = {fid: idx for idx, fid in enumerate(self.frame_ids)}
        self.patch_keys = sorted(window.patches)
        self.patch_index = {key: idx for idx, key in enumerate(self.patch_keys)}

        self.free_frames = [fid for fid in self.frame_ids if fid not in window.fixed_frames]
        pose_col = {fid: 6 * idx for idx, fid in enumerate(self.free_frames)}
        self.frame_col = np.array([pose_col.get(fid, -1) for fid in self.frame_ids], dtype=int)
        self.n_pose = 6 * len(self.free_frames)
        self.focal_col = self.n_pose if window.optimize_focal else -1
        self.n_block = self.n_pose + (1 if window.optimize_focal else 0)

        edges = window.edges
        self.host = np.array([self.frame_index[e.src_frame] for e in edges], dtype=int)
        self.target = np.array([self.frame_index[e.dst_frame] for e in edges], dtype=int)
        self.edge_patch = np.array([self.patch_index[e.patch_key] for e in edges], dtype=int)
        self.observed = np.array([e.observed for e in edges], dtype=float).reshape(-1, 2)
        self.confidence = np.array([e.confidence for e in edges], dtype=float)
        self.centers = np.array([window.patches[k].center for k in self.patch_keys],
                                dtype=float).reshape(-1, 2)

        observed_patches = set(self.edge_patch[self.confidence > 0].tolist())

        # depth prior targets, NaN when the patch has none
        self.prior_target = np.full(len(self.patch_keys), np.nan)
        if window.mu > 0:
            for idx, key in enumerate(self.patch_keys):
                prior = window.priors.get(key[0])
                if prior is not None:
                    target = prior.aligned_depth(key[1])
                    if target is not None:
                        self.prior_target[idx] = target
        self.prior_rows = np.flatnonzero(np.isfinite(self.prior_target))

        constrained = observed_patches | set(self.prior_rows.tolist())
        free_patch = [idx for idx, key in enumerate(self.patch_keys)
                      if key not in window.fixed_patches and idx in constrained]
        self.depth_col = np.full(len(self.patch_keys), -1, dtype=int)
        self.depth_col[free_patch] = np.arange(len(free_patch))
        self.n_depth = len(free_patch)
        self.edge_depth_col = self.depth_col[self.edge_patch]

        # per-edge block columns: host pose, target pose, then the focal length
        offsets = np.arange(6)
        host_col = self.frame_col[self.host][:, None]
        target_col = self.frame_col[self.target][:, None]
        cols = [np.where(host_col >= 0, host_col + offsets, -1),
                np.where(target_col >= 0, target_col + offsets, -1)]
        if window.optimize_focal:
            cols.append(np.full((len(edges), 1), self.focal_col))
        self.edge_cols = np.concatenate(cols, axis=1)

        # every edge of a (host, target) pair writes the same block of the pose system
        pair = self.host * len(self.frame_ids) + self.target
        self.edge_order = np.argsort(pair, kind='stable')
        self.pair_blocks = []
        if len(edges):
            ordered = pair[self.edge_order]
            starts = np.concatenate([[0], np.flatnonzero(np.diff(ordered)) + 1])
            stops = np.concatenate([starts[1:], [len(ordered)]])
            for start, stop in zip(starts.tolist(), stops.tolist()):
                block_cols = self.edge_cols[self.edge_order[start]]
                local = np.flatnonzero(block_cols >= 0)
                if local.size:
                    self.pair_blocks.append((start, stop, local, block_cols[local]))


@dataclass
class _NormalSystem:
    """
    Normal equations with the depth block already reduced.

    ``C_inv`` is the undamped inverse depth information (0 for frozen
    depths); ``W = E C^-1 E^T`` and ``v = E C^-1 g_d``. Marquardt damping
    scales C by (1 + lambda), so a damped solve only rescales W and v.
    """

    B: np.ndarray
    E: sparse.csr_matrix
    C_inv: np.ndarray
    W: np.ndarray
    v: np.ndarray
    g_b: np.ndarray
    g_d: np.ndarray


class BundleAdjuster:
    """
    Levenberg-Marquardt solver for BAWindow problems.

    Damping is Marquardt style: the diagonal of the normal matrix is scaled
    by (1 + lambda).
    """

    def __init__(self, max_damping: float = MAX_DAMPING):
        self.logger = logging.getLogger(LOGGER_NAME)
        self.max_damping = max_damping

    # State

    @staticmethod
    def _state(window: BAWindow, layout: _WindowLayout):
        Rs = np.array([window.poses[fid].R for fid in layout.frame_ids])
        ts = np.array([window.poses[fid].translation for fid in layout.frame_ids])
        d = np.array([window.patches[k].inv_depth for k in layout.patch_keys], dtype=float)
        return Rs, ts, d

    def _residuals(self, window: BAWindow, layout: _WindowLayout, Rs, ts, d, K, jacobians=False):
        if len(layout.host):
            out = project_edges(K, Rs, ts, layout.host, layout.target,
                                layout.centers[layout.edge_patch], d[layout.edge_patch],
                                jacobians=jacobians)
        else:
            out = (np.zeros((0, 2)), np.zeros(0, dtype=bool),
                   np.zeros((0, 2, 6)), np.zeros((0, 2, 6)), np.zeros((0, 2)), np.zeros((0, 2)))
        valid = out[1]
        res = np.where(valid[:, None], out[0] - layout.observed, 0.0)

        if window.mu > 0 and layout.prior_rows.size:
            rows = layout.prior_rows
            sqrt_mu = np.sqrt(window.mu)
            if window.depth_residual_space == 'metric':
                depth_res = sqrt_mu * (1.0 / d[rows] - layout.prior_target[rows])
                depth_jac = -sqrt_mu / d[rows] ** 2
            else:
                depth_res = sqrt_mu * (d[rows] - 1.0 / layout.prior_target[rows])
                depth_jac = np.full(rows.size, sqrt_mu)
        else:
            depth_res = np.zeros(0)
            depth_jac = np.zeros(0)

        if jacobians:
            return res, valid, depth_res, depth_jac, out[2:]
        return res, valid, depth_res

    def _cost(self, window: BAWindow, layout: _WindowLayout, res, valid, depth_res) -> float:
        norms = np.linalg.norm(res, axis=1)
        edge_cost = np.where(valid, layout.confidence * huber_cost(norms, window.huber_delta), 0.0)
        return float(np.sum(edge_cost) + 0.5 * np.sum(depth_res ** 2))

    def _weights(self, window: BAWindow, layout: _WindowLayout, res, valid) -> np.ndarray:
        norms = np.linalg.norm(res, axis=1)
        huber = np.where(norms <= window.huber_delta, 1.0,
                         window.huber_delta / np.maximum(norms, 1e-300))
        return np.where(valid, huber * layout.confidence, 0.0)

    # Linear algebra

    def _normal_equations(self, window: BAWindow, layout: _WindowLayout, Rs, ts, d, K):
        res, valid, depth_res, depth_jac, jacs = self._residuals(window, layout, Rs, ts, d, K, True)
        J_host, J_target, J_depth, J_focal = jacs
        weights = self._weights(window, layout, res, valid)
        active = weights > 0
        sw = np.where(active, np.sqrt(weights), 0.0)

        nb, nd = layout.n_block, layout.n_depth
        blocks = [J_host, J_target]
        if layout.focal_col >= 0:
            blocks.append(J_focal[:, :, None])
        J_block = np.where(active[:, None, None], np.concatenate(blocks, axis=2) * sw[:, None, None], 0.0)
        J_d = np.where(active[:, None], J_depth * sw[:, None], 0.0)
        r = np.where(active[:, None], res * sw[:, None], 0.0)

        B = np.zeros((nb, nb))
        if nb and layout.pair_blocks:
            ordered = J_block[layout.edge_order]
            for start, stop, local, cols in layout.pair_blocks:
                J_pair = ordered[start:stop][:, :, local].reshape(-1, local.size)
                B[np.ix_(cols, cols)] += J_pair.T @ J_pair

        cols = layout.edge_cols
        in_block = cols >= 0
        g_b = -np.bincount(cols[in_block], weights=np.einsum('nki,nk->ni', J_block, r)[in_block],
                           minlength=nb)[:nb]

        dcol = layout.edge_depth_col
        in_depth = dcol >= 0
        C = np.bincount(dcol[in_depth], weights=np.sum(J_d[in_depth] ** 2, axis=1), minlength=nd)[:nd]
        g_d = -np.bincount(dcol[in_depth], weights=np.sum(J_d[in_depth] * r[in_depth], axis=1),
                           minlength=nd)[:nd]
        if layout.prior_rows.size:
            prior_cols = layout.depth_col[layout.prior_rows]
            keep = prior_cols >= 0
            C[prior_cols[keep]] += depth_jac[keep] ** 2
            g_d[prior_cols[keep]] -= depth_jac[keep] * depth_res[keep]

        coupled = in_block & (in_depth & active)[:, None]
        E = sparse.csr_matrix((np.einsum('nki,nk->ni', J_block, J_d)[coupled],
                               (cols[coupled], np.broadcast_to(dcol[:, None], cols.shape)[coupled])),
                              shape=(nb, nd))

        C_inv = np.zeros(nd)
        live = C > FROZEN_DEPTH_INFORMATION
        C_inv[live] = 1.0 / C[live]
        if nb and nd:
            E_scaled = E @ sparse.diags(C_inv)
            W = (E_scaled @ E.T).toarray()
            v = np.asarray(E_scaled @ g_d).ravel()
        else:
            W = np.zeros((nb, nb))
            v = np.zeros(nb)

        system = _NormalSystem(B, E, C_inv, W, v, g_b, g_d)
        cost = self._cost(window, layout, res, valid, depth_res)
        norms = np.where(valid, np.linalg.norm(res, axis=1), np.nan)
        return system, cost, weights, valid, norms

    def _damped_step(self, layout: _WindowLayout, system: _NormalSystem, lam: float) -> np.ndarray:
        nb = layout.n_block
        shrink = 1.0 / (1.0 + lam)
        C_inv = system.C_inv * shrink

        if nb:
            S = system.B + lam * np.diag(np.diag(system.B)) - shrink * system.W
            rhs = system.g_b - shrink * system.v
            delta_b = cho_solve(cho_factor(S), rhs)
            if not np.all(np.isfinite(delta_b)):
                raise LinAlgError("non-finite step")
            delta_d = C_inv * (system.g_d - system.E.T @ delta_b)
        else:
            delta_b = np.zeros(0)
            delta_d = C_inv * system.g_d
        return np.concatenate([delta_b, delta_d])

    def _apply_step(self, window: BAWindow, layout: _WindowLayout, step: np.ndarray, K: CameraIntrinsics):
        poses = dict(window.poses)
        for fid in layout.free_frames:
            col = layout.frame_col[layout.frame_index[fid]]
            poses[fid] = retract(window.poses[fid], step[col:col + 6])

        d = np.array([window.patches[k].inv_depth for k in layout.patch_keys], dtype=float)
        free = layout.depth_col >= 0
        d[free] = np.maximum(d[free] + step[layout.n_block + layout.depth_col[free]], MIN_INV_DEPTH)

        new_K = K
        if layout.focal_col >= 0:
            focal = K.fx + step[layout.focal_col]
            if focal <= 0:
                return None
            new_K = K.with_focal(focal)
        return poses, d, new_K

    def _split_step(self, layout: _WindowLayout, step: np.ndarray) -> WindowStep:
        pose_deltas = {}
        for fid in layout.free_frames:
            col = layout.frame_col[layout.frame_index[fid]]
            pose_deltas[fid] = step[col:col + 6].copy()
        depth_deltas = {}
        for idx, key in enumerate(layout.patch_keys):
            col = layout.depth_col[idx]
            if col >= 0:
                depth_deltas[key] = float(step[layout.n_block + col])
        focal = float(step[layout.focal_col]) if layout.focal_col >= 0 else 0.0
        return WindowStep(pose_deltas, depth_deltas, focal)

    # Public API

    def check_constraints(self, window: BAWindow, layout: Optional[_WindowLayout] = None) -> None:
        """
        Verify the window has a gauge and at least as many residuals as unknowns.

        Raises:
            NotEnoughConstraintsException: If the problem is under-determined
        """
        layout = layout or _WindowLayout(window)
        if len(window.frame_ids) < 2:
            raise NotEnoughConstraintsException(f"Window needs at least 2 frames, got {len(window.frame_ids)}")
        if not window.fixed_frames:
            raise NotEnoughConstraintsException("Window has no fixed frame")

        has_prior = layout.prior_rows.size > 0
        if not has_prior and len(window.fixed_frames) < 2 and not window.fixed_patches:
            raise NotEnoughConstraintsException(
                "Scale is unconstrained: fix two frames or one patch when mu = 0"
            )

        n_residuals = 2 * int(np.sum(layout.confidence > 0)) + int(layout.prior_rows.size)
        n_unknowns = layout.n_block + layout.n_depth
        if n_residuals < n_unknowns:
            raise NotEnoughConstraintsException(
                f"{n_residuals} residuals for {n_unknowns} unknowns"
            )

    def compute_step(self, window: BAWindow, damping: float = 0.0) -> WindowStep:
        """
        Single damped step at the current state, without applying it.

        Args:
            window: Problem to linearize
            damping: Marquardt lambda

        Returns:
            WindowStep with per-frame and per-patch increments
        """
        window.validate()
        layout = _WindowLayout(window)
        Rs, ts, d = self._state(window, layout)
        system = self._normal_equations(window, layout, Rs, ts, d, window.K)[0]
        return self._split_step(layout, self._damped_step(layout, system, damping))

    def cost(self, window: BAWindow) -> float:
        """Total robust cost of the window at its current state."""
        layout = _WindowLayout(window)
        Rs, ts, d = self._state(window, layout)
        res, valid, depth_res = self._residuals(window, layout, Rs, ts, d, window.K)
        return self._cost(window, layout, res, valid, depth_res)

    def edge_residuals(self, window: BAWindow) -> np.ndarray:
        """Per-edge reprojection residual norms; NaN for edges behind the camera."""
        layout = _WindowLayout(window)
        Rs, ts, d = self._state(window, layout)
        res, valid, _ = self._residuals(window, layout, Rs, ts, d, window.K)
        norms = np.linalg.norm(res, axis=1)
        return np.where(valid, norms, np.nan)

    def solve(self, window: BAWindow, iterations: int = 10) -> BAResult:
        """
        Run Levenberg-Marquardt on the window, updating it in place.

        Stops after ``iterations`` accepted steps, when the cost drops below
        COST_FLOOR, or when an accepted step improves the cost by less than
        FUNCTION_TOLERANCE relative to it.

        Args:
            window: Problem; poses, inverse depths and (optionally) K are updated
            iterations: Maximum number of accepted steps

        Returns:
            BAResult with costs, iteration count, per-edge robust weights and residuals

        Raises:
            NotEnoughConstraintsException: If the window is under-determined
            SingularSystemException: If the damped system cannot be factorized
        """
        try:
            window.validate()
            layout = _WindowLayout(window)
            self.check_constraints(window, layout)

            K = window.K
            Rs, ts, d = self._state(window, layout)
            system, cost, weights, valid, norms = self._normal_equations(window, layout, Rs, ts, d, K)
            initial_cost = cost
            lam = INITIAL_DAMPING
            accepted = 0
            converged = cost <= COST_FLOOR

            while not converged and accepted < iterations:
                step_taken = False
                factorized = False
                while lam <= self.max_damping:
                    try:
                        step = self._damped_step(layout, system, lam)
                    except LinAlgError:
                        lam *= 10.0
                        continue
                    factorized = True

                    trial = self._apply_step(window, layout, step, K)
                    if trial is not None:
                        trial_poses, trial_d, trial_K = trial
                        tRs = np.array([trial_poses[fid].R for fid in layout.frame_ids])
                        tts = np.array([trial_poses[fid].translation for fid in layout.frame_ids])
                        res, tvalid, depth_res = self._residuals(window, layout, tRs, tts, trial_d, trial_K)
                        # a step may not push an active edge behind its camera
                        if np.all(tvalid[valid]):
                            trial_cost = self._cost(window, layout, res, tvalid, depth_res)
                            if trial_cost < cost:
                                step_taken = True
                                break
                    lam *= 10.0

                if not step_taken:
                    if not factorized and accepted == 0:
                        raise SingularSystemException(
                            f"Normal equations singular up to damping {self.max_damping:.0e} "
                            f"({layout.n_block} pose/intrinsic and {layout.n_depth} depth unknowns)"
                        )
                    converged = True
                    break

                window.poses.update(trial_poses)
                for idx, key in enumerate(layout.patch_keys):
                    window.patches[key].inv_depth = float(trial_d[idx])
                window.K = K = trial_K
                self.logger.debug(f"BA iter {accepted}: cost {cost:.6g} -> {trial_cost:.6g} (lambda {lam:.1e})")

                improvement = cost - trial_cost
                accepted += 1
                lam = max(lam / 10.0, 1e-12)
                cost, valid = trial_cost, tvalid
                converged = (trial_cost <= COST_FLOOR or np.linalg.norm(step) < STEP_TOLERANCE
                             or improvement <= FUNCTION_TOLERANCE * trial_cost)
                if converged or accepted >= iterations:
                    # the final linearization is only needed to keep iterating
                    weights = self._weights(window, layout, res, tvalid)
                    norms = np.where(tvalid, np.linalg.norm(res, axis=1), np.nan)
                    break

                Rs, ts, d = self._state(window, layout)
                system, cost, weights, valid, norms = self._normal_equations(window, layout, Rs, ts, d, K)

            for edge, ok in zip(window.edges, valid):
                edge.active = bool(ok)

            return BAResult(initial_cost, cost, accepted, weights, converged, lam, norms)

        except SlamException:
            raise
        except Exception as e:
            error_msg = f"Unexpected error in bundle adjustment: {str(e)}"
            self.logger.error(error_msg)
            raise SingularSystemException(error_msg)


def solve(window: BAWindow, iterations: int = 10) -> BAResult:
    """Convenience function to run bundle adjustment on a window."""
    return BundleAdjuster().solve(window, iterations)


def window_cost(window: BAWindow) -> float:
    """Convenience function returning the window's total robust cost."""
    return BundleAdjuster().cost(window)
