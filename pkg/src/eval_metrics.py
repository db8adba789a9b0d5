"""
Trajectory metrics.

Robustness metrics that need no ground truth (registered-frame count,
model count, locally normalized break detection) plus ground-truth
accuracy metrics (similarity alignment, ATE, RPE).
"""

import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .exceptions import DegenerateCollinearException, FrameMismatchException, ValidationException
    from .lie_geometry import Pose, SimPose, compose, inverse
    from .utils import LOGGER_NAME
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from exceptions import DegenerateCollinearException, FrameMismatchException, ValidationException
    from lie_geometry import Pose, SimPose, compose, inverse
    from utils import LOGGER_NAME


logger = logging.getLogger(LOGGER_NAME)


@dataclass
class Trajectory:
    """Ordered per-frame world-to-camera poses; ``None`` marks an unregistered frame."""

    timestamps: np.ndarray
    frame_ids: np.ndarray
    poses: List[Optional[Pose]]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        self.poses = [p if (p is not None and p.is_finite()) else None for p in self.poses]
        if not (len(self.timestamps) == len(self.frame_ids) == len(self.poses)):
            raise ValidationException(
                f"Trajectory fields differ in length: {len(self.timestamps)} timestamps, "
                f"{len(self.frame_ids)} ids, {len(self.poses)} poses"
            )
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationException("Trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def registered(self) -> np.ndarray:
        return np.array([p is not None for p in self.poses], dtype=bool)

    def positions(self) -> np.ndarray:
        """Camera centers (N, 3), NaN rows for unregistered frames."""
        out = np.full((len(self.poses), 3), np.nan)
        for idx, pose in enumerate(self.poses):
            if pose is not None:
                out[idx] = pose.center()
        return out

    def index_of(self) -> Dict[int, int]:
        return {int(fid): idx for idx, fid in enumerate(self.frame_ids)}


@dataclass
class BreakReport:
    indices: List[int]
    ratios: np.ndarray
    k: int
    threshold: float
    literal: bool = False


@dataclass
class AlignmentResult:
    """Similarity ``x -> s R x + t`` taking estimated positions onto reference positions."""

    transform: SimPose
    rmse: float
    max_error: float
    count: int
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Closed-form least-squares similarity between two point sets.

    Minimizes sum |s R src_i + t - dst_i|^2.

    Returns:
        Tuple (s, R, t)

    Raises:
        DegenerateCollinearException: If fewer than 3 points or the source points are collinear
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValidationException(f"Point sets differ in size: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateCollinearException(f"Need at least 3 correspondences, got {len(src)}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst

    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateCollinearException("Source points are collinear")

    n = len(src)
    cov = dst_c.T @ src_c / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_src = np.sum(src_c ** 2) / n
        s = float(np.trace(np.diag(D) @ S) / var_src)
    else:
        s = 1.0
    t = mu_dst - s * R @ mu_src
    return s, R, t


def _matched_positions(est, ref) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions of frames registered in both inputs, matched by frame id."""
    if isinstance(est, Trajectory) and isinstance(ref, Trajectory):
        ref_index = ref.index_of()
        est_pos = est.positions()
        ref_pos = ref.positions()
        missing = [int(fid) for fid, ok in zip(est.frame_ids, est.registered)
                   if ok and int(fid) not in ref_index]
        if missing:
            raise FrameMismatchException(
                f"{len(missing)} estimated frames have no reference pose (first: {missing[0]})"
            )
        pairs = [(i, ref_index[int(fid)]) for i, fid in enumerate(est.frame_ids)
                 if est.registered[i] and ref.registered[ref_index[int(fid)]]]
        if not pairs:
            raise FrameMismatchException("Trajectories share no registered frames")
        ei, ri = map(np.array, zip(*pairs))
        return est_pos[ei], ref_pos[ri], est.frame_ids[ei]

    est_pos = np.asarray(est, dtype=float).reshape(-1, 3)
    ref_pos = np.asarray(ref, dtype=float).reshape(-1, 3)
    if len(est_pos) != len(ref_pos):
        raise FrameMismatchException(f"Position arrays differ in length: {len(est_pos)} vs {len(ref_pos)}")
    ok = np.all(np.isfinite(est_pos), axis=1) & np.all(np.isfinite(ref_pos), axis=1)
    return est_pos[ok], ref_pos[ok], np.flatnonzero(ok)


def align_sim3(est: Union[Trajectory, np.ndarray], ref: Union[Trajectory, np.ndarray]) -> AlignmentResult:
    """
    Similarity alignment of estimated camera positions onto reference positions.

    Args:
        est: Estimated trajectory or (N, 3) positions
        ref: Reference trajectory or (N, 3) positions

    Returns:
        AlignmentResult with the transform and residual statistics

    Raises:
        DegenerateCollinearException: With fewer than 3 non-collinear matches
        FrameMismatchException: If the trajectories cannot be matched
    """
    est_pos, ref_pos, _ = _matched_positions(est, ref)
    s, R, t = umeyama_alignment(est_pos, ref_pos)
    aligned = s * est_pos @ R.T + t
    errors = np.linalg.norm(aligned - ref_pos, axis=1)
    transform = SimPose.from_matrix(np.block([[s * R, t[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]))
    return AlignmentResult(transform, float(np.sqrt(np.mean(errors ** 2))), float(errors.max()),
                           len(errors), errors)


def ate_rmse(est: Union[Trajectory, np.ndarray], ref: Union[Trajectory, np.ndarray],
             align: bool = True) -> float:
    """
    Absolute trajectory error: RMSE of camera positions, after similarity alignment by default.

    Raises:
        FrameMismatchException: If the trajectories cannot be matched
    """
    if align:
        return align_sim3(est, ref).rmse
    est_pos, ref_pos, _ = _matched_positions(est, ref)
    return float(np.sqrt(np.mean(np.sum((est_pos - ref_pos) ** 2, axis=1))))


def rpe(est: Trajectory, ref: Trajectory, delta: int = 1, align: bool = True) -> float:
    """
    Translational relative pose error over frame pairs (i, i + delta).

    With camera-to-world matrices P (estimate) and Q (reference), each pair
    contributes the translation of ``(Q_i^-1 Q_j)^-1 (P_i^-1 P_j)``; the
    result is the RMSE of those translations. The estimate's translations are
    first multiplied by the similarity alignment scale when ``align`` is set.

    Raises:
        FrameMismatchException: If no pair is registered in both trajectories
    """
    if delta < 1:
        raise ValidationException(f"RPE delta must be >= 1: {delta}")
    scale = align_sim3(est, ref).transform.scale if align else 1.0
    ref_index = ref.index_of()

    def cam_to_world(pose: Pose, s: float) -> np.ndarray:
        T = inverse(pose).matrix()
        T[:3, 3] *= s
        return T

    errors = []
    for i in range(len(est) - delta):
        j = i + delta
        pi, pj = est.poses[i], est.poses[j]
        ri, rj = ref_index.get(int(est.frame_ids[i])), ref_index.get(int(est.frame_ids[j]))
        if pi is None or pj is None or ri is None or rj is None:
            continue
        qi, qj = ref.poses[ri], ref.poses[rj]
        if qi is None or qj is None:
            continue
        P = np.linalg.inv(cam_to_world(pi, scale)) @ cam_to_world(pj, scale)
        Q = np.linalg.inv(cam_to_world(qi, 1.0)) @ cam_to_world(qj, 1.0)
        E = np.linalg.inv(Q) @ P
        errors.append(np.linalg.norm(E[:3, 3]))

    if not errors:
        raise FrameMismatchException(f"No frame pair at delta {delta} registered in both trajectories")
    return float(np.sqrt(np.mean(np.square(errors))))


def _segments(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal runs of True as half-open (start, end) ranges."""
    runs = []
    start = None
    for idx, ok in enumerate(mask):
        if ok and start is None:
            start = idx
        elif not ok and start is not None:
            runs.append((start, idx))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def count_models(traj: Trajectory) -> int:
    """Number of maximal contiguous runs of registered frames."""
    return len(_segments(traj.registered))


def count_registered(traj: Trajectory) -> int:
    """Frames in the largest contiguous registered run."""
    runs = _segments(traj.registered)
    return max((end - start for start, end in runs), default=0)


def detect_breaks(traj: Union[Trajectory, np.ndarray], k: int = 10, threshold: float = 10.0,
                  literal: bool = False) -> BreakReport:
    """
    Find abrupt jumps between consecutive camera positions.

    The step ``|t_i - t_{i+1}|`` is divided by the mean of the steps within
    ``k`` on either side, the step itself excluded. Windows are truncated at
    sequence ends and at unregistered frames. A break is reported at index
    ``i`` when the normalized step exceeds ``threshold``; with ``literal``
    the normalized step must exceed ``threshold`` times the mean normalized
    step instead.

    Args:
        traj: Trajectory or (N, 3) positions with NaN rows for unregistered frames
        k: Half window in steps
        threshold: Break threshold

    Returns:
        BreakReport with indices and the normalized ratio of every step (NaN where undefined)
    """
    if k < 1:
        raise ValidationException(f"k must be >= 1: {k}")
    if threshold <= 0:
        raise ValidationException(f"threshold must be positive: {threshold}")

    positions = traj.positions() if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float).reshape(-1, 3)
    n_steps = max(len(positions) - 1, 0)
    steps = np.full(n_steps, np.nan)
    if n_steps:
        steps = np.linalg.norm(positions[1:] - positions[:-1], axis=1)

    ratios = np.full(n_steps, np.nan)
    for start, end in _segments(np.isfinite(steps)):
        for i in range(start, end):
            lo, hi = max(start, i - k), min(end, i + k + 1)
            neighbours = np.concatenate([steps[lo:i], steps[i + 1:hi]])
            if neighbours.size == 0:
                continue
            local = neighbours.mean()
            if local > 0:
                ratios[i] = steps[i] / local
            elif steps[i] == 0:
                ratios[i] = 0.0
            else:
                ratios[i] = np.inf

    finite = np.isfinite(ratios)
    if literal:
        cutoff = threshold * (ratios[finite].mean() if np.any(finite) else 0.0)
    else:
        cutoff = threshold
    candidates = ~np.isnan(ratios)
    indices = [int(i) for i in np.flatnonzero(candidates) if ratios[i] > cutoff]
    return BreakReport(indices, ratios, k, threshold, literal)


def evaluate_trajectory(est: Trajectory, ref: Optional[Trajectory] = None, k: int = 10,
                        threshold: float = 10.0, literal: bool = False,
                        rpe_delta: int = 1) -> Dict[str, Any]:
    """
    Collect every metric available for an estimated trajectory.

    Returns:
        Ordered dictionary suitable for ``utils.format_report``
    """
    breaks = detect_breaks(est, k=k, threshold=threshold, literal=literal)
    metrics: Dict[str, Any] = {
        'frames': len(est),
        'registered': count_registered(est),
        'models': count_models(est),
        'breaks': len(breaks.indices),
        'break_indices': breaks.indices if breaks.indices else ['none'],
        'break_k': k,
        'break_threshold': float(threshold),
    }
    if ref is not None:
        alignment = align_sim3(est, ref)
        metrics['ate_rmse'] = alignment.rmse
        metrics['ate_max'] = alignment.max_error
        metrics['alignment_scale'] = alignment.transform.scale
        metrics['rpe_trans'] = rpe(est, ref, delta=rpe_delta)
        ref_pos = ref.positions()
        ref_pos = ref_pos[np.all(np.isfinite(ref_pos), axis=1)]
        extent = float(np.max(np.ptp(ref_pos, axis=0))) if len(ref_pos) else 0.0
        metrics['ate_rmse_over_extent'] = alignment.rmse / extent if extent > 0 else float('nan')
    logger.debug(f"Evaluated trajectory: {metrics}")
    return metrics


def trajectory_from_poses(poses: Sequence[Optional[Pose]], frame_ids: Optional[Sequence[int]] = None,
                          timestamps: Optional[Sequence[float]] = None) -> Trajectory:
    """Build a Trajectory with default ids 0..N-1 and timestamps equal to the ids."""
    n = len(poses)
    ids = np.arange(n) if frame_ids is None else np.asarray(frame_ids)
    stamps = ids.astype(float) if timestamps is None else np.asarray(timestamps, dtype=float)
    return Trajectory(stamps, ids, list(poses))


def transform_trajectory(traj: Trajectory, transform: SimPose) -> Trajectory:
    """
    Move a trajectory by a world similarity; camera centers map through ``transform``.

    World-to-camera poses become ``G * T^-1`` with the scale absorbed into the translation.
    """
    moved = []
    for pose in traj.poses:
        if pose is None:
            moved.append(None)
            continue
        rel = compose(pose, inverse(transform))
        moved.append(Pose(rel.rotation, rel.translation / rel.scale))
    return Trajectory(traj.timestamps.copy(), traj.frame_ids.copy(), moved)
