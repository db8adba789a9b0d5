"""
Incremental reconstruction pipeline.

Initialization picks frames with enough flow, recovers the focal length by a
grid search scored with bundle adjustment and bootstraps a map. Every
further frame is seeded by a constant-velocity model, gets mask-aware
patches, joins a sliding window of keyframes and is registered by the
depth-regularized window solver. Revisits confirmed by the place
recognizer trigger a SIM(3) pose-graph correction. After the stream ends the
map can be re-triangulated and globally refined.
"""

import copy
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .eval_metrics import Trajectory
    from .exceptions import (
        DegenerateGeometryException, EmptyHistoryException, FullyMaskedException,
        InsufficientParallaxException, InvalidValueException, LoopRejectedException,
        OptimizationException, RefinementDivergedException, SlamException, TrackingLostException,
    )
    from .frontend_sim import DatasetBundle, Stream, make_rng
    from .lie_geometry import CameraIntrinsics, Pose, compose, relative
    from .loop_detection import DescriptorStore, LoopConfirmer
    from .pose_graph import (
        PoseGraph, PoseGraphOptimizer, Sim3Edge, Sim3Node, apply_correction,
        estimate_loop_measurement, lift_trajectory,
    )
    from .utils import LOGGER_NAME
    from .window_ba import (
        BAResult, BAWindow, BundleAdjuster, CorrespondenceEdge, DepthPrior, Patch, PatchKey,
        align_prior_scale,
    )
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from eval_metrics import Trajectory
    from exceptions import (
        DegenerateGeometryException, EmptyHistoryException, FullyMaskedException,
        InsufficientParallaxException, InvalidValueException, LoopRejectedException,
        OptimizationException, RefinementDivergedException, SlamException, TrackingLostException,
    )
    from frontend_sim import DatasetBundle, Stream, make_rng
    from lie_geometry import CameraIntrinsics, Pose, compose, relative
    from loop_detection import DescriptorStore, LoopConfirmer
    from pose_graph import (
        PoseGraph, PoseGraphOptimizer, Sim3Edge, Sim3Node, apply_correction,
        estimate_loop_measurement, lift_trajectory,
    )
    from utils import LOGGER_NAME
    from window_ba import (
        BAResult, BAWindow, BundleAdjuster, CorrespondenceEdge, DepthPrior, Patch, PatchKey,
        align_prior_scale,
    )


logger = logging.getLogger(LOGGER_NAME)

POST_REFINE_MODES = ('off', 'retriangulate', 'retriangulate+global_ba')
DEPTH_SPACES = ('inverse', 'metric')
ALPHA_FORMULAS = ('unit_consistent', 'literal')

SPARSE_MASK_FRACTION = 0.1
LOOP_NEIGHBOURHOOD = 3
LOOP_MAX_RELATIVE_RMSE = 0.05
FOCAL_GUARD = 0.2
DEGENERATE_BASELINE_RATIO = 1e-3
DEGENERATE_PARALLAX_PX = 1.0
LOOP_MIN_PARALLAX_DEG = 3.0
REFINE_ALTERNATIONS = 3


@dataclass
class PipelineConfig:
    """Run parameters; field names are the config-file keys."""

    n_init: int = 8
    flow_threshold_px: float = 12.0
    window_size: int = 10
    patches_per_frame: int = 64
    patch_size: int = 3
    mu: float = 0.05
    huber_delta: float = 2.0
    depth_residual_space: str = 'inverse'
    alpha_formula: str = 'unit_consistent'
    ba_iterations: int = 8
    init_iterations: int = 20
    keyframe_flow_px: float = 6.0
    tracking_lost_px: float = 8.0
    use_masks: bool = True
    use_loop_closure: bool = True
    loop_similarity: float = 0.9
    loop_temporal_exclusion: int = 90
    loop_consecutive: int = 3
    loop_progression_tolerance: int = 2
    loop_cooldown: int = 50
    loop_min_points: int = 8
    loop_information: float = 1000.0
    post_refine: str = 'off'
    refine_iterations: int = 20
    focal_px: float = 0.0
    focal_grid_samples: int = 20
    focal_min_ratio: float = 0.3
    focal_max_ratio: float = 3.0
    focal_patches_per_frame: int = 24
    seed: int = 0

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> 'PipelineConfig':
        """
        Check every field against its invariant.

        Raises:
            InvalidValueException: Naming the first offending key
        """
        def require(ok: bool, key: str, message: str):
            if not ok:
                raise InvalidValueException(key, f"{message} (got {getattr(self, key)!r})")

        require(self.n_init >= 5, 'n_init', "must be >= 5")
        require(self.window_size >= 4, 'window_size', "must be >= 4")
        require(self.flow_threshold_px >= 0, 'flow_threshold_px', "must be >= 0")
        require(self.patches_per_frame > 0, 'patches_per_frame', "must be > 0")
        require(self.patch_size > 0 and self.patch_size % 2 == 1, 'patch_size', "must be a positive odd number")
        require(self.mu >= 0 and np.isfinite(self.mu), 'mu', "must be >= 0")
        require(self.huber_delta > 0, 'huber_delta', "must be > 0")
        require(self.depth_residual_space in DEPTH_SPACES, 'depth_residual_space', f"must be one of {DEPTH_SPACES}")
        require(self.alpha_formula in ALPHA_FORMULAS, 'alpha_formula', f"must be one of {ALPHA_FORMULAS}")
        require(self.ba_iterations > 0, 'ba_iterations', "must be > 0")
        require(self.init_iterations > 0, 'init_iterations', "must be > 0")
        require(self.keyframe_flow_px > 0, 'keyframe_flow_px', "must be > 0")
        require(self.tracking_lost_px > 0, 'tracking_lost_px', "must be > 0")
        require(0 < self.loop_similarity <= 1, 'loop_similarity', "must be in (0, 1]")
        require(self.loop_temporal_exclusion > 0, 'loop_temporal_exclusion', "must be > 0")
        require(self.loop_consecutive > 0, 'loop_consecutive', "must be > 0")
        require(self.loop_progression_tolerance >= 0, 'loop_progression_tolerance', "must be >= 0")
        require(self.loop_cooldown > 0, 'loop_cooldown', "must be > 0")
        require(self.loop_min_points >= 3, 'loop_min_points', "must be >= 3")
        require(self.loop_information > 0, 'loop_information', "must be > 0")
        require(self.post_refine in POST_REFINE_MODES, 'post_refine', f"must be one of {POST_REFINE_MODES}")
        require(self.refine_iterations > 0, 'refine_iterations', "must be > 0")
        require(self.focal_px >= 0, 'focal_px', "must be >= 0 (0 estimates it)")
        require(self.focal_grid_samples >= 3, 'focal_grid_samples', "must be >= 3")
        require(0 < self.focal_min_ratio < self.focal_max_ratio, 'focal_min_ratio', "must be in (0, focal_max_ratio)")
        require(self.focal_patches_per_frame > 0, 'focal_patches_per_frame', "must be > 0")
        require(self.seed >= 0, 'seed', "must be >= 0")
        return self


@dataclass
class ReconstructionState:
    """
    Everything the pipeline has estimated so far.

    Keyframe poses live in ``poses``; every other registered frame is stored
    in ``anchors`` as (keyframe id, pose relative to that keyframe).
    """

    K: CameraIntrinsics
    K_init: CameraIntrinsics
    poses: Dict[int, Pose] = field(default_factory=dict)
    anchors: Dict[int, Tuple[int, Pose]] = field(default_factory=dict)
    patches: Dict[PatchKey, Patch] = field(default_factory=dict)
    priors: Dict[int, DepthPrior] = field(default_factory=dict)
    window: List[int] = field(default_factory=list)
    init_frames: List[int] = field(default_factory=list)
    lost_frames: Set[int] = field(default_factory=set)
    alphas: Dict[int, float] = field(default_factory=dict)
    events: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def keyframes(self) -> List[int]:
        return sorted(self.poses)

    def is_registered(self, frame_id: int) -> bool:
        return frame_id in self.poses or frame_id in self.anchors

    def frame_pose(self, frame_id: int) -> Optional[Pose]:
        if frame_id in self.poses:
            return self.poses[frame_id]
        if frame_id in self.anchors:
            keyframe, rel = self.anchors[frame_id]
            return compose(rel, self.poses[keyframe])
        return None

    def trajectory(self, frame_ids: Sequence[int], timestamps: Sequence[float]) -> Trajectory:
        return Trajectory(np.asarray(timestamps), np.asarray(frame_ids),
                          [self.frame_pose(int(fid)) for fid in frame_ids])

    def log_event(self, kind: str, **payload) -> Dict[str, Any]:
        event = {'event': kind, **payload}
        self.events.append(event)
        return event


class CorrespondenceIndex:
    """
    Lookup tables over a bundle: candidate patches per frame, prior depths
    per patch and correspondence rows per (source, destination) frame pair.
    """

    def __init__(self, bundle: DatasetBundle):
        edges = bundle.edges
        src = edges['src_frame'].to_numpy(dtype=np.int64)
        dst = edges['dst_frame'].to_numpy(dtype=np.int64)
        order = np.lexsort((dst, src))
        self.src = src[order]
        self.dst = dst[order]
        self.patch = edges['patch_id'].to_numpy(dtype=np.int64)[order]
        self.observed = edges[['u', 'v']].to_numpy(dtype=float)[order]
        self.confidence = edges['confidence'].to_numpy(dtype=float)[order]
        self.prior = edges['prior_depth'].to_numpy(dtype=float)[order]

        self._pairs: Dict[Tuple[int, int], Tuple[int, int]] = {}
        if len(self.src):
            change = np.flatnonzero((np.diff(self.src) != 0) | (np.diff(self.dst) != 0)) + 1
            starts = np.concatenate([[0], change])
            stops = np.concatenate([change, [len(self.src)]])
            for a, b in zip(starts, stops):
                self._pairs[(int(self.src[a]), int(self.dst[a]))] = (int(a), int(b))

        self._patches: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        table = bundle.patches.sort_values(['frame_id', 'patch_id'])
        for fid, group in table.groupby('frame_id', sort=True):
            self._patches[int(fid)] = (group['patch_id'].to_numpy(dtype=np.int64),
                                       group[['u', 'v']].to_numpy(dtype=float))

        self._priors: Dict[int, Dict[int, float]] = {}
        for fid, group in bundle.priors.groupby('frame_id', sort=True):
            self._priors[int(fid)] = dict(zip(group['patch_id'].astype(int).tolist(),
                                              group['prior_depth'].astype(float).tolist()))

    def pairs(self) -> List[Tuple[int, int]]:
        return list(self._pairs)

    def rows(self, src: int, dst: int) -> np.ndarray:
        span = self._pairs.get((int(src), int(dst)))
        if span is None:
            return np.zeros(0, dtype=np.int64)
        return np.arange(span[0], span[1])

    def candidates(self, frame_id: int) -> Tuple[np.ndarray, np.ndarray]:
        return self._patches.get(int(frame_id), (np.zeros(0, dtype=np.int64), np.zeros((0, 2))))

    def centers(self, frame_id: int, patch_ids: np.ndarray) -> np.ndarray:
        ids, centers = self.candidates(frame_id)
        pos = np.searchsorted(ids, patch_ids)
        return centers[pos]

    def priors(self, frame_id: int) -> Dict[int, float]:
        return self._priors.get(int(frame_id), {})

    def mean_flow(self, src: int, dst: int, patch_ids: Optional[np.ndarray] = None) -> Optional[float]:
        """Mean pixel displacement of src candidates observed in dst; None without correspondences."""
        rows = self.rows(src, dst)
        if patch_ids is not None and rows.size:
            rows = rows[np.isin(self.patch[rows], patch_ids)]
        if rows.size == 0:
            return None
        centers = self.centers(src, self.patch[rows])
        return float(np.mean(np.linalg.norm(self.observed[rows] - centers, axis=1)))


# Stand-alone operations

def select_init_frames(bundle: DatasetBundle, n_init: int, flow_threshold: float,
                       index: Optional[CorrespondenceIndex] = None) -> List[int]:
    """
    Greedy scan for initialization frames.

    A frame is accepted when the mean displacement of correspondences from
    the last accepted frame reaches ``flow_threshold``; frames without any
    correspondence to it count as zero flow.

    Raises:
        InsufficientParallaxException: If fewer than n_init frames are accepted
    """
    index = index or CorrespondenceIndex(bundle)
    frame_ids = [int(f) for f in bundle.frame_ids]
    if len(frame_ids) < n_init:
        raise InsufficientParallaxException(f"Bundle has {len(frame_ids)} frames, need {n_init}")
    accepted = [frame_ids[0]]
    for fid in frame_ids[1:]:
        if len(accepted) == n_init:
            break
        flow = index.mean_flow(accepted[-1], fid)
        if (flow if flow is not None else 0.0) >= flow_threshold:
            accepted.append(fid)
    if len(accepted) < n_init:
        raise InsufficientParallaxException(
            f"Only {len(accepted)} frames reach {flow_threshold} px of flow, need {n_init}"
        )
    logger.info(f"Initialization frames: {accepted}")
    return accepted


def sample_patches(mask: Optional[np.ndarray], n_patch: int, rng: np.random.Generator,
                   candidates: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   image_size: Optional[Tuple[int, int]] = None,
                   patch_size: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """
    Uniform random patch centers outside the mask.

    With ``candidates`` (ids, centers) the draw is among unmasked candidates;
    otherwise among unmasked pixels of an image of ``image_size`` (width,
    height) kept ``patch_size // 2`` away from the border, with patch ids
    numbering the draws.

    Returns:
        (patch ids, centers (N, 2))

    Raises:
        FullyMaskedException: If every pixel is masked
    """
    if mask is not None and mask.size and np.all(mask):
        raise FullyMaskedException("Frame is fully masked")
    if mask is not None and mask.size:
        unmasked_fraction = 1.0 - float(np.mean(mask))
        if unmasked_fraction < SPARSE_MASK_FRACTION:
            logger.warning(f"Only {unmasked_fraction:.1%} of the frame is unmasked; sampling what is left")

    if candidates is not None:
        ids, centers = candidates
        keep = np.ones(len(ids), dtype=bool)
        if mask is not None and mask.size and len(ids):
            cols = np.clip(np.round(centers[:, 0]).astype(int), 0, mask.shape[1] - 1)
            rows = np.clip(np.round(centers[:, 1]).astype(int), 0, mask.shape[0] - 1)
            keep = ~mask[rows, cols]
        pool = np.flatnonzero(keep)
        take = min(n_patch, len(pool))
        chosen = np.sort(rng.choice(pool, size=take, replace=False)) if take else np.zeros(0, dtype=np.int64)
        return ids[chosen], centers[chosen]

    if image_size is None:
        if mask is None:
            raise ValueError("image_size is required when sampling without a mask or candidates")
        image_size = (mask.shape[1], mask.shape[0])
    width, height = image_size
    half = patch_size // 2
    free = np.ones((height, width), dtype=bool) if mask is None else ~mask.astype(bool)
    border = np.zeros_like(free)
    border[half:height - half, half:width - half] = True
    flat = np.flatnonzero(free & border)
    take = min(n_patch, len(flat))
    picks = np.sort(rng.choice(flat, size=take, replace=False)) if take else np.zeros(0, dtype=np.int64)
    centers = np.column_stack([picks % width, picks // width]).astype(float)
    return np.arange(take, dtype=np.int64), centers


def triangulate_rays(origins: np.ndarray, directions: np.ndarray,
                     min_eigenvalue: float = 1e-5) -> Optional[np.ndarray]:
    """Least-squares intersection of rays; None when they are nearly parallel."""
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    projectors = np.eye(3)[None, :, :] - directions[:, :, None] * directions[:, None, :]
    A = projectors.sum(axis=0)
    b = np.einsum('nij,nj->i', projectors, origins)
    if np.linalg.eigvalsh(A / len(origins))[0] < min_eigenvalue:
        return None
    point = np.linalg.solve(A, b)
    if np.any(np.einsum('ni,ni->n', point[None, :] - origins, directions) <= 0):
        return None
    return point


def _world_points(K: CameraIntrinsics, pose: Pose, centers: np.ndarray, inv_depths: np.ndarray) -> np.ndarray:
    rays = np.column_stack([(centers[:, 0] - K.cx) / K.fx, (centers[:, 1] - K.cy) / K.fy,
                            np.ones(len(centers))])
    cam = rays / inv_depths[:, None]
    return (cam - pose.translation) @ pose.R


def translation_parallax(K: CameraIntrinsics, poses: Sequence[Pose], patches: Sequence[Patch]) -> float:
    """
    Largest per-frame median pixel shift that translation alone causes for
    patches hosted by ``poses[0]``: the full reprojection against the same
    ray only rotated into each frame.
    """
    if not patches or len(poses) < 2:
        return 0.0
    centers = np.array([p.center for p in patches])
    inv = np.array([p.inv_depth for p in patches])
    world = _world_points(K, poses[0], centers, inv)
    rays = np.column_stack([(centers[:, 0] - K.cx) / K.fx, (centers[:, 1] - K.cy) / K.fy,
                            np.ones(len(centers))]) @ poses[0].R
    shifts = []
    for pose in poses[1:]:
        full = world @ pose.R.T + pose.translation
        rotated = rays @ pose.R.T
        ok = (full[:, 2] > 0) & (rotated[:, 2] > 0)
        if not np.any(ok):
            continue
        shift = K.fx * np.linalg.norm(full[ok, :2] / full[ok, 2:] - rotated[ok, :2] / rotated[ok, 2:], axis=1)
        shifts.append(float(np.median(shift)))
    return max(shifts) if shifts else 0.0


@dataclass
class _Bootstrap:
    poses: Dict[int, Pose]
    patches: Dict[PatchKey, Patch]
    priors: Dict[int, DepthPrior]
    anchor: Optional[PatchKey]
    residual: float


class SlamPipeline:
    """Runs the incremental reconstruction over one bundle."""

    def __init__(self, bundle: DatasetBundle, config: Optional[PipelineConfig] = None):
        self.logger = logging.getLogger(LOGGER_NAME)
        self.bundle = bundle
        self.config = (config or PipelineConfig()).validate()
        self.index = CorrespondenceIndex(bundle)
        self.adjuster = BundleAdjuster()
        self.rng = make_rng(self.config.seed, Stream.SAMPLING)
        self.state: Optional[ReconstructionState] = None
        self.timings: Dict[str, float] = {}
        self._anchor: Optional[PatchKey] = None
        self._last_alpha = 1.0
        # (src, dst) -> (patch ids, edges) for every unmasked correspondence of the pair
        self._edge_cache: Dict[Tuple[int, int], Tuple[np.ndarray, List[CorrespondenceEdge]]] = {}
        # keyframe -> keys of the map patches it hosts
        self._hosted: Dict[int, List[PatchKey]] = {}

        self.store = DescriptorStore(self.config.loop_similarity, self.config.loop_temporal_exclusion)
        self.confirmer = LoopConfirmer(self.config.loop_consecutive, self.config.loop_progression_tolerance,
                                       self.config.loop_cooldown)
        self._descriptors = {d.frame_id: d for d in bundle.descriptors()}
        self.loop_edges: List[Sim3Edge] = []

    # Helpers

    def _mask(self, frame_id: int) -> Optional[np.ndarray]:
        if not self.config.use_masks:
            return None
        return self.bundle.masks.get(int(frame_id))

    def _sample(self, frame_id: int, n_patch: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        mask = self._mask(frame_id)
        try:
            return sample_patches(mask, n_patch, rng, candidates=self.index.candidates(frame_id),
                                  patch_size=self.config.patch_size)
        except FullyMaskedException:
            self.logger.warning(f"Frame {frame_id} is fully masked; it gets no patches")
            return np.zeros(0, dtype=np.int64), np.zeros((0, 2))

    def _edges(self, frames: Sequence[int], patches: Dict[PatchKey, Patch],
               involving: Optional[int] = None) -> List[CorrespondenceEdge]:
        """Correspondences among ``frames`` for the given patches (optionally only those touching one frame)."""
        selected: Dict[int, np.ndarray] = {}
        for fid, pid in patches:
            selected.setdefault(fid, []).append(pid)
        selected = {fid: np.array(ids, dtype=np.int64) for fid, ids in selected.items()}

        edges = []
        for src in frames:
            if src not in selected:
                continue
            for dst in frames:
                if dst == src or (involving is not None and involving not in (src, dst)):
                    continue
                patch_ids, pair = self._pair_edges(src, dst)
                if not pair:
                    continue
                keep = np.isin(patch_ids, selected[src])
                edges.extend(edge for edge, ok in zip(pair, keep.tolist()) if ok)
        return edges

    def _pair_edges(self, src: int, dst: int) -> Tuple[np.ndarray, List[CorrespondenceEdge]]:
        """Every correspondence of src's candidates in dst that lands outside dst's mask."""
        key = (src, dst)
        cached = self._edge_cache.get(key)
        if cached is not None:
            return cached
        rows = self.index.rows(src, dst)
        mask = self._mask(dst)
        if mask is not None and rows.size:
            uv = self.index.observed[rows]
            cols = np.clip(np.round(uv[:, 0]).astype(int), 0, mask.shape[1] - 1)
            rr = np.clip(np.round(uv[:, 1]).astype(int), 0, mask.shape[0] - 1)
            rows = rows[~mask[rr, cols]]
        patch_ids = self.index.patch[rows]
        pair = [CorrespondenceEdge(src, pid, dst, uv, conf, prior)
                for pid, uv, conf, prior in zip(patch_ids.tolist(), self.index.observed[rows],
                                                self.index.confidence[rows].tolist(),
                                                self.index.prior[rows].tolist())]
        self._edge_cache[key] = (patch_ids, pair)
        return patch_ids, pair

    def _evict_edges(self, frames: Sequence[int]) -> None:
        """Forget cached correspondences of pairs not inside ``frames``."""
        keep = set(frames)
        self._edge_cache = {key: value for key, value in self._edge_cache.items()
                            if key[0] in keep and key[1] in keep}

    def _frame_patches(self, frames: Sequence[int],
                       patches: Optional[Dict[PatchKey, Patch]] = None) -> Dict[PatchKey, Patch]:
        """Patches hosted by ``frames``; without ``patches`` the map's, looked up per keyframe."""
        if patches is None:
            state = self.state
            return {key: state.patches[key] for f in frames for key in self._hosted.get(f, ())}
        frame_set = set(frames)
        return {k: p for k, p in patches.items() if k[0] in frame_set}

    def _new_patches(self, frame_id: int, ids: np.ndarray, centers: np.ndarray, alpha: float,
                     fallback_inv_depth: float) -> Tuple[Dict[PatchKey, Patch], DepthPrior]:
        priors = self.index.priors(frame_id)
        patches = {}
        depths = {}
        for pid, center in zip(ids.tolist(), centers):
            depth = priors.get(pid)
            if depth is not None and np.isfinite(depth) and depth > 0:
                depths[pid] = float(depth)
                inv = alpha / depth
            else:
                inv = fallback_inv_depth
            patches[(frame_id, pid)] = Patch(frame_id, pid, center, inv, self.config.patch_size)
        return patches, DepthPrior(frame_id, depths, alpha)

    def _motion_seed(self, frame_id: int, previous: Sequence[int]) -> Pose:
        """Constant-velocity prediction from the two most recent registered frames."""
        state = self.state
        last = [f for f in previous if state.is_registered(f)][-2:]
        if not last:
            return Pose.identity()
        if len(last) == 1:
            return state.frame_pose(last[0])
        G_a, G_b = state.frame_pose(last[0]), state.frame_pose(last[1])
        velocity = relative(G_a, G_b)
        steps = (frame_id - last[1]) / max(last[1] - last[0], 1)
        pose = G_b
        for _ in range(max(int(round(steps)), 1)):
            pose = compose(velocity, pose)
        return pose

    def _covisible_alpha(self, frame_id: int, pose: Pose, keyframes: Sequence[int]) -> float:
        """
        Scale of the frame's monocular depths against the map, evaluated on
        patches of the latest keyframes observed in this frame.
        """
        state = self.state
        priors, inv_depths = [], []
        for k in keyframes[-3:]:
            rows = self.index.rows(k, frame_id)
            if rows.size == 0:
                continue
            keys = [(k, int(p)) for p in self.index.patch[rows]]
            keep = np.array([key in state.patches for key in keys], dtype=bool)
            rows = rows[keep]
            if rows.size == 0:
                continue
            patches = [state.patches[(k, int(p))] for p in self.index.patch[rows]]
            centers = np.array([p.center for p in patches])
            inv = np.array([p.inv_depth for p in patches])
            world = _world_points(state.K, state.poses[k], centers, inv)
            z = (world @ pose.R.T + pose.translation)[:, 2]
            ok = (z > 0) & np.isfinite(self.index.prior[rows]) & (self.index.prior[rows] > 0)
            priors.extend(self.index.prior[rows][ok].tolist())
            inv_depths.extend((1.0 / z[ok]).tolist())
        return align_prior_scale(priors, inv_depths, self.config.alpha_formula)

    def _window(self, frames: Sequence[int], fixed: Set[int], mu: Optional[float] = None,
                poses: Optional[Dict[int, Pose]] = None,
                patches: Optional[Dict[PatchKey, Patch]] = None,
                priors: Optional[Dict[int, DepthPrior]] = None,
                fixed_patches: Optional[Set[PatchKey]] = None, optimize_focal: bool = False,
                K: Optional[CameraIntrinsics] = None) -> BAWindow:
        state = self.state
        poses = state.poses if poses is None else poses
        priors = state.priors if priors is None else priors
        window_patches = self._frame_patches(frames, patches)
        return BAWindow(
            K=K or state.K,
            frame_ids=list(frames),
            poses={f: poses[f] for f in frames},
            patches=window_patches,
            edges=self._edges(frames, window_patches),
            priors={f: priors[f] for f in frames if f in priors},
            mu=self.config.mu if mu is None else mu,
            huber_delta=self.config.huber_delta,
            fixed_frames=set(fixed),
            fixed_patches=set(fixed_patches or ()),
            depth_residual_space=self.config.depth_residual_space,
            optimize_focal=optimize_focal,
        )

    # Initialization

    def _bootstrap(self, frames: Sequence[int], K: CameraIntrinsics,
                   selection: Dict[int, Tuple[np.ndarray, np.ndarray]], mu: float) -> _Bootstrap:
        """
        Incremental bundle adjustment over the initialization frames.

        The first frame and one patch of it are held fixed; the scale gauge
        comes from that patch's initial depth.
        """
        iterations = self.config.init_iterations
        poses: Dict[int, Pose] = {}
        patches: Dict[PatchKey, Patch] = {}
        priors: Dict[int, DepthPrior] = {}
        anchor: Optional[PatchKey] = None
        alpha = None

        for i, fid in enumerate(frames):
            if i == 0:
                poses[fid] = Pose.identity()
            elif i == 1:
                poses[fid] = poses[frames[0]]
            else:
                velocity = relative(poses[frames[i - 2]], poses[frames[i - 1]])
                poses[fid] = compose(velocity, poses[frames[i - 1]])

            ids, centers = selection[fid]
            if alpha is None:
                depths = [d for d in (self.index.priors(fid).get(p) for p in ids.tolist())
                          if d is not None and np.isfinite(d) and d > 0]
                alpha = float(np.median(depths)) if depths else 1.0
            known = [p.inv_depth for p in patches.values()]
            fallback = float(np.median(known)) if known else 1.0
            new, prior = self._new_patches(fid, ids, centers, alpha, fallback)
            patches.update(new)
            priors[fid] = prior
            if i == 0:
                continue

            if anchor is None:
                rows = self.index.rows(frames[0], fid)
                counts = [(int(np.sum(self.index.patch[rows] == p)), -p) for p in selection[frames[0]][0]]
                if counts:
                    best = max(counts)
                    if best[0] > 0:
                        anchor = (frames[0], -best[1])

            window = self._window(frames[:i + 1], {frames[0]}, mu=0.0, poses=poses, patches=patches,
                                  priors=priors, fixed_patches={anchor} if anchor else set(), K=K)
            self.adjuster.solve(window, iterations)
            poses.update(window.poses)

        if mu > 0:
            for fid in frames:
                own = [(priors[fid].prior_depths[p.patch_id], p.inv_depth)
                       for key, p in patches.items() if key[0] == fid and p.patch_id in priors[fid].prior_depths]
                if own:
                    priors[fid].alpha = align_prior_scale([d for d, _ in own], [inv for _, inv in own],
                                                          self.config.alpha_formula)
            window = self._window(frames, {frames[0]}, mu=mu, poses=poses, patches=patches, priors=priors,
                                  fixed_patches={anchor} if anchor else set(), K=K)
            self.adjuster.solve(window, iterations)
            poses.update(window.poses)

        window = self._window(frames, {frames[0]}, mu=0.0, poses=poses, patches=patches, priors=priors, K=K)
        residuals = self.adjuster.edge_residuals(window)
        finite = residuals[np.isfinite(residuals)]
        residual = float(np.median(finite)) if finite.size else float('inf')
        return _Bootstrap(poses, patches, priors, anchor, residual)

    def estimate_focal(self, init_frames: Sequence[int],
                       candidate_range: Optional[Tuple[float, float]] = None) -> CameraIntrinsics:
        """
        Focal length from the initialization frames.

        Candidates on a log grid over ``candidate_range`` times the image
        width are scored by the median reprojection error of a bootstrap
        solve without depth priors. The best one is refined with a bounded
        scalar search between its grid neighbours, each evaluation a single
        joint solve warm-started from the best grid bootstrap. The principal
        point is the image center and fx = fy.

        Raises:
            DegenerateGeometryException: If the initialization frames have no
                baseline or their flow is explained by rotation alone
        """
        cfg = self.config
        low, high = candidate_range or (cfg.focal_min_ratio, cfg.focal_max_ratio)
        width, height = self.bundle.width, self.bundle.height
        rng = make_rng(cfg.seed, Stream.FOCAL)
        selection = {fid: self._sample(fid, cfg.focal_patches_per_frame, rng) for fid in init_frames}

        def bootstrap(focal: float) -> Optional[_Bootstrap]:
            try:
                return self._bootstrap(init_frames, CameraIntrinsics.centered(focal, width, height),
                                       selection, mu=0.0)
            except SlamException as e:
                self.logger.debug(f"Focal {focal:.2f} px failed: {str(e)}")
                return None

        grid = np.geomspace(low * width, high * width, cfg.focal_grid_samples)
        boots = [bootstrap(f) for f in grid]
        scores = np.array([b.residual if b is not None else float('inf') for b in boots])
        if not np.any(np.isfinite(scores)):
            raise DegenerateGeometryException("No focal candidate produced a valid bootstrap")
        best = int(np.nanargmin(np.where(np.isfinite(scores), scores, np.nan)))
        start = boots[best]
        self.logger.debug(f"Focal grid scores: {np.round(scores, 4).tolist()}")

        def refit(focal: float) -> Tuple[float, BAWindow]:
            K = CameraIntrinsics.centered(focal, width, height)
            patches = {key: copy.copy(p) for key, p in start.patches.items()}
            window = self._window(init_frames, {init_frames[0]}, mu=0.0, poses=start.poses, patches=patches,
                                  priors=start.priors, fixed_patches={start.anchor} if start.anchor else set(),
                                  K=K)
            try:
                result = self.adjuster.solve(window, cfg.init_iterations)
            except SlamException as e:
                self.logger.debug(f"Focal {focal:.4f} px refit failed: {str(e)}")
                return float('inf'), window
            finite = result.residual_norms[np.isfinite(result.residual_norms)]
            return (float(np.median(finite)) if finite.size else float('inf')), window

        lo = grid[max(best - 1, 0)]
        hi = grid[min(best + 1, len(grid) - 1)]
        search = minimize_scalar(lambda f: refit(f)[0], bounds=(lo, hi), method='bounded',
                                 options={'xatol': 1e-7 * grid[best]})
        focal = float(search.x) if search.fun <= scores[best] else float(grid[best])
        residual, window = refit(focal)
        if not np.isfinite(residual):
            focal, residual = float(grid[best]), float(scores[best])
            poses, patches = start.poses, start.patches
        else:
            poses, patches = window.poses, window.patches

        K = CameraIntrinsics.centered(focal, width, height)
        centers = np.array([poses[f].center() for f in init_frames])
        baseline = float(np.max(np.linalg.norm(centers[:, None] - centers[None, :], axis=2)))
        depth = float(np.median([1.0 / p.inv_depth for p in patches.values()]))
        if baseline / depth < DEGENERATE_BASELINE_RATIO:
            raise DegenerateGeometryException(
                f"Initialization frames are rotation-only (baseline/depth {baseline / depth:.2e}); "
                f"focal length is unobservable, extend the initialization window"
            )
        parallax = translation_parallax(K, [poses[f] for f in init_frames],
                                        [p for key, p in patches.items() if key[0] == init_frames[0]])
        if parallax < DEGENERATE_PARALLAX_PX:
            raise DegenerateGeometryException(
                f"Initialization frames are rotation-only (translation parallax {parallax:.3f} px); "
                f"focal length is unobservable, extend the initialization window"
            )
        self.logger.info(f"Estimated focal length: {focal:.3f} px (median residual {residual:.4f} px)")
        return K

    def initialize(self) -> ReconstructionState:
        """Select init frames, fix K and bootstrap the first window."""
        cfg = self.config
        start = time.perf_counter()
        init_frames = select_init_frames(self.bundle, cfg.n_init, cfg.flow_threshold_px, self.index)
        if cfg.focal_px > 0:
            K = CameraIntrinsics.centered(cfg.focal_px, self.bundle.width, self.bundle.height)
        else:
            K = self.estimate_focal(init_frames)
        self.timings['focal'] = time.perf_counter() - start

        selection = {fid: self._sample(fid, cfg.patches_per_frame, self.rng) for fid in init_frames}
        boot = self._bootstrap(init_frames, K, selection, mu=cfg.mu)
        self.state = ReconstructionState(K=K, K_init=K, poses=dict(boot.poses), patches=boot.patches,
                                         priors=boot.priors, window=list(init_frames),
                                         init_frames=list(init_frames))
        self._anchor = boot.anchor
        self._hosted = {}
        for key in sorted(boot.patches):
            self._hosted.setdefault(key[0], []).append(key)
        for fid in init_frames:
            self.state.alphas[fid] = boot.priors[fid].alpha
        self._last_alpha = boot.priors[init_frames[-1]].alpha

        frame_set = set(int(x) for x in self.bundle.frame_ids)
        for fid in range(init_frames[0], init_frames[-1]):
            if fid in frame_set and fid not in boot.poses:
                self._register_between(fid)

        self.state.log_event('init', frames=list(init_frames), focal=round(K.fx, 6),
                             residual=round(boot.residual, 9))
        self.logger.info(f"Initialized on frames {init_frames[0]}..{init_frames[-1]} with f = {K.fx:.3f} px")
        self.timings['init'] = time.perf_counter() - start
        for fid in range(init_frames[0], init_frames[-1] + 1):
            if fid in frame_set:
                self._enqueue_descriptor(fid)
        return self.state

    def _register_between(self, frame_id: int) -> None:
        """Pose-only registration of a frame skipped during initialization."""
        state = self.state
        keyframes = state.keyframes
        earlier = [k for k in keyframes if k < frame_id]
        anchor = earlier[-1] if earlier else keyframes[0]
        seed = state.poses[anchor]
        frames = keyframes + [frame_id]
        poses = dict(state.poses)
        poses[frame_id] = seed
        patches = self._frame_patches(keyframes)
        window = BAWindow(K=state.K, frame_ids=frames, poses={f: poses[f] for f in frames},
                          patches=patches, edges=self._edges(frames, patches, involving=frame_id),
                          mu=0.0, huber_delta=self.config.huber_delta,
                          fixed_frames=set(keyframes), fixed_patches=set(patches))
        try:
            self.adjuster.solve(window, self.config.init_iterations)
            pose = window.poses[frame_id]
        except OptimizationException as e:
            self.logger.warning(f"Frame {frame_id} kept its seed pose: {str(e)}")
            state.lost_frames.add(frame_id)
            pose = seed
        state.anchors[frame_id] = (anchor, relative(state.poses[anchor], pose))

    # Tracking

    def _solve_current_window(self) -> Tuple[BAWindow, BAResult]:
        """Window BA with the two oldest window frames fixed."""
        state = self.state
        frames = list(state.window)
        fixed = set(frames[:2])
        window = self._window(frames, fixed)
        result = self.adjuster.solve(window, self.config.ba_iterations)
        state.poses.update({f: window.poses[f] for f in frames if f not in fixed})
        return window, result

    def _track(self, frame_id: int, seed: Pose, keyframes: Sequence[int]) -> Pose:
        """Pose-only registration of a new frame against the window map; the seed when it fails."""
        state = self.state
        frames = list(keyframes) + [frame_id]
        poses = {f: state.poses[f] for f in keyframes}
        poses[frame_id] = seed
        patches = self._frame_patches(keyframes)
        edges = self._edges(frames, patches, involving=frame_id)
        if not edges:
            return seed
        window = BAWindow(K=state.K, frame_ids=frames, poses=poses, patches=patches, edges=edges,
                          mu=0.0, huber_delta=self.config.huber_delta,
                          fixed_frames=set(keyframes), fixed_patches=set(patches))
        try:
            self.adjuster.solve(window, self.config.ba_iterations)
        except OptimizationException as e:
            self.logger.debug(f"Frame {frame_id} tracking kept the motion seed: {str(e)}")
            return seed
        return window.poses[frame_id]

    def process_frame(self, frame_id: int) -> ReconstructionState:
        """
        Register one frame: seed, track against the window map, align its
        prior scale, sample, solve the window once, decide keyframes and
        feed the loop detector.

        A frame whose solve fails or ends with a median residual above
        ``tracking_lost_px`` keeps its tracked pose, anchored to the newest
        keyframe, and is flagged as lost.
        """
        cfg = self.config
        state = self.state
        registered = sorted(set(state.poses) | set(state.anchors))
        seed = self._motion_seed(frame_id, [f for f in registered if f < frame_id][-2:])

        keyframes = list(state.window)
        tracked = self._track(frame_id, seed, keyframes)
        try:
            alpha = self._covisible_alpha(frame_id, tracked, keyframes)
        except EmptyHistoryException:
            alpha = self._last_alpha
        window_patches = self._frame_patches(keyframes)
        window_inv = [p.inv_depth for p in window_patches.values()]
        fallback = float(np.median(window_inv)) if window_inv else 1.0
        ids, centers = self._sample(frame_id, cfg.patches_per_frame, self.rng)
        new, prior = self._new_patches(frame_id, ids, centers, alpha, fallback)

        saved_poses = {f: state.poses[f] for f in keyframes}
        saved_depths = {k: p.inv_depth for k, p in window_patches.items()}
        state.poses[frame_id] = tracked
        state.patches.update(new)
        self._hosted[frame_id] = sorted(new)
        state.priors[frame_id] = prior
        state.window.append(frame_id)

        lost_reason = None
        try:
            window, result = self._solve_current_window()
            touching = np.array([frame_id in (e.src_frame, e.dst_frame) for e in window.edges], dtype=bool)
            values = result.residual_norms[touching] if touching.size else np.zeros(0)
            values = values[np.isfinite(values)]
            if values.size == 0:
                lost_reason = "no valid correspondences"
            elif np.median(values) > cfg.tracking_lost_px:
                lost_reason = f"median residual {np.median(values):.2f} px"
        except OptimizationException as e:
            lost_reason = str(e)

        if lost_reason is not None:
            error = TrackingLostException(f"Tracking lost at frame {frame_id}: {lost_reason}")
            self.logger.warning(f"{str(error)}; keeping the tracked pose")
            state.poses.update(saved_poses)
            for key, inv in saved_depths.items():
                state.patches[key].inv_depth = inv
            self._retire(frame_id, keyframes[-1], tracked)
            state.lost_frames.add(frame_id)
            state.log_event('tracking_lost', frame=frame_id, reason=lost_reason)
            state.alphas[frame_id] = prior.alpha
            return state

        if cfg.mu > 0:
            # takes effect from the next solve of this window
            try:
                prior.alpha = self._covisible_alpha(frame_id, state.poses[frame_id], keyframes)
            except EmptyHistoryException:
                pass
        self._last_alpha = prior.alpha
        state.alphas[frame_id] = prior.alpha
        self.keyframe_decision()
        while len(state.window) > cfg.window_size:
            state.window.pop(0)
        self._evict_edges(state.window)

        loop = self._enqueue_descriptor(frame_id)
        if loop is not None:
            self.close_loop(*loop)
        return state

    def _retire(self, frame_id: int, keyframe: int, pose: Pose) -> None:
        """Turn a frame into a non-keyframe anchored to ``keyframe``."""
        state = self.state
        to_keyframe = relative(state.poses[keyframe], pose)
        for other, (host, rel) in list(state.anchors.items()):
            if host == frame_id:
                state.anchors[other] = (keyframe, compose(rel, to_keyframe))
        state.anchors[frame_id] = (keyframe, to_keyframe)
        state.poses.pop(frame_id, None)
        if frame_id in state.window:
            state.window.remove(frame_id)
        for key in self._hosted.pop(frame_id, []):
            state.patches.pop(key, None)
        state.priors.pop(frame_id, None)

    def keyframe_decision(self) -> Optional[int]:
        """
        Drop the newest-but-one window frame when its mean flow to the
        keyframe before it is below ``keyframe_flow_px``.

        Returns:
            Id of the removed frame, or None when it is kept
        """
        state = self.state
        if len(state.window) < 3:
            return None
        previous, candidate = state.window[-3], state.window[-2]
        flows = [f for f in (self.index.mean_flow(previous, candidate), self.index.mean_flow(candidate, previous))
                 if f is not None]
        if not flows or np.mean(flows) >= self.config.keyframe_flow_px:
            return None

        self._retire(candidate, previous, state.poses[candidate])
        self.logger.debug(f"Frame {candidate} is not a keyframe (flow {np.mean(flows):.2f} px)")
        return candidate

    # Loop closure

    def _enqueue_descriptor(self, frame_id: int) -> Optional[Tuple[int, int]]:
        if not self.config.use_loop_closure:
            return None
        descriptor = self._descriptors.get(frame_id)
        if descriptor is None:
            return None
        candidate = self.store.query(descriptor)
        self.store.add(descriptor)
        return self.confirmer.push(candidate)

    def _loop_points(self, old_keyframes: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Old-map world points and the same points triangulated from the current
        window; rays meeting at less than LOOP_MIN_PARALLAX_DEG are skipped.
        """
        state = self.state
        K = state.K
        old_points, new_points = [], []
        for k in old_keyframes:
            if not self._hosted.get(k):
                continue
            observations: Dict[int, List[Tuple[int, np.ndarray]]] = {}
            for j in state.window:
                rows = self.index.rows(k, j)
                for r in rows:
                    pid = int(self.index.patch[r])
                    if (k, pid) in state.patches:
                        observations.setdefault(pid, []).append((j, self.index.observed[r]))
            for pid, obs in observations.items():
                if len(obs) < 2:
                    continue
                origins = np.array([state.poses[j].center() for j, _ in obs])
                directions = np.array([state.poses[j].R.T @ np.array([(uv[0] - K.cx) / K.fx,
                                                                     (uv[1] - K.cy) / K.fy, 1.0])
                                       for j, uv in obs])
                unit = directions / np.linalg.norm(directions, axis=1, keepdims=True)
                spread = np.degrees(np.arccos(np.clip(np.min(unit @ unit.T), -1.0, 1.0)))
                if spread < LOOP_MIN_PARALLAX_DEG:
                    continue
                point = triangulate_rays(origins, directions)
                if point is None:
                    continue
                patch = state.patches[(k, pid)]
                old_points.append(_world_points(K, state.poses[k], patch.center[None, :],
                                                np.array([patch.inv_depth]))[0])
                new_points.append(point)
        return np.array(old_points).reshape(-1, 3), np.array(new_points).reshape(-1, 3)

    def close_loop(self, query: int, match: int) -> bool:
        """
        Add a loop edge between the keyframe nearest ``match`` and ``query``,
        optimize the SIM(3) pose graph, fold the node scales back into poses
        and depths, then settle the window.

        Returns:
            True if the correction was applied, False if the loop was rejected
        """
        cfg = self.config
        state = self.state
        if query not in state.poses:
            state.log_event('loop_rejected', query=query, match=match, reason='query is not a keyframe')
            return False
        in_window = set(state.window)
        old = [k for k in state.keyframes if abs(k - match) <= LOOP_NEIGHBOURHOOD and k not in in_window]
        if not old:
            outside = [k for k in state.keyframes if k not in in_window]
            if not outside:
                state.log_event('loop_rejected', query=query, match=match, reason='no old keyframes')
                return False
            old = [min(outside, key=lambda k: abs(k - match))]
        reference = min(old, key=lambda k: abs(k - match))

        old_points, new_points = self._loop_points(old)
        try:
            measurement = estimate_loop_measurement(old_points, new_points, state.poses[reference],
                                                    state.poses[query], cfg.loop_min_points,
                                                    LOOP_MAX_RELATIVE_RMSE)
        except LoopRejectedException as e:
            self.logger.warning(f"Loop {query} -> {match} rejected: {str(e)}")
            state.log_event('loop_rejected', query=query, match=match, reason=str(e))
            return False

        state.log_event('loop', query=query, match=match, reference=reference, inliers=measurement.inliers,
                        rmse=round(measurement.rmse, 9), scale=round(measurement.measurement.scale, 9))

        keyframes = state.keyframes
        nodes, edges = lift_trajectory([state.poses[k] for k in keyframes], keyframes)
        # Earlier loops are already absorbed into the unit-scale poses
        loop_edge = Sim3Edge(reference, query, measurement.measurement, 'loop', cfg.loop_information * np.eye(7))
        self.loop_edges.append(loop_edge)
        edges.append(loop_edge)
        graph = PoseGraph(nodes, edges)
        graph.set_fixed(query)
        result = PoseGraphOptimizer().optimize(graph)
        self._apply_graph(graph.nodes)

        try:
            self._solve_current_window()
        except OptimizationException as e:
            self.logger.warning(f"Settling after loop correction failed: {str(e)}")

        state.log_event('pgo', query=query, iterations=result.iterations,
                        cost_before=round(result.initial_cost, 9), cost_after=round(result.final_cost, 9),
                        loop_residual_before=round(result.loop_residuals_before[-1], 9),
                        loop_residual_after=round(result.loop_residuals_after[-1], 9))
        self.logger.info(
            f"Loop {query} -> {reference} corrected: residual {result.loop_residuals_before[-1]:.4g} -> "
            f"{result.loop_residuals_after[-1]:.4g}"
        )
        return True

    def _apply_graph(self, nodes: Sequence[Sim3Node]) -> None:
        state = self.state
        scales = {node.frame_id: node.pose.scale for node in nodes}
        anchors = {fid: kf for fid, (kf, _) in state.anchors.items()}
        poses, patches = apply_correction(nodes, state.patches, anchors)
        state.poses.update(poses)
        state.patches = patches
        for fid, (kf, rel) in list(state.anchors.items()):
            s = scales.get(kf, 1.0)
            state.anchors[fid] = (kf, Pose(rel.rotation, rel.translation / s))
        for fid, prior in state.priors.items():
            if prior.alpha is not None and fid in scales:
                prior.alpha *= scales[fid]

    # Post refinement

    def _global_window(self, fixed: Set[int], fixed_patches: Set[PatchKey], optimize_focal: bool) -> BAWindow:
        """Every keyframe and map patch with all their correspondences."""
        state = self.state
        frames = state.keyframes
        return BAWindow(K=state.K, frame_ids=frames, poses=dict(state.poses), patches=state.patches,
                        edges=self._edges(frames, state.patches), priors=state.priors, mu=self.config.mu,
                        huber_delta=self.config.huber_delta, fixed_frames=set(fixed),
                        fixed_patches=set(fixed_patches),
                        depth_residual_space=self.config.depth_residual_space,
                        optimize_focal=optimize_focal)

    def post_refine(self, mode: Optional[str] = None) -> Dict[str, float]:
        """
        Re-triangulate every patch with poses fixed, refine the focal length
        alone, alternating a few times; optionally finish with a global
        bundle adjustment over keyframes, patches and focal length.

        Returns:
            Dict with cost_before, cost_after, focal_before, focal_after

        Raises:
            RefinementDivergedException: If the cost rose or K left the
                +/-20% band around K_init; the state is rolled back
        """
        mode = mode or self.config.post_refine
        if mode == 'off':
            return {}
        if mode not in POST_REFINE_MODES:
            raise InvalidValueException('post_refine', f"must be one of {POST_REFINE_MODES} (got {mode!r})")

        state = self.state
        start = time.perf_counter()
        snapshot = copy.deepcopy((state.K, state.poses, state.patches, state.priors))
        keyframes = state.keyframes
        all_frames = set(keyframes)

        window = self._global_window(all_frames, set(), False)
        cost_before = self.adjuster.cost(window)
        focal_before = state.K.fx
        try:
            for _ in range(REFINE_ALTERNATIONS):
                window = self._global_window(all_frames, set(), False)
                self.adjuster.solve(window, self.config.refine_iterations)
                window = self._global_window(all_frames, set(state.patches), True)
                self.adjuster.solve(window, self.config.refine_iterations)
                state.K = window.K

            if mode == 'retriangulate+global_ba':
                gauge = {keyframes[0]}
                anchor = {self._anchor} if (self._anchor in state.patches and self.config.mu == 0) else set()
                if not anchor and self.config.mu == 0:
                    first = sorted(k for k in state.patches if k[0] == keyframes[0])
                    anchor = set(first[:1])
                window = self._global_window(gauge, anchor, True)
                self.adjuster.solve(window, self.config.refine_iterations)
                state.K = window.K
                state.poses.update(window.poses)

            window = self._global_window(all_frames, set(), False)
            cost_after = self.adjuster.cost(window)
            ratio = state.K.fx / state.K_init.fx
            problem = None
            if cost_after > cost_before * (1.0 + 1e-9) + 1e-12:
                problem = f"cost increased {cost_before:.6g} -> {cost_after:.6g}"
            elif abs(ratio - 1.0) > FOCAL_GUARD:
                problem = f"focal moved to {state.K.fx:.3f} px, {ratio:.3f}x the initial estimate"
            if problem is not None:
                raise RefinementDivergedException(f"Post-refinement diverged: {problem}")
        except (RefinementDivergedException, OptimizationException) as e:
            state.K, state.poses, state.patches, state.priors = snapshot
            state.log_event('refine_diverged', mode=mode, reason=str(e))
            self.logger.error(f"{str(e)}; state rolled back")
            if isinstance(e, RefinementDivergedException):
                raise
            raise RefinementDivergedException(f"Post-refinement failed: {str(e)}")
        finally:
            self._evict_edges(state.window)

        summary = {'cost_before': cost_before, 'cost_after': cost_after,
                   'focal_before': focal_before, 'focal_after': state.K.fx}
        state.log_event('refine', mode=mode, **{k: round(v, 9) for k, v in summary.items()})
        self.logger.info(
            f"Post-refinement ({mode}): cost {cost_before:.6g} -> {cost_after:.6g}, "
            f"f {focal_before:.3f} -> {state.K.fx:.3f} px"
        )
        self.timings['refine'] = time.perf_counter() - start
        return summary

    # Driver

    def run(self) -> ReconstructionState:
        """Initialize, register every remaining frame and post-refine."""
        self.initialize()
        start = time.perf_counter()
        for fid in self.bundle.frame_ids:
            fid = int(fid)
            if self.state.is_registered(fid):
                continue
            self.process_frame(fid)
        self.timings['tracking'] = time.perf_counter() - start
        self.logger.info(
            f"Tracked {self.bundle.frame_count} frames: {len(self.state.keyframes)} keyframes, "
            f"{len(self.state.lost_frames)} lost, "
            f"{sum(1 for e in self.state.events if e['event'] == 'loop')} loop(s)"
        )
        if self.config.post_refine != 'off':
            self.post_refine()
        return self.state

    def trajectory(self) -> Trajectory:
        return self.state.trajectory(self.bundle.frame_ids, self.bundle.timestamps)

    def pose_graph(self) -> PoseGraph:
        """Current keyframes as a SIM(3) graph with odometry and every accepted loop edge, for export."""
        keyframes = self.state.keyframes
        nodes, edges = lift_trajectory([self.state.poses[k] for k in keyframes], keyframes)
        known = set(keyframes)
        edges += [e for e in self.loop_edges if e.src in known and e.dst in known]
        graph = PoseGraph(nodes, edges)
        graph.set_fixed(keyframes[0])
        return graph


def run_pipeline(bundle: DatasetBundle, config: Optional[PipelineConfig] = None) -> SlamPipeline:
    """Convenience function: run the whole pipeline and return it with its final state."""
    pipeline = SlamPipeline(bundle, config)
    pipeline.run()
    return pipeline
