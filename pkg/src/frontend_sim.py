"""
Deterministic synthetic front-end.

Generates a ground-truth world (street-like landmarks, a scripted camera
trajectory, optional moving objects and drifting sky points) and derives
everything the reconstruction pipeline consumes from it: candidate patches,
correspondence edges, monocular depth priors, dynamic-object masks and
place-recognition descriptors. With all noise off every emitted artifact is
exactly consistent with the ground truth, which makes the simulator the
verification oracle for the rest of the package.

World axes are X east, Y north, Z up; the camera rides at eye height and
looks along its heading.
"""

import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .eval_metrics import Trajectory
    from .exceptions import InvalidSpecException, ValidationException
    from .lie_geometry import CameraIntrinsics, Pose
    from .loop_detection import DEFAULT_DIMENSION, Descriptor
    from .utils import LOGGER_NAME
    from .window_ba import Patch, PatchKey
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from eval_metrics import Trajectory
    from exceptions import InvalidSpecException, ValidationException
    from lie_geometry import CameraIntrinsics, Pose
    from loop_detection import DEFAULT_DIMENSION, Descriptor
    from utils import LOGGER_NAME
    from window_ba import Patch, PatchKey


logger = logging.getLogger(LOGGER_NAME)

SEGMENT_KINDS = ('forward', 'arc', 'pure_rotation', 'pause')
LAYOUTS = ('street', 'sphere')

EYE_HEIGHT = 1.6
MIN_VISIBLE_DEPTH = 1.0
MAX_VISIBLE_DEPTH = 1000.0
IMAGE_MARGIN = 2.0
MASK_DILATION = 2
HEADING_BINS = 8
DYNAMIC_LANE_HALF_WIDTH = 8.0
# street continues this far past the last camera position
STREET_LOOKAHEAD = 15.0

PATCH_COLUMNS = ['frame_id', 'patch_id', 'u', 'v']
EDGE_COLUMNS = ['src_frame', 'patch_id', 'dst_frame', 'u', 'v', 'confidence', 'prior_depth']
PRIOR_COLUMNS = ['frame_id', 'patch_id', 'prior_depth']

STATIC, DYNAMIC, SKY = 0, 1, 2


class Stream(IntEnum):
    """Random stream ids; each subsystem draws from its own Philox key."""

    LANDMARKS = 1
    DYNAMIC = 2
    SKY = 3
    POOL = 4
    PIXEL_NOISE = 5
    PRIOR_NOISE = 6
    PRIOR_WALK = 7
    DESCRIPTORS = 8
    SAMPLING = 9
    FOCAL = 10


def make_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream)."""
    key = np.array([int(seed), int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# World description types

@dataclass
class Segment:
    """One piece of a trajectory script; ``frames`` camera steps of the given kind."""

    kind: str
    frames: int
    step: float = 0.5
    turn_deg: float = 0.0


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.5
    prior_depth_lognormal_sigma: float = 0.05
    prior_scale_walk_sigma: float = 0.01
    descriptor_sigma: float = 0.05

    @classmethod
    def zero(cls) -> 'NoiseSpec':
        return cls(0.0, 0.0, 0.0, 0.0)


def _default_camera() -> CameraIntrinsics:
    return CameraIntrinsics.centered(410.0, 512, 288)


@dataclass
class WorldSpec:
    """Everything needed to generate one synthetic dataset."""

    name: str = 'custom'
    seed: int = 0
    landmark_count: int = 4000
    scene_extent: float = 60.0
    trajectory_script: List[Segment] = field(default_factory=lambda: [Segment('arc', 15, 0.5, 45.0),
                                                                    Segment('forward', 60, 0.5)])
    dynamic_object_count: int = 0
    dynamic_fraction_of_view: float = 0.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera: CameraIntrinsics = field(default_factory=_default_camera)
    candidates_per_frame: int = 80
    edge_radius: int = 12
    loop_edge_distance: float = 3.0
    place_cell_size: float = 1.0
    descriptor_dim: int = DEFAULT_DIMENSION
    sky_landmark_count: int = 0
    layout: str = 'street'
    frame_rate: float = 30.0

    @property
    def frame_count(self) -> int:
        return 1 + sum(seg.frames for seg in self.trajectory_script)

    def validate(self) -> None:
        """
        Check the world description before generation.

        Raises:
            InvalidSpecException: On any out-of-range field
        """
        noise = self.noise
        for name in ('pixel_sigma', 'prior_depth_lognormal_sigma', 'prior_scale_walk_sigma', 'descriptor_sigma'):
            value = getattr(noise, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidSpecException(f"Noise {name} must be >= 0: {value}")
        if not self.scene_extent > 0:
            raise InvalidSpecException(f"scene_extent must be > 0: {self.scene_extent}")
        if self.landmark_count <= 0:
            raise InvalidSpecException(f"landmark_count must be > 0: {self.landmark_count}")
        if self.dynamic_object_count < 0 or self.sky_landmark_count < 0:
            raise InvalidSpecException("Object counts must be >= 0")
        if not 0.0 <= self.dynamic_fraction_of_view < 1.0:
            raise InvalidSpecException(
                f"dynamic_fraction_of_view must be in [0, 1): {self.dynamic_fraction_of_view}"
            )
        if self.dynamic_fraction_of_view > 0 and self.dynamic_object_count == 0:
            raise InvalidSpecException("dynamic_fraction_of_view > 0 needs at least one dynamic object")
        for seg in self.trajectory_script:
            if seg.kind not in SEGMENT_KINDS:
                raise InvalidSpecException(f"Unknown segment kind '{seg.kind}'. Must be one of {SEGMENT_KINDS}")
            if seg.frames < 0:
                raise InvalidSpecException(f"Segment frame count must be >= 0: {seg.frames}")
            if seg.kind in ('forward', 'arc') and not seg.step > 0:
                raise InvalidSpecException(f"Segment '{seg.kind}' needs a positive step: {seg.step}")
        if self.frame_count < 2:
            raise InvalidSpecException(f"Trajectory script produces {self.frame_count} frame(s); need >= 2")
        if self.layout not in LAYOUTS:
            raise InvalidSpecException(f"Unknown layout '{self.layout}'. Must be one of {LAYOUTS}")
        if self.candidates_per_frame <= 0 or self.edge_radius <= 0:
            raise InvalidSpecException("candidates_per_frame and edge_radius must be > 0")
        if not (self.place_cell_size > 0 and self.frame_rate > 0 and self.descriptor_dim > 0):
            raise InvalidSpecException("place_cell_size, frame_rate and descriptor_dim must be > 0")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['camera'] = {'fx': self.camera.fx, 'fy': self.camera.fy, 'cx': self.camera.cx,
                          'cy': self.camera.cy, 'width': self.camera.width, 'height': self.camera.height}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'WorldSpec':
        """
        Build a world description from its dictionary form (world.json).

        Raises:
            InvalidSpecException: On unknown fields or malformed values
        """
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidSpecException(f"Unknown world fields: {unknown}")
        try:
            if 'trajectory_script' in data:
                data['trajectory_script'] = [Segment(**seg) for seg in data['trajectory_script']]
            if 'noise' in data:
                data['noise'] = NoiseSpec(**data['noise'])
            if 'camera' in data:
                data['camera'] = CameraIntrinsics(**data['camera'])
            spec = cls(**data)
        except (TypeError, ValidationException) as e:
            raise InvalidSpecException(f"Malformed world description: {str(e)}")
        spec.validate()
        return spec


# Generated data

@dataclass(frozen=True)
class GroundTruth:
    """
    Oracle of a generated world.

    Per-patch arrays are aligned with the rows of the bundle's patch table.
    """

    poses: List[Pose]
    landmarks: np.ndarray
    landmark_kind: np.ndarray
    place_ids: np.ndarray
    patch_depths: np.ndarray
    patch_landmarks: np.ndarray
    prior_scales: np.ndarray
    camera: CameraIntrinsics
    seed: int
    scene_extent: float
    descriptor_dim: int = DEFAULT_DIMENSION
    dynamic_local: Optional[np.ndarray] = None
    dynamic_speed: Optional[np.ndarray] = None
    sky_velocity: Optional[np.ndarray] = None

    @property
    def dynamic(self) -> np.ndarray:
        return self.landmark_kind == DYNAMIC

    @property
    def sky(self) -> np.ndarray:
        return self.landmark_kind == SKY

    def centers(self) -> np.ndarray:
        return np.array([pose.center() for pose in self.poses])

    def landmark_positions(self, ids: np.ndarray, frame: int) -> np.ndarray:
        """World positions of landmarks ``ids`` at time ``frame``."""
        ids = np.asarray(ids, dtype=np.int64)
        out = self.landmarks[ids].copy()
        kind = self.landmark_kind[ids]

        dyn = kind == DYNAMIC
        if np.any(dyn):
            pose = self.poses[frame]
            heading_axes = _heading_axes(pose)
            base = pose.center() * np.array([1.0, 1.0, 0.0])
            local = self.dynamic_local[ids[dyn]].copy()
            x = local[:, 0] + self.dynamic_speed[ids[dyn]] * frame
            local[:, 0] = np.mod(x + DYNAMIC_LANE_HALF_WIDTH, 2 * DYNAMIC_LANE_HALF_WIDTH) - DYNAMIC_LANE_HALF_WIDTH
            out[dyn] = base + local @ heading_axes.T

        sky = kind == SKY
        if np.any(sky):
            out[sky] = self.landmarks[ids[sky]] + self.sky_velocity[ids[sky]] * frame
        return out


@dataclass
class DatasetBundle:
    """
    Everything the pipeline reads: frames, candidate patches, correspondence
    edges, prior depths, masks and descriptors. Masks are only stored for
    frames with at least one masked pixel.
    """

    frame_ids: np.ndarray
    timestamps: np.ndarray
    width: int
    height: int
    patches: pd.DataFrame
    edges: pd.DataFrame
    priors: pd.DataFrame
    masks: Dict[int, np.ndarray] = field(default_factory=dict)
    descriptor_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    descriptor_vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, DEFAULT_DIMENSION), dtype=np.float32))
    gt_poses: Optional[List[Optional[Pose]]] = None
    world: Dict[str, Any] = field(default_factory=dict)

    @property
    def frame_count(self) -> int:
        return len(self.frame_ids)

    def mask(self, frame_id: int) -> np.ndarray:
        """Boolean mask of the frame (all False when none is stored)."""
        mask = self.masks.get(int(frame_id))
        if mask is None:
            return np.zeros((self.height, self.width), dtype=bool)
        return mask

    def descriptors(self) -> List[Descriptor]:
        return [Descriptor(int(fid), vec.astype(float))
                for fid, vec in zip(self.descriptor_ids, self.descriptor_vectors)]

    def gt_trajectory(self) -> Optional[Trajectory]:
        if self.gt_poses is None:
            return None
        return Trajectory(self.timestamps, self.frame_ids, list(self.gt_poses))

    def validate(self) -> None:
        """
        Check referential integrity of patches, edges and priors.

        Raises:
            ValidationException: If a table references a missing frame or patch
        """
        frames = set(int(f) for f in self.frame_ids)
        if len(frames) != len(self.frame_ids):
            raise ValidationException("Duplicate frame ids in bundle")
        if len(self.timestamps) != len(self.frame_ids):
            raise ValidationException("Frame ids and timestamps differ in length")
        patch_keys = set(zip(self.patches['frame_id'].astype(int), self.patches['patch_id'].astype(int)))
        bad_patch_frames = set(self.patches['frame_id'].astype(int)) - frames
        if bad_patch_frames:
            raise ValidationException(f"Patches reference unknown frames: {sorted(bad_patch_frames)[:5]}")
        bad_dst = set(self.edges['dst_frame'].astype(int)) - frames
        if bad_dst:
            raise ValidationException(f"Edges reference unknown frames: {sorted(bad_dst)[:5]}")
        edge_keys = set(zip(self.edges['src_frame'].astype(int), self.edges['patch_id'].astype(int)))
        missing = edge_keys - patch_keys
        if missing:
            raise ValidationException(f"Edges reference unknown patches: {sorted(missing)[:5]}")
        prior_keys = set(zip(self.priors['frame_id'].astype(int), self.priors['patch_id'].astype(int)))
        missing = prior_keys - patch_keys
        if missing:
            raise ValidationException(f"Priors reference unknown patches: {sorted(missing)[:5]}")
        for fid, mask in self.masks.items():
            if fid not in frames:
                raise ValidationException(f"Mask for unknown frame {fid}")
            if mask.shape != (self.height, self.width):
                raise ValidationException(f"Mask of frame {fid} has shape {mask.shape}")


# Geometry helpers

def _heading_pose(position_xy: np.ndarray, heading: float) -> Pose:
    right = np.array([np.sin(heading), -np.cos(heading), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    forward = np.array([np.cos(heading), np.sin(heading), 0.0])
    R_wc = np.column_stack([right, down, forward])
    center = np.array([position_xy[0], position_xy[1], EYE_HEIGHT])
    return Pose.from_rt(R_wc.T, -R_wc.T @ center)


def _heading_axes(pose: Pose) -> np.ndarray:
    """Columns: right, forward, up of the camera's heading frame in world axes."""
    R_wc = pose.R.T
    right = R_wc[:, 0]
    forward = R_wc[:, 2]
    return np.column_stack([right, forward, np.array([0.0, 0.0, 1.0])])


def _project(K: CameraIntrinsics, pose: Pose, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p_cam = points @ pose.R.T + pose.translation
    z = p_cam[:, 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    pixels = np.column_stack([K.fx * p_cam[:, 0] / safe + K.cx, K.fy * p_cam[:, 1] / safe + K.cy])
    return pixels, z


def _visible(K: CameraIntrinsics, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
    return ((depth >= MIN_VISIBLE_DEPTH) & (depth <= MAX_VISIBLE_DEPTH)
            & (pixels[:, 0] >= IMAGE_MARGIN) & (pixels[:, 0] < K.width - IMAGE_MARGIN)
            & (pixels[:, 1] >= IMAGE_MARGIN) & (pixels[:, 1] < K.height - IMAGE_MARGIN))


def _extend_track(positions: np.ndarray, headings: np.ndarray, distance: float,
                  spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """Trajectory positions continued straight along the final heading for ``distance`` metres."""
    steps = np.arange(1, int(distance / spacing) + 1) * spacing
    direction = np.array([np.cos(headings[-1]), np.sin(headings[-1])])
    ahead = positions[-1] + steps[:, None] * direction
    return (np.concatenate([positions, ahead]),
            np.concatenate([headings, np.full(len(steps), headings[-1])]))


def integrate_script(script: Sequence[Segment]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Camera ground positions and headings produced by a trajectory script.

    Arcs turn half of the per-frame angle before and after each step so that
    identical arc/forward blocks rotated by the turn close exactly.

    Returns:
        (positions (N, 2), headings (N,)) including the starting frame
    """
    position = np.zeros(2)
    heading = 0.0
    positions = [position.copy()]
    headings = [heading]
    for seg in script:
        if seg.frames == 0:
            continue
        per_frame = np.radians(seg.turn_deg) / seg.frames
        for _ in range(seg.frames):
            if seg.kind == 'forward':
                position = position + seg.step * np.array([np.cos(heading), np.sin(heading)])
            elif seg.kind == 'arc':
                heading += per_frame / 2.0
                position = position + seg.step * np.array([np.cos(heading), np.sin(heading)])
                heading += per_frame / 2.0
            elif seg.kind == 'pure_rotation':
                heading += per_frame
            positions.append(position.copy())
            headings.append(heading)
    return np.array(positions), np.array(headings)


def assign_place_ids(positions: np.ndarray, headings: np.ndarray, cell_size: float) -> np.ndarray:
    """
    Spatial hash of (position cell, heading bin) mapped to dense ids in order
    of first appearance. The start position sits at a cell center.
    """
    cells = np.floor(np.round(positions / cell_size, 6) + 0.5).astype(np.int64)
    bin_width = 2 * np.pi / HEADING_BINS
    bins = np.floor(np.round(np.mod(headings + bin_width / 2, 2 * np.pi) / bin_width, 6)).astype(np.int64)
    bins = np.mod(bins, HEADING_BINS)
    ids: Dict[Tuple[int, int, int], int] = {}
    out = np.zeros(len(positions), dtype=np.int64)
    for i, key in enumerate(zip(cells[:, 0].tolist(), cells[:, 1].tolist(), bins.tolist())):
        out[i] = ids.setdefault(key, len(ids))
    return out


# Priors and descriptors

def prior_scale_walk(n_frames: int, walk_sigma: float, seed: int = 0) -> np.ndarray:
    """Per-frame multiplicative scale exp(cumulative sum of N(0, walk_sigma^2))."""
    if walk_sigma < 0:
        raise ValidationException(f"walk_sigma must be >= 0: {walk_sigma}")
    if walk_sigma == 0:
        return np.ones(n_frames)
    steps = make_rng(seed, Stream.PRIOR_WALK).standard_normal(n_frames) * walk_sigma
    return np.exp(np.cumsum(steps))


def corrupt_prior_scale(priors: pd.DataFrame, walk_sigma: float, seed: int = 0,
                        frame_column: str = 'frame_id', depth_column: str = 'prior_depth') -> pd.DataFrame:
    """
    Multiply prior depths by a per-frame random-walk scale.

    Frames are walked in ascending id order; frame t gets exp(sum of the
    first t+1 increments).

    Args:
        priors: Table with a frame column and a depth column
        walk_sigma: Standard deviation of each log-scale increment
        seed: Walk seed

    Returns:
        New table; the input is untouched
    """
    if walk_sigma < 0:
        raise ValidationException(f"walk_sigma must be >= 0: {walk_sigma}")
    out = priors.copy()
    if walk_sigma == 0 or out.empty:
        return out
    frames = np.unique(out[frame_column].to_numpy())
    scales = prior_scale_walk(len(frames), walk_sigma, seed)
    lookup = dict(zip(frames.tolist(), scales.tolist()))
    out[depth_column] = out[depth_column].to_numpy() * out[frame_column].map(lookup).to_numpy()
    return out


def render_descriptors(gt: GroundTruth, sigma: float, dim: Optional[int] = None) -> List[Descriptor]:
    """
    Per-frame descriptors: the frame's place base vector plus isotropic noise
    with expected norm ``sigma``.
    """
    if sigma < 0:
        raise ValidationException(f"Descriptor sigma must be >= 0: {sigma}")
    dim = dim or gt.descriptor_dim
    rng = make_rng(gt.seed, Stream.DESCRIPTORS)
    n_places = int(gt.place_ids.max()) + 1 if len(gt.place_ids) else 0
    bases = rng.standard_normal((n_places, dim))
    bases /= np.linalg.norm(bases, axis=1, keepdims=True)
    noise = rng.standard_normal((len(gt.place_ids), dim)) * (sigma / np.sqrt(dim))
    return [Descriptor(i, bases[place] + noise[i]) for i, place in enumerate(gt.place_ids)]


def inject_scale_drift(poses: Dict[int, Pose], patches: Dict[PatchKey, Patch],
                       total_drift: float) -> Tuple[Dict[int, Pose], Dict[PatchKey, Patch]]:
    """
    Apply monocular-style scale drift to a reconstruction.

    Frame k of n (in id order) has its step from the previous camera center
    scaled by 1 + total_drift * k / (n - 1); patches hosted in that frame get
    their depth scaled by the same factor. Rotations are unchanged.
    """
    frames = sorted(poses)
    if len(frames) < 2:
        return dict(poses), {k: replace(p) for k, p in patches.items()}
    factors = {}
    new_poses = {}
    prev_center = prev_new = None
    for k, fid in enumerate(frames):
        factor = 1.0 + total_drift * k / (len(frames) - 1)
        factors[fid] = factor
        pose = poses[fid]
        center = pose.center()
        new_center = center if prev_center is None else prev_new + factor * (center - prev_center)
        new_poses[fid] = Pose.from_rt(pose.R, -pose.R @ new_center)
        prev_center, prev_new = center, new_center
    new_patches = {key: replace(patch, inv_depth=patch.inv_depth / factors.get(patch.frame_id, 1.0))
                   for key, patch in patches.items()}
    return new_poses, new_patches


# Generator

class WorldSimulator:
    """Builds the ground truth and the derived dataset for one WorldSpec."""

    def __init__(self, spec: WorldSpec):
        spec.validate()
        self.spec = spec
        self.K = spec.camera
        self.logger = logging.getLogger(LOGGER_NAME)

    def _trajectory(self):
        positions, headings = integrate_script(self.spec.trajectory_script)
        poses = [_heading_pose(p, h) for p, h in zip(positions, headings)]
        return positions, headings, poses

    def _static_landmarks(self, positions, headings) -> np.ndarray:
        spec = self.spec
        rng = make_rng(spec.seed, Stream.LANDMARKS)
        n = spec.landmark_count

        if spec.layout == 'sphere':
            center = np.array([*positions.mean(axis=0), EYE_HEIGHT])
            radius = spec.scene_extent / 2.0
            cams = np.column_stack([positions, np.full(len(positions), EYE_HEIGHT)])
            points = []
            while sum(len(p) for p in points) < n:
                batch = rng.uniform(-1.0, 1.0, size=(2 * n, 3))
                batch = batch[np.linalg.norm(batch, axis=1) <= 1.0] * radius + center
                dist = np.min(np.linalg.norm(batch[:, None, :] - cams[None, ::5, :], axis=2), axis=1)
                points.append(batch[dist > 2.0])
            return np.concatenate(points)[:n]

        rotation_frames = self._rotation_centers(positions)
        n_ring = n // 4 if rotation_frames else 0
        n_street = n - n_ring

        track, track_heading = _extend_track(positions, headings, STREET_LOOKAHEAD, 0.5)
        idx = rng.integers(0, len(track), size=n_street)
        base = track[idx]
        heading = track_heading[idx]
        forward = np.column_stack([np.cos(heading), np.sin(heading)])
        lateral = np.column_stack([np.sin(heading), -np.cos(heading)])
        along = rng.uniform(-2.0, 2.0, size=n_street)
        is_facade = rng.random(n_street) < 0.75
        side = np.where(rng.random(n_street) < 0.5, -1.0, 1.0)
        offset = np.where(is_facade, side * rng.uniform(7.0, 11.0, size=n_street),
                          rng.uniform(-5.0, 5.0, size=n_street))
        height = np.where(is_facade, rng.uniform(0.3, 10.0, size=n_street), 0.0)
        xy = base + forward * along[:, None] + lateral * offset[:, None]
        street = np.column_stack([xy, height])

        if n_ring == 0:
            return street
        ring_center = np.array(rotation_frames)[rng.integers(0, len(rotation_frames), size=n_ring)]
        angle = rng.uniform(0.0, 2 * np.pi, size=n_ring)
        radius = rng.uniform(10.0, 18.0, size=n_ring)
        ring = np.column_stack([ring_center[:, 0] + radius * np.cos(angle),
                                ring_center[:, 1] + radius * np.sin(angle),
                                rng.uniform(0.3, 9.0, size=n_ring)])
        return np.concatenate([street, ring])

    def _rotation_centers(self, positions) -> List[np.ndarray]:
        centers = []
        frame = 0
        for seg in self.spec.trajectory_script:
            if seg.kind == 'pure_rotation' and seg.frames > 0:
                centers.append(positions[frame])
            frame += seg.frames
        return centers

    def _dynamic_objects(self):
        spec = self.spec
        rng = make_rng(spec.seed, Stream.DYNAMIC)
        per_object = 60
        local, speed = [], []
        for _ in range(spec.dynamic_object_count):
            x0 = rng.uniform(-6.0, 6.0)
            y0 = rng.uniform(7.0, 13.0)
            v = rng.uniform(0.3, 0.5) * (1.0 if rng.random() < 0.5 else -1.0)
            box = rng.uniform([-1.0, -1.0, 0.2], [1.0, 1.0, 2.2], size=(per_object, 3))
            box[:, 0] += x0
            box[:, 1] += y0
            local.append(box)
            speed.append(np.full(per_object, v))
        if not local:
            return np.zeros((0, 3)), np.zeros(0)
        return np.concatenate(local), np.concatenate(speed)

    def _sky(self, positions):
        spec = self.spec
        rng = make_rng(spec.seed, Stream.SKY)
        n = spec.sky_landmark_count
        center = positions.mean(axis=0)
        azimuth = rng.uniform(0.0, 2 * np.pi, size=n)
        distance = rng.uniform(300.0, 500.0, size=n)
        points = np.column_stack([center[0] + distance * np.cos(azimuth),
                                  center[1] + distance * np.sin(azimuth),
                                  rng.uniform(60.0, 150.0, size=n)])
        velocity = np.column_stack([rng.uniform(0.2, 0.4, size=n), np.zeros(n), np.zeros(n)])
        return points, velocity

    def _loop_partners(self, positions, headings) -> Dict[int, List[int]]:
        spec = self.spec
        partners: Dict[int, List[int]] = {}
        dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
        turn = np.abs(np.angle(np.exp(1j * (headings[:, None] - headings[None, :]))))
        gap = np.abs(np.arange(len(positions))[:, None] - np.arange(len(positions))[None, :])
        close = (dist <= spec.loop_edge_distance) & (turn <= np.radians(45.0)) & (gap > spec.edge_radius)
        for i, j in zip(*np.nonzero(close)):
            partners.setdefault(int(i), []).append(int(j))
        return partners

    def generate(self) -> Tuple[DatasetBundle, GroundTruth]:
        spec = self.spec
        K = self.K
        positions, headings, poses = self._trajectory()
        n_frames = len(poses)

        static = self._static_landmarks(positions, headings)
        dyn_local, dyn_speed = self._dynamic_objects()
        sky_points, sky_vel = self._sky(positions)

        n_static, n_dyn, n_sky = len(static), len(dyn_local), len(sky_points)
        total = n_static + n_dyn + n_sky
        kind = np.concatenate([np.full(n_static, STATIC), np.full(n_dyn, DYNAMIC), np.full(n_sky, SKY)])
        landmarks = np.concatenate([static, np.zeros((n_dyn, 3)), sky_points]) if total else np.zeros((0, 3))
        dynamic_local = np.zeros((total, 3))
        dynamic_local[n_static:n_static + n_dyn] = dyn_local
        dynamic_speed = np.zeros(total)
        dynamic_speed[n_static:n_static + n_dyn] = dyn_speed
        sky_velocity = np.zeros((total, 3))
        sky_velocity[n_static + n_dyn:] = sky_vel

        prior_scales = prior_scale_walk(n_frames, spec.noise.prior_scale_walk_sigma, spec.seed)
        place_ids = assign_place_ids(positions, headings, spec.place_cell_size)

        gt = GroundTruth(
            poses=poses, landmarks=landmarks, landmark_kind=kind, place_ids=place_ids,
            patch_depths=np.zeros(0), patch_landmarks=np.zeros(0, dtype=np.int64),
            prior_scales=prior_scales, camera=K, seed=spec.seed, scene_extent=spec.scene_extent,
            descriptor_dim=spec.descriptor_dim, dynamic_local=dynamic_local,
            dynamic_speed=dynamic_speed, sky_velocity=sky_velocity,
        )

        pool_rng = make_rng(spec.seed, Stream.POOL)
        pixel_rng = make_rng(spec.seed, Stream.PIXEL_NOISE)
        prior_rng = make_rng(spec.seed, Stream.PRIOR_NOISE)
        log_sigma = spec.noise.prior_depth_lognormal_sigma
        all_ids = np.arange(total)

        # candidate pools and masks
        pools: List[np.ndarray] = []
        pool_pixels: List[np.ndarray] = []
        pool_depths: List[np.ndarray] = []
        masks: Dict[int, np.ndarray] = {}
        n_dynamic_pool = int(round(spec.dynamic_fraction_of_view * spec.candidates_per_frame))
        for t in range(n_frames):
            pixels, depth = _project(K, poses[t], gt.landmark_positions(all_ids, t))
            visible = _visible(K, pixels, depth)
            vis_dyn = np.flatnonzero(visible & (kind == DYNAMIC))
            vis_other = np.flatnonzero(visible & (kind != DYNAMIC))
            take_dyn = min(len(vis_dyn), n_dynamic_pool)
            take_other = min(len(vis_other), spec.candidates_per_frame - take_dyn)
            chosen = np.concatenate([pool_rng.choice(vis_dyn, size=take_dyn, replace=False),
                                     pool_rng.choice(vis_other, size=take_other, replace=False)])
            chosen = np.sort(chosen.astype(np.int64))
            pools.append(chosen)
            pool_pixels.append(pixels[chosen])
            pool_depths.append(depth[chosen])

            masked = visible & (kind != STATIC)
            if np.any(masked):
                mask = np.zeros((K.height, K.width), dtype=bool)
                cols = np.clip(np.round(pixels[masked, 0]).astype(int), 0, K.width - 1)
                rows = np.clip(np.round(pixels[masked, 1]).astype(int), 0, K.height - 1)
                mask[rows, cols] = True
                masks[t] = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool),
                                                   iterations=MASK_DILATION)

        partners = self._loop_partners(positions, headings)

        # edges
        edge_blocks = []
        for i in range(n_frames):
            ids = pools[i]
            if ids.size == 0:
                continue
            targets = [j for j in range(max(0, i - spec.edge_radius), min(n_frames, i + spec.edge_radius + 1))
                       if j != i]
            targets += partners.get(i, [])
            for j in targets:
                pixels, depth = _project(K, poses[j], gt.landmark_positions(ids, j))
                ok = _visible(K, pixels, depth)
                if not np.any(ok):
                    continue
                count = int(np.sum(ok))
                noisy = pixels[ok] + pixel_rng.standard_normal((count, 2)) * spec.noise.pixel_sigma
                prior = depth[ok] * np.exp(prior_rng.standard_normal(count) * log_sigma) * prior_scales[j]
                edge_blocks.append(np.column_stack([
                    np.full(count, i), np.flatnonzero(ok), np.full(count, j),
                    noisy, np.ones(count), prior,
                ]))

        patch_frames = np.concatenate([np.full(len(p), t) for t, p in enumerate(pools)]).astype(np.int64)
        patch_ids = np.concatenate([np.arange(len(p)) for p in pools]).astype(np.int64)
        centers = np.concatenate(pool_pixels) if pools else np.zeros((0, 2))
        true_depths = np.concatenate(pool_depths) if pools else np.zeros(0)
        patch_landmarks = np.concatenate(pools) if pools else np.zeros(0, dtype=np.int64)
        prior_depths = (true_depths * np.exp(prior_rng.standard_normal(len(true_depths)) * log_sigma)
                        * prior_scales[patch_frames])

        patches = pd.DataFrame({'frame_id': patch_frames, 'patch_id': patch_ids,
                                'u': centers[:, 0], 'v': centers[:, 1]}, columns=PATCH_COLUMNS)
        priors = pd.DataFrame({'frame_id': patch_frames, 'patch_id': patch_ids,
                               'prior_depth': prior_depths}, columns=PRIOR_COLUMNS)
        if edge_blocks:
            table = np.concatenate(edge_blocks)
        else:
            table = np.zeros((0, len(EDGE_COLUMNS)))
        edges = pd.DataFrame(table, columns=EDGE_COLUMNS)
        for column in ('src_frame', 'patch_id', 'dst_frame'):
            edges[column] = edges[column].astype(np.int64)

        gt = replace(gt, patch_depths=true_depths, patch_landmarks=patch_landmarks)
        for array in (gt.landmarks, gt.landmark_kind, gt.place_ids, gt.patch_depths,
                      gt.patch_landmarks, gt.prior_scales):
            array.flags.writeable = False

        descriptors = render_descriptors(gt, spec.noise.descriptor_sigma)
        frame_ids = np.arange(n_frames, dtype=np.int64)
        bundle = DatasetBundle(
            frame_ids=frame_ids,
            timestamps=frame_ids / spec.frame_rate,
            width=K.width,
            height=K.height,
            patches=patches,
            edges=edges,
            priors=priors,
            masks=masks,
            descriptor_ids=np.array([d.frame_id for d in descriptors], dtype=np.uint64),
            descriptor_vectors=np.array([d.vector for d in descriptors], dtype=np.float32).reshape(
                -1, spec.descriptor_dim),
            gt_poses=list(poses),
            world=spec.to_dict(),
        )
        self.logger.info(
            f"Generated world '{spec.name}': {n_frames} frames, {total} landmarks "
            f"({n_dyn} dynamic, {n_sky} sky), {len(patches)} patches, {len(edges)} edges, "
            f"{len(masks)} masked frames"
        )
        return bundle, gt


def generate(spec: WorldSpec) -> Tuple[DatasetBundle, GroundTruth]:
    """Convenience function to generate a dataset and its ground truth."""
    return WorldSimulator(spec).generate()


def standard_worlds() -> Dict[str, WorldSpec]:
    """
    Named presets. Each starts with an arc so focal length is observable
    from the first frames.
    """
    city_script = []
    for _ in range(4):
        city_script += [Segment('arc', 15, 0.5, 90.0), Segment('forward', 100, 0.5)]
    # retrace the start to revisit it
    city_script += [Segment('arc', 15, 0.5, 90.0), Segment('forward', 24, 0.5)]

    return {
        'corridor_forward': WorldSpec(
            name='corridor_forward', landmark_count=5000, scene_extent=120.0,
            trajectory_script=[Segment('arc', 12, 0.5, 36.0), Segment('forward', 140, 0.5),
                               Segment('pause', 20), Segment('forward', 60, 0.5)],
        ),
        'plaza_rotation': WorldSpec(
            name='plaza_rotation', landmark_count=4000, scene_extent=60.0,
            trajectory_script=[Segment('arc', 15, 0.5, 45.0), Segment('forward', 30, 0.5),
                               Segment('pure_rotation', 40, 0.0, 120.0), Segment('forward', 30, 0.5)],
        ),
        'city_loop': WorldSpec(
            name='city_loop', landmark_count=9000, scene_extent=80.0,
            trajectory_script=city_script,
        ),
        'crowded': WorldSpec(
            name='crowded', landmark_count=4000, scene_extent=100.0,
            trajectory_script=[Segment('arc', 15, 0.5, 45.0), Segment('forward', 150, 0.5)],
            dynamic_object_count=4, dynamic_fraction_of_view=0.2,
        ),
    }
