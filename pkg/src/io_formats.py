"""
File formats of the SLAM backend.

Bundle directories (CSV tables, PGM masks, a little-endian descriptor file
and a TUM ground-truth trajectory), run outputs (trajectory, keyframes,
event log, pose graph, report, manifest) and the line-oriented config file.
"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .eval_metrics import Trajectory
    from .exceptions import (
        FormatException, InvalidValueException, MissingFileException, UnknownKeyException, ValidationException,
    )
    from .frontend_sim import EDGE_COLUMNS, PATCH_COLUMNS, PRIOR_COLUMNS, DatasetBundle
    from .lie_geometry import Pose, SimPose
    from .pipeline import ALPHA_FORMULAS, DEPTH_SPACES, POST_REFINE_MODES, PipelineConfig, ReconstructionState
    from .pose_graph import PoseGraph
    from .utils import (
        LOGGER_NAME, format_float, format_report, parse_report, sha256_directory, sha256_file,
        split_key_value, validate_bool, validate_choice, validate_non_negative_int, validate_positive_float,
    )
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from eval_metrics import Trajectory
    from exceptions import (
        FormatException, InvalidValueException, MissingFileException, UnknownKeyException, ValidationException,
    )
    from frontend_sim import EDGE_COLUMNS, PATCH_COLUMNS, PRIOR_COLUMNS, DatasetBundle
    from lie_geometry import Pose, SimPose
    from pipeline import ALPHA_FORMULAS, DEPTH_SPACES, POST_REFINE_MODES, PipelineConfig, ReconstructionState
    from pose_graph import PoseGraph
    from utils import (
        LOGGER_NAME, format_float, format_report, parse_report, sha256_directory, sha256_file,
        split_key_value, validate_bool, validate_choice, validate_non_negative_int, validate_positive_float,
    )


logger = logging.getLogger(LOGGER_NAME)

TOOL_VERSION = "1.0.0"

FRAMES_FILE = 'frames.csv'
PATCHES_FILE = 'patches.csv'
EDGES_FILE = 'edges.csv'
PRIORS_FILE = 'priors.csv'
MASKS_DIR = 'masks'
DESCRIPTORS_FILE = 'descriptors.bin'
GT_FILE = 'gt_traj.txt'
WORLD_FILE = 'world.json'

TRAJECTORY_FILE = 'traj_est.txt'
KEYFRAMES_FILE = 'keyframes.txt'
EVENTS_FILE = 'events.jsonl'
POSE_GRAPH_FILE = 'pose_graph.txt'
REPORT_FILE = 'report.txt'
MANIFEST_FILE = 'manifest.json'
CONFIG_ECHO_FILE = 'config.txt'

FRAME_COLUMNS = ['frame_id', 'timestamp']
INT_COLUMNS = {'frame_id', 'patch_id', 'src_frame', 'dst_frame'}

DESCRIPTOR_MAGIC = b'CSDS'
DESCRIPTOR_HEADER = np.dtype([('magic', 'S4'), ('dim', '<u4'), ('count', '<u4')])

POSE_DIGITS = 9

CHOICE_KEYS = {
    'post_refine': POST_REFINE_MODES,
    'depth_residual_space': DEPTH_SPACES,
    'alpha_formula': ALPHA_FORMULAS,
}


# CSV tables

def _read_table(path: str, columns: Sequence[str]) -> pd.DataFrame:
    """
    Load a CSV with a documented header.

    Extra columns are dropped with a warning; missing columns, unparsable
    numbers and non-integral ids raise FormatException naming the file and
    line.
    """
    if not os.path.isfile(path):
        raise MissingFileException(f"Missing bundle file: {path}")
    try:
        df = pd.read_csv(path, float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatException(f"Unreadable CSV: {str(e)}", path)

    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise FormatException(f"Missing column(s) {missing}", path, "line 1")
    extra = [c for c in df.columns if c not in columns]
    if extra:
        logger.warning(f"{path}: ignoring unknown column(s) {extra}")

    out = {}
    for column in columns:
        raw = df[column]
        values = pd.to_numeric(raw, errors='coerce')
        bad = values.isna() & raw.notna()
        if column in INT_COLUMNS:
            bad |= values.isna() | (values != np.floor(values))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise FormatException(f"Bad value {raw.iloc[row]!r} in column '{column}'", path, f"line {row + 2}")
        out[column] = values.to_numpy(dtype=np.int64 if column in INT_COLUMNS else float)
    return pd.DataFrame(out, columns=list(columns))


def _write_table(df: pd.DataFrame, path: str, columns: Sequence[str]) -> None:
    df[list(columns)].to_csv(path, index=False, float_format='%.17g', na_rep='nan', lineterminator='\n')


# PGM masks

def write_pgm(mask: np.ndarray, path: str) -> None:
    """Binary P5 bitmap, 255 = masked."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    with open(path, 'wb') as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode('ascii'))
        handle.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    """
    Read a P5 bitmap written by ``write_pgm``; nonzero pixels are masked.

    Raises:
        FormatException: On a bad header or truncated pixel data
    """
    with open(path, 'rb') as handle:
        data = handle.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b'#':
            while pos < len(data) and data[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatException("Truncated PGM header", path, f"offset {pos}")
        tokens.append(data[start:pos])
    pos += 1

    if tokens[0] != b'P5':
        raise FormatException(f"Not a binary PGM (magic {tokens[0]!r})", path, "offset 0")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatException("Non-numeric PGM header field", path, "header")
    if maxval != 255 or width <= 0 or height <= 0:
        raise FormatException(f"Unsupported PGM geometry {width}x{height} maxval {maxval}", path, "header")
    pixels = np.frombuffer(data[pos:], dtype=np.uint8) if pos < len(data) else np.zeros(0, dtype=np.uint8)
    if pixels.size < width * height:
        raise FormatException(f"Pixel data truncated: {pixels.size} of {width * height} bytes", path,
                              f"offset {len(data)}")
    return pixels[:width * height].reshape(height, width) > 0


# Descriptors

def write_descriptors(frame_ids: np.ndarray, vectors: np.ndarray, path: str) -> None:
    """magic(4B) D(u32) count(u32), then count x (frame_id u64 + D float32), little-endian."""
    vectors = np.asarray(vectors, dtype='<f4')
    count, dim = vectors.shape
    record = np.dtype([('frame_id', '<u8'), ('vector', '<f4', (dim,))])
    header = np.array([(DESCRIPTOR_MAGIC, dim, count)], dtype=DESCRIPTOR_HEADER)
    body = np.empty(count, dtype=record)
    body['frame_id'] = np.asarray(frame_ids, dtype=np.uint64)
    body['vector'] = vectors
    with open(path, 'wb') as handle:
        handle.write(header.tobytes())
        handle.write(body.tobytes())


def read_descriptors(path: str):
    """
    Read a descriptor file.

    Returns:
        Tuple (frame ids uint64, vectors float32 (count, D))

    Raises:
        FormatException: On a bad magic or truncated data, with the byte offset
    """
    with open(path, 'rb') as handle:
        data = handle.read()
    if len(data) < DESCRIPTOR_HEADER.itemsize:
        raise FormatException(f"Header truncated after {len(data)} bytes", path, f"offset {len(data)}")
    header = np.frombuffer(data, dtype=DESCRIPTOR_HEADER, count=1)[0]
    if header['magic'] != DESCRIPTOR_MAGIC:
        raise FormatException(f"Bad magic {bytes(header['magic'])!r}", path, "offset 0")
    dim, count = int(header['dim']), int(header['count'])
    if dim <= 0:
        raise FormatException(f"Descriptor dimension must be > 0, got {dim}", path, "offset 4")
    record = np.dtype([('frame_id', '<u8'), ('vector', '<f4', (dim,))])
    offset = DESCRIPTOR_HEADER.itemsize
    available = (len(data) - offset) // record.itemsize
    if available < count:
        broken = offset + available * record.itemsize
        raise FormatException(f"Truncated: {available} of {count} records", path, f"offset {broken}")
    if len(data) != offset + count * record.itemsize:
        raise FormatException("Trailing bytes after last record", path,
                              f"offset {offset + count * record.itemsize}")
    if count == 0:
        return np.zeros(0, dtype=np.uint64), np.zeros((0, dim), dtype=np.float32)
    body = np.frombuffer(data, dtype=record, count=count, offset=offset)
    return body['frame_id'].astype(np.uint64), body['vector'].astype(np.float32).reshape(count, dim)


# Trajectories

def _pose_fields(pose: Optional[Pose]) -> List[str]:
    if pose is None:
        return ['nan'] * 7
    values = list(pose.translation) + list(pose.rotation)
    return [format_float(float(v), POSE_DIGITS) for v in values]


def write_tum(trajectory: Trajectory, path: str) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per frame; unregistered frames as nan fields."""
    lines = []
    for stamp, pose in zip(trajectory.timestamps, trajectory.poses):
        lines.append(" ".join([format_float(float(stamp), POSE_DIGITS)] + _pose_fields(pose)))
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path: str, frame_ids: Optional[Sequence[int]] = None) -> Trajectory:
    """
    Read a TUM trajectory; rows with any nan field become unregistered frames.

    Frame ids default to the row order.

    Raises:
        MissingFileException: If the file does not exist
        FormatException: On a malformed line, naming its number
    """
    if not os.path.isfile(path):
        raise MissingFileException(f"Missing trajectory file: {path}")
    stamps, poses = [], []
    with open(path, 'r', encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith('#'):
                continue
            parts = text.split()
            if len(parts) != 8:
                raise FormatException(f"Expected 8 fields, got {len(parts)}", path, f"line {number}")
            try:
                values = np.array([float(p) for p in parts])
            except ValueError:
                raise FormatException(f"Non-numeric field in {text!r}", path, f"line {number}")
            if not np.isfinite(values[0]):
                raise FormatException("Timestamp must be finite", path, f"line {number}")
            stamps.append(values[0])
            if np.all(np.isfinite(values[1:])):
                try:
                    poses.append(Pose(values[4:8], values[1:4]))
                except ValidationException as e:
                    raise FormatException(str(e), path, f"line {number}")
            else:
                poses.append(None)
    ids = np.arange(len(stamps)) if frame_ids is None else np.asarray(frame_ids)
    try:
        return Trajectory(np.array(stamps), ids, poses)
    except ValidationException as e:
        raise FormatException(str(e), path)


# Bundles

def write_bundle(bundle: DatasetBundle, directory: str) -> None:
    """Write every bundle artifact into ``directory`` (created if needed)."""
    os.makedirs(directory, exist_ok=True)
    frames = pd.DataFrame({'frame_id': np.asarray(bundle.frame_ids, dtype=np.int64),
                           'timestamp': np.asarray(bundle.timestamps, dtype=float)})
    _write_table(frames, os.path.join(directory, FRAMES_FILE), FRAME_COLUMNS)
    _write_table(bundle.patches, os.path.join(directory, PATCHES_FILE), PATCH_COLUMNS)
    _write_table(bundle.edges, os.path.join(directory, EDGES_FILE), EDGE_COLUMNS)
    _write_table(bundle.priors, os.path.join(directory, PRIORS_FILE), PRIOR_COLUMNS)

    mask_dir = os.path.join(directory, MASKS_DIR)
    os.makedirs(mask_dir, exist_ok=True)
    for fid in sorted(bundle.masks):
        write_pgm(bundle.masks[fid], os.path.join(mask_dir, f"{fid:06d}.pgm"))

    write_descriptors(bundle.descriptor_ids, bundle.descriptor_vectors,
                      os.path.join(directory, DESCRIPTORS_FILE))
    if bundle.gt_poses is not None:
        write_tum(bundle.gt_trajectory(), os.path.join(directory, GT_FILE))

    meta = {'width': int(bundle.width), 'height': int(bundle.height), 'world': bundle.world}
    with open(os.path.join(directory, WORLD_FILE), 'w', encoding='utf-8', newline='\n') as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info(f"Bundle written to {directory}: {bundle.frame_count} frames, {len(bundle.edges)} edges")


def read_bundle(directory: str) -> DatasetBundle:
    """
    Load a bundle directory.

    Raises:
        MissingFileException: If the directory or a required file is missing
        FormatException: On malformed content or broken references
    """
    if not os.path.isdir(directory):
        raise MissingFileException(f"Bundle directory not found: {directory}")

    world_path = os.path.join(directory, WORLD_FILE)
    if not os.path.isfile(world_path):
        raise MissingFileException(f"Missing bundle file: {world_path}")
    try:
        with open(world_path, 'r', encoding='utf-8') as handle:
            meta = json.load(handle)
        width, height = int(meta['width']), int(meta['height'])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatException(f"Bad bundle metadata: {str(e)}", world_path)

    frames = _read_table(os.path.join(directory, FRAMES_FILE), FRAME_COLUMNS)
    patches = _read_table(os.path.join(directory, PATCHES_FILE), PATCH_COLUMNS)
    edges = _read_table(os.path.join(directory, EDGES_FILE), EDGE_COLUMNS)
    priors = _read_table(os.path.join(directory, PRIORS_FILE), PRIOR_COLUMNS)

    masks: Dict[int, np.ndarray] = {}
    mask_dir = os.path.join(directory, MASKS_DIR)
    if os.path.isdir(mask_dir):
        for name in sorted(os.listdir(mask_dir)):
            stem, ext = os.path.splitext(name)
            if ext != '.pgm':
                continue
            if not stem.isdigit():
                raise FormatException("Mask file name must be a frame id", os.path.join(mask_dir, name))
            masks[int(stem)] = read_pgm(os.path.join(mask_dir, name))

    descriptor_path = os.path.join(directory, DESCRIPTORS_FILE)
    if not os.path.isfile(descriptor_path):
        raise MissingFileException(f"Missing bundle file: {descriptor_path}")
    descriptor_ids, descriptor_vectors = read_descriptors(descriptor_path)

    frame_ids = frames['frame_id'].to_numpy(dtype=np.int64)
    gt_poses = None
    gt_path = os.path.join(directory, GT_FILE)
    if os.path.isfile(gt_path):
        gt = read_tum(gt_path, frame_ids if len(frame_ids) else None)
        if len(gt) != len(frame_ids):
            raise FormatException(f"{len(gt)} poses for {len(frame_ids)} frames", gt_path)
        gt_poses = list(gt.poses)

    bundle = DatasetBundle(
        frame_ids=frame_ids,
        timestamps=frames['timestamp'].to_numpy(dtype=float),
        width=width,
        height=height,
        patches=patches,
        edges=edges,
        priors=priors,
        masks=masks,
        descriptor_ids=descriptor_ids,
        descriptor_vectors=descriptor_vectors,
        gt_poses=gt_poses,
        world=meta.get('world') or {},
    )
    try:
        bundle.validate()
    except ValidationException as e:
        raise FormatException(str(e), directory)
    logger.info(f"Loaded bundle {directory}: {bundle.frame_count} frames, {len(edges)} edges, "
                f"{len(masks)} masks")
    return bundle


# Configuration

def _convert(key: str, kind: Any, text: str) -> Any:
    try:
        if kind is bool or kind == 'bool':
            return validate_bool(text, key)
        if kind is int or kind == 'int':
            return validate_non_negative_int(text, key)
        if kind is float or kind == 'float':
            return validate_positive_float(text, key, allow_zero=True)
        if key in CHOICE_KEYS:
            return validate_choice(text, key, CHOICE_KEYS[key])
        return text.strip().lower()
    except (ValidationException, ValueError) as e:
        raise InvalidValueException(key, str(e))


def config_from_values(values: Dict[str, str], base: Optional[PipelineConfig] = None) -> PipelineConfig:
    """
    Apply textual ``key -> value`` settings on top of ``base`` (defaults when None).

    Raises:
        UnknownKeyException: For a key PipelineConfig does not have
        InvalidValueException: For a value that fails conversion or validation
    """
    types = {f.name: f.type for f in fields(PipelineConfig)}
    changes = {}
    for key, text in values.items():
        if key not in types:
            raise UnknownKeyException(key)
        changes[key] = _convert(key, types[key], text)
    config = replace(base or PipelineConfig(), **changes)
    return config.validate()


def parse_config(path: str) -> PipelineConfig:
    """
    Parse a ``key = value`` config file; ``#`` starts a comment.

    Raises:
        MissingFileException: If the file does not exist
        FormatException: On a line without ``=`` or a repeated key
        UnknownKeyException: On a key PipelineConfig does not have
        InvalidValueException: On a value violating its invariant
    """
    if not os.path.isfile(path):
        raise MissingFileException(f"Config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            try:
                pair = split_key_value(line)
            except ValueError as e:
                raise FormatException(str(e), path, f"line {number}")
            if pair is None:
                continue
            key, value = pair
            if key in values:
                raise FormatException(f"Key '{key}' given twice", path, f"line {number}")
            values[key] = value
    config = config_from_values(values)
    logger.debug(f"Config from {path}: {values}")
    return config


def write_config(config: PipelineConfig, path: str) -> None:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write("\n".join(lines) + "\n")


# Run outputs

def write_keyframes(state: ReconstructionState, path: str) -> None:
    """``frame_id tx ty tz qx qy qz qw`` for every keyframe, in frame order."""
    lines = [" ".join([str(fid)] + _pose_fields(state.poses[fid])) for fid in state.keyframes]
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def read_keyframes(path: str) -> Dict[int, Pose]:
    poses = {}
    with open(path, 'r', encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise FormatException(f"Expected 8 fields, got {len(parts)}", path, f"line {number}")
            try:
                values = [float(p) for p in parts[1:]]
                poses[int(parts[0])] = Pose(values[3:7], values[0:3])
            except (ValueError, ValidationException):
                raise FormatException(f"Bad keyframe line {line.strip()!r}", path, f"line {number}")
    return poses


def _sim_fields(pose: SimPose) -> List[str]:
    values = [pose.scale] + list(pose.translation) + list(pose.rotation)
    return [format_float(float(v), POSE_DIGITS) for v in values]


def write_pose_graph(graph: PoseGraph, path: str) -> None:
    """
    ``NODE id fixed s tx ty tz qx qy qz qw`` and
    ``EDGE src dst kind s tx ty tz qx qy qz qw`` lines.
    """
    lines = []
    for node in graph.nodes:
        lines.append(" ".join(["NODE", str(node.frame_id), str(int(node.fixed))] + _sim_fields(node.pose)))
    for edge in graph.edges:
        lines.append(" ".join(["EDGE", str(edge.src), str(edge.dst), edge.kind] + _sim_fields(edge.measurement)))
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def write_events(events: Iterable[Dict[str, Any]], path: str) -> None:
    """One JSON object per line with sorted keys."""
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        for event in events:
            handle.write(json.dumps(event, sort_keys=True) + "\n")


def read_events(path: str) -> List[Dict[str, Any]]:
    events = []
    with open(path, 'r', encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatException(f"Invalid JSON: {str(e)}", path, f"line {number}")
    return events


def write_report(metrics: Dict[str, Any], path: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(format_report(metrics))


def read_report(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise MissingFileException(f"Report not found: {path}")
    with open(path, 'r', encoding='utf-8') as handle:
        return parse_report(handle.read())


# Manifest

@dataclass
class RunManifest:
    """Inputs, outputs and stage timings of one run."""

    config: Dict[str, Any]
    seed: int
    tool_version: str = TOOL_VERSION
    bundle_hash: str = ""
    outputs: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(cls, config: PipelineConfig, bundle_dir: str, out_dir: str, files: Sequence[str],
              timings: Optional[Dict[str, float]] = None) -> 'RunManifest':
        outputs = {name: sha256_file(os.path.join(out_dir, name)) for name in sorted(files)
                   if os.path.isfile(os.path.join(out_dir, name))}
        return cls(config=config.to_dict(), seed=config.seed, bundle_hash=sha256_directory(bundle_dir),
                   outputs=outputs, timings={k: round(v, 6) for k, v in sorted((timings or {}).items())})

    def to_dict(self) -> Dict[str, Any]:
        return {'config': self.config, 'seed': self.seed, 'tool_version': self.tool_version,
                'bundle_hash': self.bundle_hash, 'outputs': self.outputs, 'timings': self.timings}

    def write(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def read(cls, path: str) -> 'RunManifest':
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                data = json.load(handle)
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise FormatException(f"Bad manifest: {str(e)}", path)
