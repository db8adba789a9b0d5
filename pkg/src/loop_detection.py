"""
Place-recognition descriptor store and loop confirmation.

Descriptors are unit vectors compared by inner product with a flat scan.
A loop is confirmed once ``consecutive`` query frames in a row match old
frames whose ids advance with the query, within a small tolerance.
"""

import logging
import os
import sys
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .exceptions import DuplicateFrameException, ValidationException
    from .utils import LOGGER_NAME
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from exceptions import DuplicateFrameException, ValidationException
    from utils import LOGGER_NAME


DEFAULT_DIMENSION = 64
DEFAULT_SIMILARITY = 0.9
DEFAULT_EXCLUSION = 90
DEFAULT_CONSECUTIVE = 3
DEFAULT_TOLERANCE = 2
DEFAULT_COOLDOWN = 50


@dataclass
class Descriptor:
    frame_id: int
    vector: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=float).reshape(-1)
        norm = np.linalg.norm(vector)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ValidationException(f"Descriptor for frame {self.frame_id} has zero or non-finite norm")
        self.vector = vector / norm


@dataclass
class LoopCandidate:
    query_frame: int
    match_frame: int
    similarity: float
    streak: int = 1


class DescriptorStore:
    """Flat inner-product index over unit descriptors."""

    def __init__(self, similarity_threshold: float = DEFAULT_SIMILARITY,
                 temporal_exclusion: int = DEFAULT_EXCLUSION):
        self.logger = logging.getLogger(LOGGER_NAME)
        self.similarity_threshold = similarity_threshold
        self.temporal_exclusion = temporal_exclusion
        self._ids = np.zeros(0, dtype=np.int64)
        self._vectors: Optional[np.ndarray] = None
        self._count = 0
        self._known = set()

    def __len__(self) -> int:
        return self._count

    @property
    def dimension(self) -> Optional[int]:
        return None if self._vectors is None else self._vectors.shape[1]

    def add(self, descriptor: Descriptor) -> None:
        """
        Store a descriptor; the vector is normalized on ingest.

        Raises:
            DuplicateFrameException: If the frame already has a descriptor
            ValidationException: If the dimension differs from stored descriptors
        """
        if descriptor.frame_id in self._known:
            raise DuplicateFrameException(f"Descriptor for frame {descriptor.frame_id} already stored")
        vector = descriptor.vector
        if self._vectors is None:
            self._vectors = np.zeros((64, vector.size))
            self._ids = np.zeros(64, dtype=np.int64)
        elif vector.size != self._vectors.shape[1]:
            raise ValidationException(
                f"Descriptor dimension {vector.size} differs from store dimension {self._vectors.shape[1]}"
            )
        if self._count == len(self._ids):
            self._vectors = np.vstack([self._vectors, np.zeros_like(self._vectors)])
            self._ids = np.concatenate([self._ids, np.zeros_like(self._ids)])
        self._vectors[self._count] = vector
        self._ids[self._count] = descriptor.frame_id
        self._count += 1
        self._known.add(descriptor.frame_id)

    def query(self, descriptor: Descriptor, temporal_exclusion: Optional[int] = None) -> Optional[LoopCandidate]:
        """
        Best stored match older than the exclusion window.

        Only frames with id < query_frame - temporal_exclusion are considered.

        Returns:
            LoopCandidate if the best similarity reaches the threshold, else None
        """
        exclusion = self.temporal_exclusion if temporal_exclusion is None else temporal_exclusion
        if self._count == 0:
            return None
        ids = self._ids[:self._count]
        eligible = ids < descriptor.frame_id - exclusion
        if not np.any(eligible):
            return None
        scores = self._vectors[:self._count][eligible] @ descriptor.vector
        best = int(np.argmax(scores))
        similarity = float(scores[best])
        if similarity < self.similarity_threshold:
            return None
        return LoopCandidate(int(descriptor.frame_id), int(ids[eligible][best]), similarity)


class LoopConfirmer:
    """
    Streak tracker over per-frame loop candidates.

    A streak grows when the next candidate comes from the very next query
    frame and its match id lies within ``tolerance`` of the previous match
    advanced by the query step. After a loop fires, nothing fires again for
    ``cooldown`` frames.
    """

    def __init__(self, consecutive: int = DEFAULT_CONSECUTIVE, tolerance: int = DEFAULT_TOLERANCE,
                 cooldown: int = DEFAULT_COOLDOWN):
        if consecutive < 1:
            raise ValidationException(f"consecutive must be >= 1: {consecutive}")
        self.logger = logging.getLogger(LOGGER_NAME)
        self.consecutive = consecutive
        self.tolerance = tolerance
        self.cooldown = cooldown
        self._last: Optional[LoopCandidate] = None
        self._last_loop_frame: Optional[int] = None

    def reset(self) -> None:
        self._last = None

    def push(self, candidate: Optional[LoopCandidate]) -> Optional[Tuple[int, int]]:
        """
        Feed the candidate of one query frame (None for no match).

        Returns:
            (query_frame, match_frame) when a loop is confirmed, else None
        """
        if candidate is None:
            self._last = None
            return None

        last = self._last
        if (last is not None and candidate.query_frame == last.query_frame + 1
                and abs(candidate.match_frame - (last.match_frame + 1)) <= self.tolerance):
            candidate.streak = last.streak + 1
        else:
            candidate.streak = 1
        self._last = candidate

        if candidate.streak < self.consecutive:
            return None
        if self._last_loop_frame is not None and candidate.query_frame - self._last_loop_frame < self.cooldown:
            return None

        self._last_loop_frame = candidate.query_frame
        self._last = None
        self.logger.info(
            f"Loop confirmed: frame {candidate.query_frame} revisits frame {candidate.match_frame} "
            f"(similarity {candidate.similarity:.3f}, streak {candidate.streak})"
        )
        return (candidate.query_frame, candidate.match_frame)


def confirm(candidate_stream: Iterable[Optional[LoopCandidate]], consecutive: int = DEFAULT_CONSECUTIVE,
            tolerance: int = DEFAULT_TOLERANCE, cooldown: int = DEFAULT_COOLDOWN) -> List[Tuple[int, int]]:
    """Convenience function returning every loop confirmed over a candidate stream."""
    confirmer = LoopConfirmer(consecutive, tolerance, cooldown)
    loops = []
    for candidate in candidate_stream:
        loop = confirmer.push(candidate)
        if loop is not None:
            loops.append(loop)
    return loops
