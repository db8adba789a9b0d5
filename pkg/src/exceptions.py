"""
Custom exception classes for the casual-video SLAM backend.

This module defines custom exceptions for better error handling
and cleaner error reporting throughout the reconstruction pipeline.
"""


class SlamException(Exception):
    """Base exception class for all SLAM backend related errors."""
    pass


class ValidationException(SlamException):
    """Raised when input validation fails."""
    pass


class ConfigurationException(SlamException):
    """Raised when configuration is missing or invalid."""
    pass


# Geometry

class GeometryException(SlamException):
    """Base class for degenerate camera geometry."""
    pass


class DepthNonPositiveException(GeometryException):
    """Raised when a point sits on or behind the image plane, or an inverse depth is not positive."""
    pass


class BehindCameraException(GeometryException):
    """Raised when a reprojected patch lands behind the destination camera."""
    pass


class DegenerateGeometryException(GeometryException):
    """Raised when the initialization frames cannot constrain the focal length."""
    pass


class DegenerateCollinearException(GeometryException):
    """Raised when a similarity alignment is fed collinear or too few points."""
    pass


# Optimization

class OptimizationException(SlamException):
    """Base class for numerical failures of the solvers."""
    pass


class SingularSystemException(OptimizationException):
    """Raised when the damped normal equations stay singular."""
    pass


class NotEnoughConstraintsException(OptimizationException):
    """Raised when a problem has fewer residuals than free variables or no gauge."""
    pass


class DisconnectedGraphException(OptimizationException):
    """Raised when a pose graph has nodes unreachable from the fixed node."""
    pass


class RefinementDivergedException(OptimizationException):
    """Raised when post-refinement increased the cost and was rolled back."""
    pass


class EmptyHistoryException(SlamException):
    """Raised when the prior-scale alignment has no samples to work with."""
    pass


class LoopRejectedException(SlamException):
    """Raised when a loop candidate fails geometric verification."""
    pass


class DuplicateFrameException(SlamException):
    """Raised when a descriptor for an already stored frame is added."""
    pass


class InvalidSpecException(SlamException):
    """Raised when a simulator world description is invalid."""
    pass


# Pipeline

class InsufficientParallaxException(SlamException):
    """Raised when too few frames pass the initialization flow threshold."""
    pass


class FullyMaskedException(SlamException):
    """Raised when a frame mask leaves no pixel to sample patches from."""
    pass


class TrackingLostException(SlamException):
    """Raised when a registered frame keeps a large residual after bundle adjustment."""
    pass


class FrameMismatchException(SlamException):
    """Raised when two trajectories cannot be matched frame by frame."""
    pass


# Files and configuration

class DataFormatException(SlamException):
    """Base class for problems with input or output files."""
    pass


class FormatException(DataFormatException):
    """Raised when a file does not follow its documented format."""

    def __init__(self, message: str, path: str = None, location: str = None):
        self.path = path
        self.location = location
        prefix = ""
        if path:
            prefix = f"{path}"
            if location:
                prefix += f" ({location})"
            prefix += ": "
        super().__init__(f"{prefix}{message}")


class MissingFileException(DataFormatException):
    """Raised when a required file of a bundle is missing."""
    pass


class UnknownKeyException(DataFormatException):
    """Raised when a config file names a key PipelineConfig does not have."""

    def __init__(self, key: str, message: str = None):
        self.key = key
        super().__init__(message or f"Unknown config key: {key}")


class InvalidValueException(DataFormatException):
    """Raised when a config value violates its invariant."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"Invalid value for '{key}': {message}")
