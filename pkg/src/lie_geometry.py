"""
SE(3)/SIM(3) group operations, the pinhole camera model and patch reprojection.

Poses follow the world-to-camera convention: a camera point is
``x_cam = R @ x_world + t``. Rotations are stored as unit quaternions in
scipy's ``(x, y, z, w)`` order. Tangent vectors are ordered translation
first, then rotation, then (for SIM(3)) log-scale::

    Twist6 = (rho_x, rho_y, rho_z, phi_x, phi_y, phi_z)
    Twist7 = (rho_x, rho_y, rho_z, phi_x, phi_y, phi_z, sigma)

All solvers use the left retraction ``G <- exp(xi) * G``.

At a rotation angle of exactly pi the log picks the axis whose
largest-magnitude component is positive.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

# Handle imports for both direct execution and module usage
try:
    # Try relative imports first (when used as module)
    from .exceptions import BehindCameraException, DepthNonPositiveException, ValidationException
except ImportError:
    # Fall back to absolute imports (when run directly)
    # Add src directory to path if needed
    current_dir = os.path.dirname(os.path.abspath(__file__))
    if current_dir not in sys.path:
        sys.path.insert(0, current_dir)

    from exceptions import BehindCameraException, DepthNonPositiveException, ValidationException


MIN_DEPTH = 1e-8
_SMALL_ANGLE = 1e-4
_IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def _as_quat(rotation) -> np.ndarray:
    if isinstance(rotation, Rotation):
        quat = rotation.as_quat()
    else:
        quat = np.asarray(rotation, dtype=float).reshape(4)
    norm = np.linalg.norm(quat)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValidationException(f"Invalid quaternion: {quat}")
    return quat / norm


def _vector3(value) -> np.ndarray:
    vec = np.asarray(value, dtype=float).reshape(3)
    return vec.copy()


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform."""

    rotation: np.ndarray = field(default_factory=lambda: _IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, 'rotation', _as_quat(self.rotation))
        object.__setattr__(self, 'translation', _vector3(self.translation))

    @classmethod
    def identity(cls) -> 'Pose':
        return cls()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'Pose':
        matrix = np.asarray(matrix, dtype=float)
        return cls(Rotation.from_matrix(matrix[:3, :3]).as_quat(), matrix[:3, 3])

    @classmethod
    def from_rt(cls, rotation_matrix: np.ndarray, translation: np.ndarray) -> 'Pose':
        return cls(Rotation.from_matrix(rotation_matrix).as_quat(), translation)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.translation
        return out

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to one point (3,) or a batch (N, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation)))

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class SimPose:
    """Similarity transform ``x -> scale * R @ x + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: _IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise ValidationException(f"SimPose scale must be positive: {scale}")
        object.__setattr__(self, 'scale', scale)
        object.__setattr__(self, 'rotation', _as_quat(self.rotation))
        object.__setattr__(self, 'translation', _vector3(self.translation))

    @classmethod
    def identity(cls) -> 'SimPose':
        return cls()

    @classmethod
    def from_pose(cls, pose: Pose, scale: float = 1.0) -> 'SimPose':
        return cls(scale, pose.rotation, pose.translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'SimPose':
        matrix = np.asarray(matrix, dtype=float)
        sR = matrix[:3, :3]
        scale = np.cbrt(np.linalg.det(sR))
        return cls(scale, Rotation.from_matrix(sR / scale).as_quat(), matrix[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.scale * self.R
        out[:3, 3] = self.translation
        return out

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * (points @ self.R.T) + self.translation

    def rigid_part(self) -> Pose:
        """Rotation and translation with the scale dropped."""
        return Pose(self.rotation, self.translation)

    def __repr__(self) -> str:
        return (f"SimPose(s={self.scale:.6g}, q={np.round(self.rotation, 6).tolist()}, "
                f"t={np.round(self.translation, 6).tolist()})")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics without distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationException(f"Focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationException(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> 'CameraIntrinsics':
        """Intrinsics with fx = fy = focal and the principal point at the image center."""
        return cls(float(focal), float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def with_focal(self, focal: float) -> 'CameraIntrinsics':
        return CameraIntrinsics(float(focal), float(focal), self.cx, self.cy, self.width, self.height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Boolean mask of pixels inside the image bounds."""
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= 0) & (pixels[:, 0] < self.width)
                & (pixels[:, 1] >= 0) & (pixels[:, 1] < self.height))


GroupElement = Union[Pose, SimPose]


# Basic algebra

def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    Phi = skew(phi)
    if theta < _SMALL_ANGLE:
        a = 0.5 - theta ** 2 / 24.0
        b = 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * Phi + b * Phi @ Phi


def _sim3_w(phi: np.ndarray, sigma: float) -> np.ndarray:
    """Integral of exp(s * (sigma*I + [phi]x)) over s in [0, 1]."""
    block = np.zeros((6, 6))
    block[:3, :3] = sigma * np.eye(3) + skew(phi)
    block[:3, 3:] = np.eye(3)
    return expm(block)[:3, 3:]


def _principal_rotvec(rotation: Rotation) -> np.ndarray:
    phi = rotation.as_rotvec()
    if np.pi - np.linalg.norm(phi) < 1e-9:
        idx = int(np.argmax(np.abs(phi)))
        if phi[idx] < 0:
            phi = -phi
    return phi


# Exponential and logarithm

def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map from se(3) to a Pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    rotation = Rotation.from_rotvec(phi)
    return Pose(rotation.as_quat(), _so3_left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm of a Pose as a Twist6."""
    phi = _principal_rotvec(Rotation.from_quat(pose.rotation))
    rho = np.linalg.solve(_so3_left_jacobian(phi), pose.translation)
    return np.concatenate([rho, phi])


def sim3_exp(xi: np.ndarray) -> SimPose:
    """Exponential map from sim(3) to a SimPose; the scale channel maps to e^sigma."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    rho, phi, sigma = xi[:3], xi[3:6], xi[6]
    rotation = Rotation.from_rotvec(phi)
    return SimPose(np.exp(sigma), rotation.as_quat(), _sim3_w(phi, sigma) @ rho)


def sim3_log(pose: SimPose) -> np.ndarray:
    """Logarithm of a SimPose as a Twist7."""
    sigma = np.log(pose.scale)
    phi = _principal_rotvec(Rotation.from_quat(pose.rotation))
    rho = np.linalg.solve(_sim3_w(phi, sigma), pose.translation)
    return np.concatenate([rho, phi, [sigma]])


# Group operations

def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """Product a * b; a Pose mixed with a SimPose is lifted to SIM(3)."""
    if isinstance(a, SimPose) or isinstance(b, SimPose):
        a = a if isinstance(a, SimPose) else SimPose.from_pose(a)
        b = b if isinstance(b, SimPose) else SimPose.from_pose(b)
        rotation = Rotation.from_quat(a.rotation) * Rotation.from_quat(b.rotation)
        translation = a.scale * (a.R @ b.translation) + a.translation
        return SimPose(a.scale * b.scale, rotation.as_quat(), translation)

    rotation = Rotation.from_quat(a.rotation) * Rotation.from_quat(b.rotation)
    return Pose(rotation.as_quat(), a.R @ b.translation + a.translation)


def inverse(a: GroupElement) -> GroupElement:
    rotation = Rotation.from_quat(a.rotation).inv()
    Rt = rotation.as_matrix()
    if isinstance(a, SimPose):
        return SimPose(1.0 / a.scale, rotation.as_quat(), -(Rt @ a.translation) / a.scale)
    return Pose(rotation.as_quat(), -(Rt @ a.translation))


def relative(G_i: GroupElement, G_j: GroupElement) -> GroupElement:
    """Transform from camera i to camera j: G_j * G_i^-1."""
    return compose(G_j, inverse(G_i))


def retract(pose: Pose, xi: np.ndarray) -> Pose:
    """Left retraction exp(xi) * pose."""
    return compose(se3_exp(xi), pose)


def retract_sim3(pose: SimPose, xi: np.ndarray) -> SimPose:
    return compose(sim3_exp(xi), pose)


def adjoint_se3(pose: Pose) -> np.ndarray:
    """6x6 adjoint for (rho, phi) ordering."""
    R = pose.R
    adj = np.zeros((6, 6))
    adj[:3, :3] = R
    adj[:3, 3:] = skew(pose.translation) @ R
    adj[3:, 3:] = R
    return adj


def adjoint_sim3(pose: SimPose) -> np.ndarray:
    """7x7 adjoint for (rho, phi, sigma) ordering."""
    R = pose.R
    adj = np.zeros((7, 7))
    adj[:3, :3] = pose.scale * R
    adj[:3, 3:6] = skew(pose.translation) @ R
    adj[:3, 6] = -pose.translation
    adj[3:6, 3:6] = R
    adj[6, 6] = 1.0
    return adj


def ad_sim3(xi: np.ndarray) -> np.ndarray:
    """Matrix of the Lie bracket [xi, .] on sim(3)."""
    rho, phi, sigma = xi[:3], xi[3:6], xi[6]
    Phi = skew(phi)
    out = np.zeros((7, 7))
    out[:3, :3] = sigma * np.eye(3) + Phi
    out[:3, 3:6] = skew(rho)
    out[:3, 6] = -rho
    out[3:6, 3:6] = Phi
    return out


def sim3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian J_l(xi) = sum_k ad_xi^k / (k+1)!."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    block = np.zeros((14, 14))
    block[:7, :7] = ad_sim3(xi)
    block[:7, 7:] = np.eye(7)
    return expm(block)[:7, 7:]


def sim3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.solve(sim3_left_jacobian(xi), np.eye(7))


# Camera model

def project(K: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """
    Project a camera-frame point to pixel coordinates.

    Raises:
        DepthNonPositiveException: If the point is not in front of the camera
    """
    x, y, z = np.asarray(p_cam, dtype=float).reshape(3)
    if not z > MIN_DEPTH:
        raise DepthNonPositiveException(f"Cannot project point with depth {z}")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def backproject(K: CameraIntrinsics, pixel: np.ndarray, inv_depth: float) -> np.ndarray:
    """
    Lift a pixel with an inverse depth to a camera-frame point.

    Raises:
        DepthNonPositiveException: If inv_depth is not positive
    """
    if not inv_depth > 0:
        raise DepthNonPositiveException(f"Inverse depth must be positive: {inv_depth}")
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return ray / inv_depth


def reproject_patch(K: CameraIntrinsics, G_i: Pose, G_j: Pose, center: np.ndarray,
                    inv_depth: float) -> np.ndarray:
    """
    Pixel where the patch hosted in frame i with the given center lands in frame j.

    Raises:
        BehindCameraException: If the point is behind camera j
        DepthNonPositiveException: If inv_depth is not positive
    """
    point = relative(G_i, G_j).transform(backproject(K, center, inv_depth))
    if point[2] <= MIN_DEPTH:
        raise BehindCameraException(f"Patch reprojects behind camera (depth {point[2]:.3g})")
    return project(K, point)


def reproject_patch_jacobians(K: CameraIntrinsics, G_i: Pose, G_j: Pose, center: np.ndarray,
                              inv_depth: float) -> Tuple[np.ndarray, ...]:
    """
    Reprojection with analytic Jacobians.

    The point is carried in homogeneous form ``Y = R_ij p + t_ij d`` with
    ``p`` the normalized ray and ``d`` the inverse depth, which stays well
    conditioned for far points.

    Returns:
        Tuple (pixel, J_i, J_j, J_d, J_f): 2x6 Jacobians for left
        perturbations of G_i and G_j, the 2-vector for the inverse depth and
        the 2-vector for a shared focal length fx = fy

    Raises:
        BehindCameraException: If the point is behind camera j
    """
    if not inv_depth > 0:
        raise DepthNonPositiveException(f"Inverse depth must be positive: {inv_depth}")
    G_ij = relative(G_i, G_j)
    R, t = G_ij.R, G_ij.translation
    u, v = np.asarray(center, dtype=float).reshape(2)
    ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    Y = R @ ray + t * inv_depth
    if Y[2] <= MIN_DEPTH * inv_depth:
        raise BehindCameraException(f"Patch reprojects behind camera (depth {Y[2] / inv_depth:.3g})")

    z = Y[2]
    pixel = np.array([K.fx * Y[0] / z + K.cx, K.fy * Y[1] / z + K.cy])
    Jp = np.array([[K.fx / z, 0.0, -K.fx * Y[0] / z ** 2],
                   [0.0, K.fy / z, -K.fy * Y[1] / z ** 2]])

    dY_dxi = np.hstack([inv_depth * np.eye(3), -skew(Y)])
    J_j = Jp @ dY_dxi
    J_i = -J_j @ adjoint_se3(G_ij)
    J_d = Jp @ t

    # fx = fy = f with the principal point fixed
    dray_df = np.array([-(u - K.cx) / K.fx ** 2, -(v - K.cy) / K.fy ** 2, 0.0])
    J_f = np.array([Y[0] / z, Y[1] / z]) + Jp @ (R @ dray_df)
    return pixel, J_i, J_j, J_d, J_f
