"""Rigid-transform algebra for radar-to-camera extrinsics.

Conventions used throughout the package:

* A twist is a 6-vector ``(rho_x, rho_y, rho_z, phi_x, phi_y, phi_z)``:
  translation part first, rotation part second.
* ``ExtrinsicTransform`` maps radar-frame points into the camera frame,
  ``X_cam = R @ X_radar + t``.
* Updates compose on the left: ``T = exp(rho * xi) @ T0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

SMALL_ANGLE = 1e-6
LOG_PI_MARGIN = 1e-6
QUAT_EPS = 1e-12
Z_MIN = 0.1


class IllConditionedLogError(ValueError):
    """Rotation angle is too close to pi for a unique logarithm."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class ExtrinsicTransform:
    """Immutable rigid transform, rotation (3x3) plus translation (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        _check_finite(R, "rotation")
        _check_finite(t, "translation")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "ExtrinsicTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "ExtrinsicTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "ExtrinsicTransform") -> "ExtrinsicTransform":
        """``self @ other``: apply ``other`` first."""
        return ExtrinsicTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "ExtrinsicTransform":
        Rt = self.rotation.T
        return ExtrinsicTransform(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an (n, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        R = self.rotation
        return float(max(np.abs(R @ R.T - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of a feature map subsampled by ``stride``."""
        if stride < 1:
            raise ValueError("stride must be >= 1")
        w = -(-self.width // stride)
        h = -(-self.height // stride)
        return CameraIntrinsics(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride, w, h)


# -- SO(3) -------------------------------------------------------------------


def _so3_coeffs(theta: float):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2**3 / 5040.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2**3 / 40320.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
        return a, b, c
    s = math.sin(theta)
    a = s / theta
    half = math.sin(0.5 * theta)
    b = 2.0 * half * half / t2
    if theta < 1e-2:
        # theta - sin(theta) cancels; the series is exact to double precision here
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
    else:
        c = (theta - s) / (t2 * theta)
    return a, b, c


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _so3_coeffs(theta)
    P = hat(phi)
    return np.eye(3) + a * P + b * (P @ P)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta > math.pi - LOG_PI_MARGIN:
        raise IllConditionedLogError(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        # w = sin(theta) * axis; theta / sin(theta) ~ 1 + theta^2 / 6
        return (1.0 + theta * theta / 6.0) * w
    if theta < math.pi - 1e-3:
        return (theta / s) * w
    # near pi the antisymmetric part vanishes; take the axis from the symmetric part
    S = 0.5 * (R + R.T) - c * np.eye(3)  # = (1 - c) axis axis^T
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / math.sqrt(S[i, i])
    if axis @ w < 0:
        axis = -axis
    return theta * axis / np.linalg.norm(axis)


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    _, b, c = _so3_coeffs(theta)
    P = hat(phi)
    return np.eye(3) + b * P + c * (P @ P)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    P = hat(phi)
    if theta < 1e-3:
        d = 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0
    else:
        half = 0.5 * theta
        d = (1.0 - half / math.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * P + d * (P @ P)


# -- SE(3) -------------------------------------------------------------------


def _as_twist(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (6,):
        raise ValueError("twist must be a 6-vector (translation part, rotation part)")
    _check_finite(xi, "twist")
    return xi


def se3_exp(xi) -> ExtrinsicTransform:
    """Exponential map of a twist ``(rho, phi)``."""
    xi = _as_twist(xi)
    rho, phi = xi[:3], xi[3:]
    return ExtrinsicTransform(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(T: ExtrinsicTransform) -> np.ndarray:
    """Logarithm map; raises ``IllConditionedLogError`` near a half-turn."""
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return np.concatenate([rho, phi])


def _q_coeffs(theta: float):
    t2 = theta * theta
    if theta < 0.05:
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0
        c2 = -1.0 / 24.0 + t2 / 720.0 - t2 * t2 / 40320.0 + t2**3 / 3628800.0
        # c3 = c2 - 3 (theta - sin - theta^3/6) / theta^5
        c3 = -1.0 / 60.0 + t2 * (1.0 / 720.0 - 3.0 / 5040.0) + t2 * t2 * (-1.0 / 40320.0 + 3.0 / 362880.0)
        return c1, c2, c3
    s, c = math.sin(theta), math.cos(theta)
    c1 = (theta - s) / theta**3
    c2 = (1.0 - t2 / 2.0 - c) / t2**2
    c3 = c2 - 3.0 * (theta - s - theta**3 / 6.0) / theta**5
    return c1, c2, c3


def se3_left_jacobian(xi) -> np.ndarray:
    """6x6 left Jacobian of SE(3) in (translation, rotation) ordering.

    ``exp(xi + d) ~= exp(J @ d) @ exp(xi)`` to first order in ``d``.
    """
    xi = _as_twist(xi)
    rho, phi = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    c1, c2, c3 = _q_coeffs(theta)
    Pr, Pp = hat(rho), hat(phi)
    PpPr = Pp @ Pr
    PrPp = Pr @ Pp
    PpPrPp = PpPr @ Pp
    Q = (
        0.5 * Pr
        + c1 * (PpPr + PrPp + PpPrPp)
        - c2 * (Pp @ PpPr + PrPp @ Pp - 3.0 * PpPrPp)
        - 0.5 * c3 * (PpPrPp @ Pp + Pp @ PpPrPp)
    )
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[:3, 3:] = Q
    out[3:, 3:] = J
    return out


def gated_update(T0: ExtrinsicTransform, xi, rho: float) -> ExtrinsicTransform:
    """Confidence-gated refinement ``exp(rho * xi) @ T0``."""
    if not (0.0 <= rho <= 1.0):
        raise ValueError(f"gate rho={rho} outside [0, 1]")
    xi = _as_twist(xi)
    if rho == 0.0:
        return T0
    return se3_exp(rho * xi) @ T0


# -- quaternions -------------------------------------------------------------


def normalize_quaternion(q, eps: float = QUAT_EPS) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    n = float(np.linalg.norm(q))
    if q.shape != (4,) or not np.isfinite(n) or n <= eps:
        raise ValueError("quaternion must be a finite 4-vector with norm > eps")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a quaternion ``(w, x, y, z)``; normalizes first."""
    w, x, y, z = normalize_quaternion(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def se3_from_quat_trans(q, t) -> ExtrinsicTransform:
    return ExtrinsicTransform(quat_to_matrix(q), np.asarray(t, dtype=float))


# -- metrics and projection ----------------------------------------------------


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    R = np.asarray(R, dtype=float)
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * float(np.linalg.norm(vee(R - R.T)))
    # atan2 keeps full precision near 0 and near pi, unlike acos
    return math.atan2(s, c)


def pose_errors(T_est: ExtrinsicTransform, T_ref: ExtrinsicTransform) -> tuple[float, float]:
    """(geodesic rotation error in degrees, Euclidean translation error in meters)."""
    rot = math.degrees(rotation_angle(T_est.rotation @ T_ref.rotation.T))
    trans = float(np.linalg.norm(T_est.translation - T_ref.translation))
    return rot, trans


def project_point(K: CameraIntrinsics, T: ExtrinsicTransform, X_radar, z_min: float = Z_MIN):
    """Pinhole projection of one radar-frame point.

    Returns ``(u, v, z_cam)``. When ``z_cam <= z_min`` the pixel coordinates are
    NaN; callers cull on ``z_cam``.
    """
    Xc = T.rotation @ np.asarray(X_radar, dtype=float) + T.translation
    z = float(Xc[2])
    if z <= z_min:
        return math.nan, math.nan, z
    return K.fx * Xc[0] / z + K.cx, K.fy * Xc[1] / z + K.cy, z
