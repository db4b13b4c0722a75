"""Calibration-conditioned projection and differentiable bilinear splatting.

Radar detections are lifted onto a horizontal plane at height ``h0``, moved
into the camera frame with the current extrinsic, projected with a pinhole
model and splatted with the tent kernel
``k(du, dv) = max(0, 1 - |du|) * max(0, 1 - |dv|)``. The splatted features
are divided by the accumulated kernel mass.

``splat_jacobian`` differentiates the normalized map with respect to the
refinement twist of ``T = exp(rho * xi) @ T0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Callable, Sequence

import numpy as np

from .geometry import CameraIntrinsics, ExtrinsicTransform, Z_MIN, gated_update, hat, se3_left_jacobian
from .radar_density import DensityParams, RadarDetection, doppler_weight, intensity_weight

log = logging.getLogger(__name__)

MASS_EPS = 1e-8


@dataclass(frozen=True)
class MapSpec:
    """Target raster: full-image intrinsics plus the feature-map stride."""

    intrinsics: CameraIntrinsics
    stride: int = 4
    z_min: float = Z_MIN

    @property
    def K(self) -> CameraIntrinsics:
        return self.intrinsics.scaled(self.stride)

    @property
    def shape(self) -> tuple[int, int]:
        K = self.K
        return K.height, K.width


@dataclass
class SplattedFeatureMap:
    values: np.ndarray  # (C, H, W), normalized
    mass: np.ndarray  # (H, W)
    eps: float = MASS_EPS

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def raw(self) -> np.ndarray:
        """Unnormalized accumulation ``values * (mass + eps)``."""
        return self.values * (self.mass + self.eps)


@dataclass
class SplatJacobian:
    """Partials of the normalized map on the pixels touched by any kernel.

    ``pixels`` holds flat indices into the (H, W) raster; ``d_values`` has
    shape (C, P, 6) and ``d_mass`` shape (P, 6). Pixels not listed have zero
    derivative.
    """

    shape: tuple[int, int]
    pixels: np.ndarray
    d_values: np.ndarray
    d_mass: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def dense(self, channel: int = 0) -> np.ndarray:
        out = np.zeros((self.shape[0] * self.shape[1], 6))
        out[self.pixels] = self.d_values[channel]
        return out.reshape(*self.shape, 6)


# -- lifting and features ------------------------------------------------------


def lift_detection(det: RadarDetection, h0: float) -> np.ndarray:
    return np.array([det.r * np.cos(det.theta), det.r * np.sin(det.theta), h0])


def lift_detections(dets: Sequence[RadarDetection], h0: float) -> np.ndarray:
    if not dets:
        return np.zeros((0, 3))
    r = np.array([d.r for d in dets])
    th = np.array([d.theta for d in dets])
    return np.stack([r * np.cos(th), r * np.sin(th), np.full_like(r, h0)], axis=1)


def embed_feature(det: RadarDetection, params: DensityParams, r_max: float = 100.0, v_max: float = 10.0) -> np.ndarray:
    """Default 4-channel embedding: intensity weight, Doppler gate, range, Doppler."""
    return np.array(
        [
            float(intensity_weight(det.s, params)),
            float(doppler_weight(det.v, params)),
            min(max(det.r / r_max, 0.0), 1.0),
            min(max((det.v / v_max + 1.0) / 2.0, 0.0), 1.0),
        ]
    )


FeatureFn = Callable[[RadarDetection], np.ndarray]


def embed_features(dets: Sequence[RadarDetection], psi: FeatureFn) -> np.ndarray:
    if not dets:
        return np.zeros((0, 1))
    return np.stack([np.atleast_1d(np.asarray(psi(d), dtype=float)) for d in dets])


# -- projection ------------------------------------------------------------------


def project_batch(points: np.ndarray, K: CameraIntrinsics, T: ExtrinsicTransform, z_min: float = Z_MIN):
    """Vectorized pinhole projection.

    Returns ``(u, v, z, visible)``; ``visible`` requires ``z > z_min`` and the
    pixel inside ``[-1, W] x [-1, H]``.
    """
    Xc = T.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = Xc[:, 2]
    front = z > z_min
    zs = np.where(front, z, 1.0)
    u = np.where(front, K.fx * Xc[:, 0] / zs + K.cx, np.nan)
    v = np.where(front, K.fy * Xc[:, 1] / zs + K.cy, np.nan)
    with np.errstate(invalid="ignore"):
        visible = front & (u >= -1) & (u <= K.width) & (v >= -1) & (v <= K.height)
    return u, v, z, visible


def _axis_taps(x: np.ndarray):
    """Three taps per point along one axis: pixel index, weight, d weight / dx.

    At exact integer positions the slope is the average of the one-sided
    slopes.
    """
    x0 = np.floor(x)
    a = x - x0
    on_node = a == 0.0
    idx = x0[:, None].astype(int) + np.array([-1, 0, 1])
    w = np.stack([np.zeros_like(a), 1.0 - a, a], axis=1)
    dw = np.stack(
        [np.where(on_node, -0.5, 0.0), np.where(on_node, 0.0, -1.0), np.where(on_node, 0.5, 1.0)],
        axis=1,
    )
    return idx, w, dw, on_node


def _taps(u, v, width, height):
    iu, wu, dwu, nu = _axis_taps(u)
    iv, wv, dwv, nv = _axis_taps(v)
    # (n, 3, 3): rows are v taps, columns u taps
    k = wv[:, :, None] * wu[:, None, :]
    dk_du = wv[:, :, None] * dwu[:, None, :]
    dk_dv = dwv[:, :, None] * wu[:, None, :]
    col = np.broadcast_to(iu[:, None, :], k.shape)
    row = np.broadcast_to(iv[:, :, None], k.shape)
    inb = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    flat = np.where(inb, row * width + col, -1)
    return flat, k, dk_du, dk_dv, inb, nu | nv


def splat_image_plane(u, v, visible, features: np.ndarray, width: int, height: int, eps: float = MASS_EPS) -> SplattedFeatureMap:
    """Kernel-mass-normalized bilinear splat of per-point features."""
    features = np.asarray(features, dtype=float).reshape(len(u), -1) if len(u) else np.zeros((0, 1))
    C = features.shape[1]
    npx = width * height
    R = np.zeros((C, npx))
    G = np.zeros(npx)
    vis = np.asarray(visible, dtype=bool)
    if vis.any():
        flat, k, _, _, inb, _ = _taps(np.asarray(u)[vis], np.asarray(v)[vis], width, height)
        f = features[vis]
        sel = inb & (k != 0.0)
        idx = flat[sel]
        kw = k[sel]
        pt = np.nonzero(sel)[0]
        G = np.bincount(idx, weights=kw, minlength=npx)
        for c in range(C):
            R[c] = np.bincount(idx, weights=kw * f[pt, c], minlength=npx)
    Rb = R / (G + eps)
    return SplattedFeatureMap(Rb.reshape(C, height, width), G.reshape(height, width), eps)


def point_twist_jacobians(points: np.ndarray, K: CameraIntrinsics, T0: ExtrinsicTransform, xi, rho: float):
    """Projection and d(u, v)/d(xi) for every point under ``exp(rho xi) T0``.

    Returns ``(u, v, z, J)`` with ``J`` of shape (n, 2, 6); rows of invisible
    points are meaningless and must be masked by the caller.
    """
    xi = np.asarray(xi, dtype=float)
    T = gated_update(T0, xi, rho)
    Xc = T.apply(points)
    n = len(Xc)
    z = Xc[:, 2]
    zs = np.where(z > 0, z, 1.0)
    u = K.fx * Xc[:, 0] / zs + K.cx
    v = K.fy * Xc[:, 1] / zs + K.cy
    # dX_cam / d(delta) = [I, -hat(X_cam)], delta = rho * Jl(rho xi) dxi
    dX = np.zeros((n, 3, 6))
    dX[:, :, :3] = np.eye(3)
    dX[:, :, 3:] = -np.stack([hat(x) for x in Xc]) if n else 0.0
    dX = dX @ (rho * se3_left_jacobian(rho * xi))
    dpix = np.zeros((n, 2, 3))
    dpix[:, 0, 0] = K.fx / zs
    dpix[:, 0, 2] = -K.fx * Xc[:, 0] / zs**2
    dpix[:, 1, 1] = K.fy / zs
    dpix[:, 1, 2] = -K.fy * Xc[:, 1] / zs**2
    return u, v, z, dpix @ dX


def splat_jacobian(
    points: np.ndarray,
    features: np.ndarray,
    K: CameraIntrinsics,
    T0: ExtrinsicTransform,
    xi,
    rho: float,
    z_min: float = Z_MIN,
    eps: float = MASS_EPS,
) -> tuple[SplattedFeatureMap, SplatJacobian]:
    """Normalized splat at ``exp(rho xi) T0`` and its Jacobian w.r.t. ``xi``."""
    W, H = K.width, K.height
    npx = W * H
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    features = np.asarray(features, dtype=float).reshape(len(points), -1) if len(points) else np.zeros((0, 1))
    C = features.shape[1]
    u, v, z, J = point_twist_jacobians(points, K, T0, xi, rho)
    with np.errstate(invalid="ignore"):
        vis = (z > z_min) & (u >= -1) & (u <= W) & (v >= -1) & (v <= H)
    empty = SplatJacobian((H, W), np.zeros(0, dtype=int), np.zeros((C, 0, 6)), np.zeros((0, 6)))
    if not vis.any():
        smap = SplattedFeatureMap(np.zeros((C, H, W)), np.zeros((H, W)), eps)
        return smap, empty

    flat, k, dku, dkv, inb, degen = _taps(u[vis], v[vis], W, H)
    f = features[vis]
    Jv = J[vis]
    # dk / dxi for every (point, tap): (n, 3, 3, 6)
    dk = dku[..., None] * Jv[:, None, None, 0, :] + dkv[..., None] * Jv[:, None, None, 1, :]
    sel = inb & ((k != 0.0) | np.any(dk != 0.0, axis=-1))
    pt = np.nonzero(sel)[0]
    idx = flat[sel]
    kw = k[sel]
    dkw = dk[sel]
    pixels, inv = np.unique(idx, return_inverse=True)
    P = len(pixels)

    G = np.bincount(inv, weights=kw, minlength=P)
    dG = np.stack([np.bincount(inv, weights=dkw[:, j], minlength=P) for j in range(6)], axis=1)
    R = np.stack([np.bincount(inv, weights=kw * f[pt, c], minlength=P) for c in range(C)])
    dR = np.stack(
        [np.stack([np.bincount(inv, weights=dkw[:, j] * f[pt, c], minlength=P) for j in range(6)], axis=1) for c in range(C)]
    )
    den = G + eps
    Rb = R / den
    dRb = dR / den[None, :, None] - (R / den**2)[:, :, None] * dG[None, :, :]

    values = np.zeros((C, npx))
    values[:, pixels] = Rb
    mass = np.zeros(npx)
    mass[pixels] = G
    smap = SplattedFeatureMap(values.reshape(C, H, W), mass.reshape(H, W), eps)
    degenerate = np.zeros(len(points), dtype=bool)
    degenerate[np.nonzero(vis)[0]] = degen
    if degenerate.any():
        log.warning("splat_jacobian: %d points on integer pixel lines; using averaged subgradient", int(degenerate.sum()))
    return smap, SplatJacobian((H, W), pixels, dRb, dG, degenerate)


# -- surrogate alignment loss ------------------------------------------------------


def alignment_raster(smap: SplattedFeatureMap, jac: SplatJacobian | None = None, channel: int = 0, mode: str = "mass"):
    """Raster fed to the alignment loss, optionally with its Jacobian rows.

    ``mode="normalized"`` uses the normalized channel directly. ``mode="mass"``
    weights it by kernel mass, ``mass * values[channel]``; normalization makes
    an isolated point's footprint independent of its sub-pixel position, so
    only the mass-weighted raster carries a usable positional gradient.
    """
    Rb = smap.values[channel]
    if mode == "normalized":
        A = Rb
        dA = None if jac is None else jac.d_values[channel]
    elif mode == "mass":
        A = smap.mass * Rb
        if jac is None:
            dA = None
        else:
            px = jac.pixels
            G = smap.mass.reshape(-1)[px]
            r = Rb.reshape(-1)[px]
            dA = G[:, None] * jac.d_values[channel] + r[:, None] * jac.d_mass
    else:
        raise ValueError(f"unknown alignment raster mode {mode!r}")
    return A, dA


def alignment_loss(raster, target: np.ndarray, tol: float = 1e-12) -> tuple[float, np.ndarray]:
    """Negative normalized cross-correlation and its gradient w.r.t. ``raster``.

    Accepts an (H, W) array or a ``SplattedFeatureMap`` (channel 0 is used).
    Zero-variance inputs give loss 0 and a zero gradient.
    """
    if isinstance(raster, SplattedFeatureMap):
        raster = raster.values[0]
    a = np.asarray(raster, dtype=float)
    b = np.asarray(target, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt(np.sum(da * da)))
    nb = float(np.sqrt(np.sum(db * db)))
    if na <= tol * max(1.0, float(np.abs(a).max())) or nb <= tol * max(1.0, float(np.abs(b).max())):
        return 0.0, np.zeros_like(a)
    ncc = float(np.sum(da * db)) / (na * nb)
    grad = -(db / (na * nb) - ncc * da / (na * na))
    return -ncc, grad


def loss_gradient_xi(dL_dA: np.ndarray, dA: np.ndarray, jac: SplatJacobian) -> np.ndarray:
    """Chain a raster gradient through the sparse Jacobian rows."""
    return dL_dA.reshape(-1)[jac.pixels] @ dA
