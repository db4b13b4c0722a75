"""Multi-frame range-azimuth density with Doppler gating and persistence.

Pipeline for one window of frames::

    per frame:  splat_frame(detections)            -> RAGrid (unblurred)
    window:     accumulate_window(frames)          -> decayed sum of blurred frames
                persistence_combine(acc, frames)   -> normalized density, frequency map

Frames are ordered oldest first; the newest frame receives weight ``alpha_0``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import logging
import math
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import ExtrinsicTransform

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass(frozen=True)
class RadarDetection:
    r: float
    theta: float  # radians
    v: float  # signed radial velocity, m/s
    s: float  # linear power
    frame: int = 0

    def __post_init__(self):
        vals = (self.r, self.theta, self.v, self.s)
        if not all(math.isfinite(x) for x in vals):
            raise ValueError("detection fields must be finite")
        if self.r < 0 or self.s < 0:
            raise ValueError("range and intensity must be non-negative")
        if not (-math.pi < self.theta <= math.pi):
            raise ValueError("azimuth must lie in (-pi, pi]")


@dataclass(frozen=True)
class DensityParams:
    mu_s: float = 0.0
    sigma_s: float = 1.0
    sigma_v: float = 2.0
    sigma_g: float = 1.0
    gamma: float = 0.8
    N: int = 5
    epsilon: float = 1e-6
    persistence_mode: str = "log"  # "log" or "power"
    kappa: float = 1.0
    doppler_gating: bool = True

    def __post_init__(self):
        if self.sigma_s <= 0 or self.sigma_v <= 0 or self.sigma_g <= 0:
            raise ValueError("sigma_s, sigma_v and sigma_g must be positive")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")
        if self.N < 1:
            raise ValueError("window length N must be >= 1")
        if self.persistence_mode not in ("log", "power"):
            raise ValueError("persistence_mode must be 'log' or 'power'")
        if self.persistence_mode == "power" and self.kappa <= 0:
            raise ValueError("kappa must be positive in power mode")


@dataclass(frozen=True)
class GridSpec:
    n_range: int = 256
    n_azimuth: int = 128
    r_max: float = 100.0
    az_min: float = math.radians(-60.0)
    az_max: float = math.radians(60.0)

    @property
    def dr(self) -> float:
        return self.r_max / (self.n_range - 1)

    @property
    def daz(self) -> float:
        return (self.az_max - self.az_min) / (self.n_azimuth - 1)

    def to_cell(self, r, theta):
        """Continuous cell coordinates; node (i, j) sits at r = i*dr, az = az_min + j*daz."""
        return np.asarray(r) / self.dr, (np.asarray(theta) - self.az_min) / self.daz


@dataclass
class RAGrid:
    spec: GridSpec
    values: np.ndarray
    dropped: int = 0

    @classmethod
    def zeros(cls, spec: GridSpec) -> "RAGrid":
        return cls(spec, np.zeros((spec.n_range, spec.n_azimuth)))


@dataclass
class FrequencyMap:
    counts: np.ndarray
    N: int = 1


# -- weights -----------------------------------------------------------------


def fit_intensity_stats(detections: Sequence[RadarDetection], floor: float = 2.0) -> tuple[float, float]:
    """Offset and scale for the intensity weight from a whole sequence.

    The scale is the standard deviation of ``log(1 + s)``; the offset sits
    ``floor`` deviations below the mean, so only returns weaker than the bulk
    of the sequence are attenuated. ``floor=0`` is plain standardization.
    """
    x = np.log1p([d.s for d in detections])
    if x.size == 0:
        return 0.0, 1.0
    sd = float(x.std())
    sd = sd if sd > 0 else 1.0
    return float(x.mean()) - floor * sd, sd


def intensity_weight(s, params: DensityParams):
    return np.clip((np.log1p(s) - params.mu_s) / params.sigma_s, 0.0, 1.0)


def doppler_weight(v, params: DensityParams):
    v = np.asarray(v, dtype=float)
    if not params.doppler_gating:
        return np.ones_like(v)
    return np.exp(-(v * v) / (2.0 * params.sigma_v**2))


def detection_weight(det: RadarDetection, params: DensityParams) -> float:
    return float(intensity_weight(det.s, params) * doppler_weight(det.v, params))


def detection_weights(dets: Sequence[RadarDetection], params: DensityParams) -> np.ndarray:
    s = np.array([d.s for d in dets], dtype=float)
    v = np.array([d.v for d in dets], dtype=float)
    return intensity_weight(s, params) * doppler_weight(v, params)


# -- single frame ----------------------------------------------------------------


def splat_frame(dets: Sequence[RadarDetection], spec: GridSpec, params: DensityParams) -> RAGrid:
    """Bilinear soft splatting of weighted detections onto the RA grid."""
    grid = RAGrid.zeros(spec)
    if not dets:
        return grid
    r = np.array([d.r for d in dets])
    th = np.array([d.theta for d in dets])
    w = detection_weights(dets, params)
    inside = (r <= spec.r_max) & (th >= spec.az_min) & (th <= spec.az_max)
    grid.dropped = int((~inside).sum())
    if grid.dropped:
        log.debug("splat_frame: %d detections outside the grid", grid.dropped)
    fi, fj = spec.to_cell(r[inside], th[inside])
    w = w[inside]
    # clamp so the far edge node receives full weight instead of indexing past it
    i0 = np.minimum(np.floor(fi).astype(int), spec.n_range - 2)
    j0 = np.minimum(np.floor(fj).astype(int), spec.n_azimuth - 2)
    a = fi - i0
    b = fj - j0
    for di, wi in ((0, 1.0 - a), (1, a)):
        for dj, wj in ((0, 1.0 - b), (1, b)):
            np.add.at(grid.values, (i0 + di, j0 + dj), w * wi * wj)
    return grid


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    return np.where(out <= -math.pi, out + 2.0 * math.pi, out)


def ego_compensate(
    dets: Sequence[RadarDetection], T_ego: ExtrinsicTransform, h0: float = 0.0
) -> tuple[list[RadarDetection], int]:
    """Move detections of a past frame into the current radar frame.

    ``T_ego`` is the pose of the past frame expressed in the current frame.
    Doppler and intensity are carried unchanged. Returns the compensated
    detections and the number dropped because they landed on the origin.
    """
    if not dets:
        return [], 0
    r = np.array([d.r for d in dets])
    th = np.array([d.theta for d in dets])
    P = np.stack([r * np.cos(th), r * np.sin(th), np.full_like(r, h0)], axis=1)
    Q = T_ego.apply(P)
    r2 = np.hypot(Q[:, 0], Q[:, 1])
    th2 = wrap_angle(np.arctan2(Q[:, 1], Q[:, 0]))
    out = []
    dropped = 0
    for d, rr, tt in zip(dets, r2, th2):
        if rr < 1e-12:
            dropped += 1
            continue
        out.append(replace(d, r=float(rr), theta=float(tt)))
    return out, dropped


# -- window ------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Truncated 1-D Gaussian with half-width ceil(3 sigma), taps summing to 1."""
    half = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with zero padding; self-adjoint because the kernel is symmetric."""
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(values, dtype=float), k, axis=-2, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=-1, mode="constant", cval=0.0)


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense (n, n) operator equal to the zero-padded 1-D blur of ``gaussian_blur``."""
    k = gaussian_kernel(sigma)
    half = len(k) // 2
    M = np.zeros((n, n))
    for off, w in zip(range(-half, half + 1), k):
        M += w * np.eye(n, k=off)
    return M


def decay_weights(n: int, gamma: float) -> np.ndarray:
    """alpha_k = gamma^k / sum_j gamma^j for k = 0..n-1 (k = 0 is the newest frame)."""
    if n < 1:
        raise ValueError("need at least one frame")
    g = gamma ** np.arange(n, dtype=float)
    return g / g.sum()


def _check_specs(frames: Sequence[RAGrid]) -> GridSpec:
    if not frames:
        raise ValueError("need at least one frame")
    spec = frames[0].spec
    for f in frames[1:]:
        if f.spec != spec or f.values.shape != frames[0].values.shape:
            raise ValueError("frames have mismatched grid specs")
    return spec


def accumulate_window(frames: Sequence[RAGrid], params: DensityParams) -> RAGrid:
    """Decay-weighted sum of blurred frames. ``frames`` is oldest first."""
    spec = _check_specs(frames)
    if len(frames) > params.N:
        raise ValueError(f"window holds at most N={params.N} frames")
    alpha = decay_weights(len(frames), params.gamma)
    acc = np.zeros_like(frames[0].values)
    # fixed newest-to-oldest summation order keeps the result reproducible
    for k, f in enumerate(reversed(frames)):
        acc += alpha[k] * gaussian_blur(f.values, params.sigma_g)
    return RAGrid(spec, acc)


def normalize_map(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo + eps)


def persistence_gain(F: np.ndarray, params: DensityParams) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if params.persistence_mode == "log":
        return np.log1p(F)
    return (F / params.N) ** params.kappa


def persistence_combine(
    D_tilde: RAGrid, frames: Sequence[RAGrid], params: DensityParams
) -> tuple[RAGrid, FrequencyMap]:
    """Weight the accumulated map by occupancy persistence and normalize to [0, 1]."""
    spec = _check_specs([D_tilde, *frames])
    counts = np.zeros(D_tilde.values.shape, dtype=np.int64)
    for f in frames:
        counts += f.values > params.epsilon
    D = normalize_map(D_tilde.values * persistence_gain(counts, params))
    return RAGrid(spec, D), FrequencyMap(counts, params.N)


def build_density(
    frames_dets: Sequence[Sequence[RadarDetection]],
    spec: GridSpec,
    params: DensityParams,
    ego_poses: Sequence[ExtrinsicTransform] | None = None,
    h0: float = 0.0,
) -> tuple[RAGrid, FrequencyMap]:
    """Full density for the newest frame from the last ``N`` frames (oldest first).

    ``ego_poses[k]`` is the pose of frame k in the newest frame; omit it for a
    static platform.
    """
    frames_dets = list(frames_dets)[-params.N :]
    if ego_poses is not None:
        ego_poses = list(ego_poses)[-len(frames_dets) :]
    grids = []
    for k, dets in enumerate(frames_dets):
        if ego_poses is not None:
            dets, _ = ego_compensate(dets, ego_poses[k], h0)
        grids.append(splat_frame(dets, spec, params))
    acc = accumulate_window(grids, params)
    return persistence_combine(acc, grids, params)


def group_frames(dets: Sequence[RadarDetection]) -> list[list[RadarDetection]]:
    """Split a flat detection list into frames ordered by frame index."""
    by = {}
    for d in dets:
        by.setdefault(d.frame, []).append(d)
    return [by[k] for k in sorted(by)]
