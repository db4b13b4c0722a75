"""Synthetic miscalibration experiments.

A scene holds static reflectors (low Doppler, persistent) and intermittent
fast-moving clutter observed over a short window of radar frames, plus an
occupancy raster rendered from the reflectors under the true extrinsic. That
raster stands in for image evidence: refinement maximizes the normalized
cross-correlation between the splatted radar map and the raster, so it is a
surrogate for a detection loss and not a trained detector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
import logging
import math
from typing import Sequence

import numpy as np

from .geometry import (
    CameraIntrinsics,
    ExtrinsicTransform,
    pose_errors,
    se3_exp,
    se3_log,
)
from .projection import (
    MapSpec,
    alignment_loss,
    alignment_raster,
    lift_detections,
    point_twist_jacobians,
    project_batch,
    splat_image_plane,
    splat_jacobian,
)
from .radar_density import (
    DensityParams,
    RadarDetection,
    detection_weights,
    ego_compensate,
    blur_matrix,
    fit_intensity_stats,
)

log = logging.getLogger(__name__)

AXES = ("tx", "ty", "tz", "rx", "ry", "rz")
R1 = (10.0, 0.25)  # degrees, meters
R2 = (20.0, 1.5)

# radar x forward / y left / z up  ->  camera x right / y down / z forward
RADAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class SceneSpec:
    image_width: int = 640
    image_height: int = 480
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    stride: int = 4
    r_min: float = 5.0
    r_max: float = 100.0
    sector_deg: float = 60.0
    reflector_count: int = 30
    clutter_count: int = 30
    frames: int = 5
    dropout: float = 0.3
    jitter: float = 0.3
    clutter_jitter: float = 0.5
    h0: float = -0.5
    reflector_doppler_max: float = 0.5
    clutter_doppler_span: float = 6.0
    reflector_log_power: tuple[float, float] = (5.0, 6.0)
    clutter_log_power: tuple[float, float] = (2.0, 6.0)
    mount_translation: tuple[float, float, float] = (0.1, 0.6, -0.2)
    mount_rotation_deg: float = 2.0
    ego_step: float = 0.0  # forward motion per frame, meters
    ego_yaw_step_deg: float = 0.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height)

    def map_spec(self) -> MapSpec:
        return MapSpec(self.intrinsics(), self.stride)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    T_true: ExtrinsicTransform
    reflectors: np.ndarray  # (n, 4): x, y, intensity, doppler in the current radar frame
    clutter: np.ndarray  # (m, 4)
    frames: list  # list of list[RadarDetection], oldest first, each in its own radar frame
    ego_poses: list  # pose of frame k in the newest frame
    target_raster: np.ndarray
    density: DensityParams
    seed: int = 0

    @property
    def map_spec(self) -> MapSpec:
        return self.spec.map_spec()

    def window_detections(self) -> list[RadarDetection]:
        """All window detections expressed in the newest radar frame."""
        out = []
        for dets, pose in zip(self.frames, self.ego_poses):
            comp, _ = ego_compensate(dets, pose, self.spec.h0)
            out.extend(comp)
        return out


def render_occupancy(points: np.ndarray, ms: MapSpec, T: ExtrinsicTransform) -> np.ndarray:
    """Soft occupancy: summed unit-mass bilinear footprints of the visible points."""
    K = ms.K
    u, v, _, vis = project_batch(points, K, T, ms.z_min)
    return splat_image_plane(u, v, vis, np.ones((len(points), 1)), K.width, K.height).mass


def _polar(x, y):
    return float(math.hypot(x, y)), float(math.atan2(y, x))


def generate_scene(spec: SceneSpec, seed: int, density: DensityParams | None = None) -> SyntheticScene:
    if spec.reflector_count < 1 or spec.frames < 1:
        raise ValueError("need at least one reflector and one frame")
    rng = np.random.default_rng(seed)
    density = DensityParams(N=spec.frames) if density is None else replace(density, N=spec.frames)
    ms = spec.map_spec()
    K = ms.K

    mount = se3_exp(np.r_[np.zeros(3), np.radians(spec.mount_rotation_deg) * rng.uniform(-1, 1, 3)])
    T_true = ExtrinsicTransform(mount.rotation @ RADAR_TO_CAMERA_AXES, spec.mount_translation)

    half = math.radians(spec.sector_deg) / 2.0
    refl = []
    while len(refl) < spec.reflector_count:
        r = rng.uniform(spec.r_min, spec.r_max)
        th = rng.uniform(-half, half)
        p = np.array([[r * math.cos(th), r * math.sin(th), spec.h0]])
        u, v, _, vis = project_batch(p, K, T_true, ms.z_min)
        if not (vis[0] and 0 <= u[0] <= K.width - 1 and 0 <= v[0] <= K.height - 1):
            continue
        s = math.expm1(rng.uniform(*spec.reflector_log_power))
        vd = rng.uniform(-spec.reflector_doppler_max, spec.reflector_doppler_max)
        refl.append((p[0, 0], p[0, 1], s, vd))
    reflectors = np.array(refl)

    clut = []
    vmin = 3.0 * density.sigma_v
    for _ in range(spec.clutter_count):
        r = rng.uniform(spec.r_min, spec.r_max)
        th = rng.uniform(-half, half)
        s = math.expm1(rng.uniform(*spec.clutter_log_power))
        vd = rng.choice([-1.0, 1.0]) * (vmin + rng.uniform(0.0, spec.clutter_doppler_span))
        clut.append((r * math.cos(th), r * math.sin(th), s, vd))
    clutter = np.array(clut).reshape(-1, 4)

    # clutter is intermittent: present in fewer than half of the frames
    max_frames = max(1, math.ceil(spec.frames / 2) - 1)
    clutter_frames = [set(rng.choice(spec.frames, size=rng.integers(1, max_frames + 1), replace=False)) for _ in clutter]

    # pose of frame k expressed in the newest frame (platform moving forward)
    ego_poses = []
    for k in range(spec.frames):
        lag = spec.frames - 1 - k
        yaw = -math.radians(spec.ego_yaw_step_deg) * lag
        ego_poses.append(se3_exp(np.r_[-spec.ego_step * lag, 0.0, 0.0, 0.0, 0.0, yaw]))

    frames = []
    for k in range(spec.frames):
        to_frame = ego_poses[k].inverse()
        dets = []
        for x, y, s, vd in reflectors:
            if rng.random() < spec.dropout:
                continue
            jx, jy = rng.normal(0.0, spec.jitter, 2)
            q = to_frame.apply([x + jx, y + jy, spec.h0])
            r, th = _polar(q[0], q[1])
            dets.append(RadarDetection(r, th, float(vd), float(s), k))
        for (x, y, s, vd), fr in zip(clutter, clutter_frames):
            if k not in fr:
                continue
            jx, jy = rng.normal(0.0, spec.clutter_jitter, 2)
            q = to_frame.apply([x + jx, y + jy, spec.h0])
            r, th = _polar(q[0], q[1])
            dets.append(RadarDetection(r, th, float(vd), float(s), k))
        frames.append(dets)

    mu, sd = fit_intensity_stats([d for f in frames for d in f])
    density = replace(density, mu_s=mu, sigma_s=sd)
    pts = np.column_stack([reflectors[:, :2], np.full(len(reflectors), spec.h0)])
    target = render_occupancy(pts, ms, T_true)
    return SyntheticScene(spec, T_true, reflectors, clutter, frames, ego_poses, target, density, seed)


# -- miscalibration ------------------------------------------------------------------


def axis_twist(axis: str, magnitude: float) -> np.ndarray:
    """Single-axis twist; rotation magnitudes in degrees, translations in meters."""
    xi = np.zeros(6)
    i = AXES.index(axis)
    xi[i] = math.radians(magnitude) if axis.startswith("r") else magnitude
    return xi


def inject_miscalibration(T0: ExtrinsicTransform, delta_xi) -> ExtrinsicTransform:
    return se3_exp(delta_xi) @ T0


def sample_box(rng: np.random.Generator, box=R1, axis: str | None = None) -> np.ndarray:
    """Uniform perturbation inside a (degrees, meters) box; one axis or all six."""
    deg, m = box
    lim = np.r_[np.full(3, m), np.full(3, math.radians(deg))]
    xi = rng.uniform(-lim, lim)
    if axis is not None:
        keep = np.zeros(6, dtype=bool)
        keep[AXES.index(axis)] = True
        xi[~keep] = 0.0
    return xi


# -- descent -------------------------------------------------------------------------


@dataclass(frozen=True)
class DescentOptions:
    max_iters: int = 500
    grad_tol: float = 1e-8
    blur_schedule: tuple[float, ...] = (16.0, 8.0, 4.0, 2.0, 1.0)
    step: float = 1e-3
    min_step: float = 1e-10
    rel_tol: float = 1e-10
    precondition: bool = True
    damping: float = 1e-3
    prior_weight: float = 0.0
    raster_mode: str = "mass"


@dataclass
class DescentResult:
    T: ExtrinsicTransform
    xi: np.ndarray
    trace: list  # (stage, loss) for the initial point and every accepted step
    iterations: int
    converged: bool
    message: str = ""


class _Problem:
    """Alignment objective of ``exp(xi) @ T_init`` at one blur level."""

    def __init__(self, points, features, ms: MapSpec, T_init, target, sigma, opts: DescentOptions):
        self.points, self.features, self.ms, self.T_init = points, features, ms, T_init
        self.K = ms.K
        self.sigma = sigma
        if sigma > 0:
            self._bh = blur_matrix(self.K.height, sigma)
            self._bw = blur_matrix(self.K.width, sigma)
        self.target = self._blur(np.asarray(target, dtype=float))
        self.opts = opts

    def _blur(self, a):
        # same operator as gaussian_blur, as two small matrix products
        return self._bh @ a @ self._bw if self.sigma > 0 else a

    def value(self, xi) -> float:
        T = se3_exp(xi) @ self.T_init
        u, v, _, vis = project_batch(self.points, self.K, T, self.ms.z_min)
        smap = splat_image_plane(u, v, vis, self.features, self.K.width, self.K.height)
        A, _ = alignment_raster(smap, mode=self.opts.raster_mode)
        L, _ = alignment_loss(self._blur(A), self.target)
        return L + self.opts.prior_weight * float(xi @ xi)

    def value_grad(self, xi):
        smap, jac = splat_jacobian(self.points, self.features, self.K, self.T_init, xi, 1.0, self.ms.z_min)
        A, dA = alignment_raster(smap, jac, mode=self.opts.raster_mode)
        L, gB = alignment_loss(self._blur(A), self.target)
        gA = self._blur(gB)
        g = gA.reshape(-1)[jac.pixels] @ dA if len(jac.pixels) else np.zeros(6)
        w = self.opts.prior_weight
        return L + w * float(xi @ xi), g + 2.0 * w * xi

    def metric(self, xi) -> np.ndarray:
        """Weighted Gram matrix of the per-point pixel Jacobians (pixels^2 per unit^2)."""
        u, v, z, J = point_twist_jacobians(self.points, self.K, self.T_init, xi, 1.0)
        with np.errstate(invalid="ignore"):
            vis = (z > self.ms.z_min) & (u >= -1) & (u <= self.K.width) & (v >= -1) & (v <= self.K.height)
        w = self.features[vis, 0]
        Jv = J[vis]
        if w.sum() <= 0:
            return np.eye(6)
        return np.einsum("k,kai,kaj->ij", w, Jv, Jv) / w.sum()


def visible_count(points, ms: MapSpec, T: ExtrinsicTransform) -> int:
    return int(project_batch(points, ms.K, T, ms.z_min)[3].sum())


def refine_descent(
    points: np.ndarray,
    features: np.ndarray,
    ms: MapSpec,
    target: np.ndarray,
    T_init: ExtrinsicTransform,
    opts: DescentOptions = DescentOptions(),
) -> DescentResult:
    """First-order descent on ``xi`` for ``T = exp(xi) @ T_init``.

    Coarse-to-fine over ``opts.blur_schedule``: the splatted raster and the
    target are blurred alike at each level. The gradient is preconditioned by
    the inverse of the damped pixel-Jacobian Gram matrix, fixed per level,
    which only rescales the geometry; no second derivatives of the loss are
    used. Steps that fail to decrease the objective are halved until they
    succeed or fall below ``min_step``; accepted steps double the step.
    """
    xi = np.zeros(6)
    if visible_count(points, ms, T_init) == 0:
        return DescentResult(T_init, xi, [], 0, False, "no visible detections at initialization")
    trace = []
    it = 0
    converged = False
    for stage, sigma in enumerate(opts.blur_schedule):
        prob = _Problem(points, features, ms, T_init, target, sigma, opts)
        if opts.precondition:
            M = prob.metric(xi)
            P = np.linalg.inv(M + opts.damping * np.trace(M) / 6.0 * np.eye(6))
        else:
            P = np.eye(6)
        f, g = prob.value_grad(xi)
        trace.append((stage, f))
        step = opts.step
        converged = False
        while it < opts.max_iters:
            if float(np.linalg.norm(g)) < opts.grad_tol:
                converged = True
                break
            d = -(P @ g)
            accepted = False
            while step >= opts.min_step:
                cand = xi + step * d
                fc = prob.value(cand)
                if fc < f:
                    accepted = True
                    break
                step *= 0.5
            it += 1
            if not accepted:
                converged = True  # no decrease at the smallest step
                break
            improvement = f - fc
            xi = cand
            f, g = prob.value_grad(xi)
            trace.append((stage, f))
            step *= 2.0
            if improvement <= opts.rel_tol * max(1.0, abs(f)):
                converged = True
                break
    return DescentResult(se3_exp(xi) @ T_init, xi, trace, it, converged, "")


def scene_points_features(scene: SyntheticScene, gating: bool = True):
    """Lifted window detections and their single-channel alignment weights."""
    dets = scene.window_detections()
    params = replace(scene.density, doppler_gating=gating)
    pts = lift_detections(dets, scene.spec.h0)
    w = detection_weights(dets, params) if dets else np.zeros(0)
    return pts, w[:, None]


def refine_scene(scene: SyntheticScene, T_perturbed: ExtrinsicTransform, opts: DescentOptions = DescentOptions(), gating: bool = True) -> DescentResult:
    pts, feats = scene_points_features(scene, gating)
    keep = feats[:, 0] > 0
    return refine_descent(pts[keep], feats[keep], scene.map_spec, scene.target_raster, T_perturbed, opts)


# -- evaluation ----------------------------------------------------------------------


def evaluate(T_refined: ExtrinsicTransform, T_true: ExtrinsicTransform, T_perturbed: ExtrinsicTransform) -> dict:
    rb, tb = pose_errors(T_perturbed, T_true)
    ra, ta = pose_errors(T_refined, T_true)
    residual = se3_log(T_refined @ T_true.inverse())

    def reduction(before, after):
        return 0.0 if before == 0 else 1.0 - after / before

    return {
        "rot_before_deg": rb,
        "rot_after_deg": ra,
        "trans_before_m": tb,
        "trans_after_m": ta,
        "rot_reduction": reduction(rb, ra),
        "trans_reduction": reduction(tb, ta),
        "residual": dict(zip(AXES, residual.tolist())),
    }


def error_histogram(values: Sequence[float], bins) -> tuple[np.ndarray, np.ndarray]:
    return np.histogram(np.asarray(values, dtype=float), bins=bins)


def conditioning_report(scene: SyntheticScene, box=R1) -> dict:
    """Singular values of the stacked pixel Jacobians of the reflectors at T_true.

    Columns are scaled to pixels per box half-width (degrees, meters), so
    rotation and translation compare on the injection scale. The right
    singular vector of the smallest singular value names the least
    observable combination.
    """
    pts = np.column_stack([scene.reflectors[:, :2], np.full(len(scene.reflectors), scene.spec.h0)])
    _, _, _, J = point_twist_jacobians(pts, scene.map_spec.K, scene.T_true, np.zeros(6), 1.0)
    scale = np.r_[np.full(3, box[1]), np.full(3, math.radians(box[0]))]
    A = J.reshape(-1, 6) * scale
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    weakest = vt[-1]
    return {
        "singular_values": s.tolist(),
        "column_norms": dict(zip(AXES, np.linalg.norm(A, axis=0).tolist())),
        "weakest_direction": dict(zip(AXES, weakest.tolist())),
        "weakest_axis": AXES[int(np.argmax(np.abs(weakest)))],
    }


# -- sweeps --------------------------------------------------------------------------

SWEEP_HEADER = (
    "axis",
    "magnitude",
    "direction_id",
    "seed",
    "rot_before_deg",
    "rot_after_deg",
    "trans_before_cm",
    "trans_after_cm",
    "iters",
    "converged",
)
MIXED_AXIS = "mixed"
MIXED_RANDOM_DIRECTIONS = 8


@dataclass(frozen=True)
class SweepConfig:
    """Axis-wise injection sweep.

    For a single axis, ``magnitude`` is in degrees (r*) or meters (t*) and
    direction ``j`` uses sign ``(-1)**j``. For the ``mixed`` axis,
    ``magnitude`` is a fraction of ``box`` and the directions are the 6
    axis-aligned unit vectors followed by 8 random unit 6-vectors, each
    component scaled by the box half-width.
    """

    axes: tuple[str, ...] = ("ry", "rx", "tx")
    magnitudes: tuple[float, ...] = (2.0, 5.0, 10.0)
    directions: int = 2
    seeds: tuple[int, ...] = (0, 1, 2)
    box: tuple[float, float] = R1
    scene: SceneSpec = SceneSpec()
    descent: DescentOptions = DescentOptions()
    gating: bool = True

    def __post_init__(self):
        for a in self.axes:
            if a not in AXES and a != MIXED_AXIS:
                raise ValueError(f"unknown axis {a!r}")
        if self.directions < 1:
            raise ValueError("need at least one direction per magnitude")


@dataclass
class SweepRecord:
    axis: str
    magnitude: float
    direction_id: int
    seed: int
    delta_xi: list
    rot_before_deg: float
    rot_after_deg: float
    trans_before_m: float
    trans_after_m: float
    iters: int
    converged: bool
    trace: list
    message: str = ""

    def csv_row(self) -> list:
        return [
            self.axis,
            repr(float(self.magnitude)),
            self.direction_id,
            self.seed,
            f"{self.rot_before_deg:.9f}",
            f"{self.rot_after_deg:.9f}",
            f"{100.0 * self.trans_before_m:.9f}",
            f"{100.0 * self.trans_after_m:.9f}",
            self.iters,
            int(self.converged),
        ]


@dataclass
class SweepResult:
    axis: str
    magnitudes: list
    records: list  # SweepRecord, ordered by (magnitude, direction, seed)

    def summary(self) -> list[dict]:
        """Mean and standard deviation of the after-errors per magnitude."""
        rows = []
        for m in self.magnitudes:
            recs = [r for r in self.records if r.magnitude == m]
            rot = np.array([r.rot_after_deg for r in recs])
            tr = 100.0 * np.array([r.trans_after_m for r in recs])
            rows.append(
                {
                    "axis": self.axis,
                    "magnitude": m,
                    "runs": len(recs),
                    "rot_mean_deg": float(rot.mean()),
                    "rot_std_deg": float(rot.std()),
                    "trans_mean_cm": float(tr.mean()),
                    "trans_std_cm": float(tr.std()),
                    "nonconverged": sum(not r.converged for r in recs),
                }
            )
        return rows


def sweep_direction(axis: str, magnitude: float, direction_id: int, box=R1, seed: int = 0) -> np.ndarray:
    if axis != MIXED_AXIS:
        return axis_twist(axis, magnitude * (-1.0) ** direction_id)
    deg, m = box
    lim = np.r_[np.full(3, m), np.full(3, math.radians(deg))]
    if direction_id < 6:
        u = np.zeros(6)
        u[direction_id] = 1.0
    else:
        rng = np.random.default_rng([seed, direction_id])
        u = rng.normal(size=6)
        u /= np.linalg.norm(u)
    return magnitude * u * lim


def _sweep_point(cfg: SweepConfig, axis: str, magnitude: float, direction_id: int, seed: int) -> SweepRecord:
    scene = generate_scene(cfg.scene, seed)
    dxi = sweep_direction(axis, magnitude, direction_id, cfg.box, seed)
    T_p = inject_miscalibration(scene.T_true, dxi)
    res = refine_scene(scene, T_p, cfg.descent, cfg.gating)
    ev = evaluate(res.T, scene.T_true, T_p)
    if not res.converged:
        log.info("sweep point %s %g dir %d seed %d did not converge: %s", axis, magnitude, direction_id, seed, res.message)
    return SweepRecord(
        axis,
        magnitude,
        direction_id,
        seed,
        dxi.tolist(),
        ev["rot_before_deg"],
        ev["rot_after_deg"],
        ev["trans_before_m"],
        ev["trans_after_m"],
        res.iterations,
        res.converged,
        [[s, float(f)] for s, f in res.trace],
        res.message,
    )


def _sweep_points(cfg: SweepConfig):
    for axis in cfg.axes:
        n_dir = 6 + MIXED_RANDOM_DIRECTIONS if axis == MIXED_AXIS else cfg.directions
        for m in cfg.magnitudes:
            for d in range(n_dir):
                for s in cfg.seeds:
                    yield axis, m, d, s


def run_sweep(cfg: SweepConfig, workers: int = 1) -> list[SweepResult]:
    """Inject, refine and evaluate every (axis, magnitude, direction, seed).

    Points are independent; with ``workers > 1`` they run in a process pool
    and are merged back in the fixed enumeration order.
    """
    points = list(_sweep_points(cfg))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_sweep_point, [cfg] * len(points), *zip(*points)))
    else:
        records = [_sweep_point(cfg, *p) for p in points]
    return [SweepResult(a, list(cfg.magnitudes), [r for r in records if r.axis == a]) for a in cfg.axes]


def sweep_rows(results: Sequence[SweepResult]) -> list[list]:
    return [r.csv_row() for res in results for r in res.records]


def sweep_json(results: Sequence[SweepResult]) -> dict:
    return {
        "objective": "normalized cross-correlation surrogate against a rendered occupancy raster",
        "header": list(SWEEP_HEADER),
        "results": [
            {"axis": res.axis, "magnitudes": res.magnitudes, "summary": res.summary(), "records": [asdict(r) for r in res.records]}
            for res in results
        ],
    }


def summary_table(results: Sequence[SweepResult]) -> str:
    lines = [f"{'axis':>5} {'mag':>7} {'runs':>4} {'rot (deg)':>18} {'trans (cm)':>18} {'nonconv':>7}"]
    for res in results:
        for row in res.summary():
            lines.append(
                f"{row['axis']:>5} {row['magnitude']:>7g} {row['runs']:>4d} "
                f"{row['rot_mean_deg']:>8.3f} ± {row['rot_std_deg']:<7.3f} "
                f"{row['trans_mean_cm']:>8.2f} ± {row['trans_std_cm']:<7.2f} {row['nonconverged']:>7d}"
            )
    return "\n".join(lines)
