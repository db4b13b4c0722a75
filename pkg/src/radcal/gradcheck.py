"""Finite-difference checks of the analytic gradients.

Splatting: the tent kernel is piecewise linear, so the loss has kinks where a
projected point crosses an integer pixel line or the visibility apron. A
twist component is excluded from a scene's comparison when any point changes
its integer cell or visibility anywhere on the ``xi +/- h e_i`` stencil. The
reported error of a scene is ``max_i |g_i - fd_i| / max_i |fd_i|`` over the
remaining components.
"""

from __future__ import annotations

from dataclasses import dataclass
import time

import numpy as np

from .crossmodal import RefinerConfig, backward, forward_refine, init_params, surrogate_objective
from .geometry import CameraIntrinsics, ExtrinsicTransform, gated_update, se3_exp
from .harness import RADAR_TO_CAMERA_AXES
from .projection import alignment_loss, alignment_raster, loss_gradient_xi, project_batch, splat_jacobian


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    checks: int
    excluded: int
    seconds: float
    extra: dict

    def line(self) -> str:
        msg = f"{self.name}: max relative error {self.max_rel_err:.3e} over {self.checks} checks"
        if self.excluded:
            msg += f" ({self.excluded} grid-line components excluded)"
        for k, v in self.extra.items():
            msg += f", {k} {v:.3e}" if isinstance(v, float) else f", {k} {v}"
        return msg + f" [{self.seconds:.1f} s]"


def _cells(points, K, T0, xi, rho):
    u, v, _, vis = project_batch(points, K, gated_update(T0, xi, rho))
    return np.where(vis, np.floor(u), -9.0), np.where(vis, np.floor(v), -9.0), vis


def _same_cells(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def random_splat_problem(rng: np.random.Generator, K: CameraIntrinsics | None = None):
    """Planar radar points, features, a base extrinsic, a gated twist and a target raster."""
    K = CameraIntrinsics(125.0, 125.0, 80.0, 60.0, 160, 120) if K is None else K
    n = int(rng.integers(5, 51))
    r = rng.uniform(5.0, 60.0, n)
    th = rng.uniform(-0.5, 0.5, n)
    points = np.stack([r * np.cos(th), r * np.sin(th), np.full(n, -0.5)], axis=1)
    features = rng.uniform(0.2, 1.0, (n, 2))
    T0 = se3_exp(np.r_[rng.normal(0, 0.2, 3), rng.normal(0, 0.05, 3)]) @ ExtrinsicTransform(RADAR_TO_CAMERA_AXES, [0.0, 0.3, 0.0])
    xi = np.r_[rng.normal(0, 0.2, 3), rng.normal(0, 0.1, 3)]
    rho = float(rng.choice([0.25, 0.5, 1.0]))
    target = rng.random((K.height, K.width))
    return points, features, K, T0, xi, rho, target


def splat_loss(points, features, K, T0, xi, rho, target) -> float:
    smap, _ = splat_jacobian(points, features, K, T0, xi, rho)
    A, _ = alignment_raster(smap)
    return alignment_loss(A, target)[0]


def splat_gradient_case(points, features, K, T0, xi, rho, target, step: float = 1e-5):
    """Returns (relative error, number of excluded components)."""
    smap, jac = splat_jacobian(points, features, K, T0, xi, rho)
    A, dA = alignment_raster(smap, jac)
    _, gB = alignment_loss(A, target)
    g = loss_gradient_xi(gB, dA, jac)
    c0 = _cells(points, K, T0, xi, rho)
    fd = np.zeros(6)
    keep = np.zeros(6, dtype=bool)
    for i, e in enumerate(np.eye(6)):
        cp = _cells(points, K, T0, xi + step * e, rho)
        cm = _cells(points, K, T0, xi - step * e, rho)
        keep[i] = _same_cells(cp, c0) and _same_cells(cm, c0)
        fd[i] = (splat_loss(points, features, K, T0, xi + step * e, rho, target) - splat_loss(points, features, K, T0, xi - step * e, rho, target)) / (2 * step)
    scale = float(np.abs(fd).max())
    if not keep.any() or scale == 0.0:
        return 0.0, int((~keep).sum())
    return float(np.abs(g - fd)[keep].max() / scale), int((~keep).sum())


def splat_gradient_suite(n_scenes: int = 100, seed: int = 0, step: float = 1e-5) -> GradcheckReport:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, excluded = 0.0, 0
    for _ in range(n_scenes):
        err, ex = splat_gradient_case(*random_splat_problem(rng), step=step)
        worst = max(worst, err)
        excluded += ex
    return GradcheckReport("splat d(loss)/d(xi)", worst, 6 * n_scenes - excluded, excluded, time.perf_counter() - t, {"scenes": n_scenes})


def crossmodal_objective(out) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Surrogate on (q, t) plus the confidence, so every head output is exercised."""
    val, dq, dt = surrogate_objective(out)
    return val + 0.5 * out.rho, dq, dt, 0.5


def crossmodal_gradient_case(d: int, layers: int, rng: np.random.Generator, step: float = 1e-4, probes: int = 3, floor: float = 1e-6):
    """Directional checks on every parameter tensor; returns (max rel err, checks, max row-sum deviation)."""
    cfg = RefinerConfig(d=d, layers=layers, patch=4, image_shape=(8, 12), radar_shape=(12, 8))
    p = init_params(cfg, rng)
    image = rng.random(cfg.image_shape)
    radar = rng.random(cfg.radar_shape)

    def f(params):
        out, _ = forward_refine(image, radar, params, cfg)
        return crossmodal_objective(out)[0]

    out, cache = forward_refine(image, radar, p, cfg)
    _, dq, dt, drho = crossmodal_objective(out)
    g = backward(cache, p, dq, dt, drho)
    rowdev = max(float(np.abs(A.sum(axis=1) - 1.0).max()) for l in range(layers) for A in cache.attention(l).values())
    worst, checks = 0.0, 0
    for k in sorted(p):
        for _ in range(probes):
            D = rng.normal(size=p[k].shape)
            fd = (f({**p, k: p[k] + step * D}) - f({**p, k: p[k] - step * D})) / (2 * step)
            an = float((g[k] * D).sum())
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
            checks += 1
    return worst, checks, rowdev


def crossmodal_gradient_suite(dims=(16, 32), layer_counts=(1, 2), seed: int = 0, step: float = 1e-4) -> GradcheckReport:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, checks, rowdev = 0.0, 0, 0.0
    for d in dims:
        for L in layer_counts:
            e, c, r = crossmodal_gradient_case(d, L, rng, step)
            worst, checks, rowdev = max(worst, e), checks + c, max(rowdev, r)
    return GradcheckReport("cross-modal parameters", worst, checks, 0, time.perf_counter() - t, {"attention row-sum deviation": rowdev})
