"""Auxiliary refinement losses with exact (sub)gradients.

Non-differentiable points of ``|x|`` and of the L1 norm take subgradient 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1e-2
    gamma_w: float = 1e-2
    eta: float = 1e-3
    lambda_R: float = 1.0
    lambda_t: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_w", "eta", "lambda_R", "lambda_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def calib_loss(q_hat, t_hat, q_ref, t_ref, lambda_R: float = 1.0, lambda_t: float = 1.0):
    """Quaternion and L1 translation loss.

    Returns ``(total, parts, grads)`` where ``parts = {"rot": L_R, "trans": L_t}``
    and ``grads`` holds partials w.r.t. ``q_hat`` and ``t_hat``.
    """
    q_hat = np.asarray(q_hat, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    dt = np.asarray(t_hat, dtype=float) - np.asarray(t_ref, dtype=float)
    dot = float(q_hat @ q_ref)
    L_R = 1.0 - abs(dot)
    L_t = float(np.abs(dt).sum())
    total = lambda_R * L_R + lambda_t * L_t
    grads = {"q_hat": -lambda_R * np.sign(dot) * q_ref, "t_hat": lambda_t * np.sign(dt)}
    return total, {"rot": L_R, "trans": L_t}, grads


def regularizers(xi_t, rho_t: float, xi_prev=None, rho_prev: float | None = None):
    """Small-update prior and temporal smoothness on the gated twist.

    Returns ``(L_prior, L_smooth, grads)`` with partials w.r.t. ``xi_t`` and
    ``rho_t``. Without a previous frame the smoothness term is 0.
    """
    xi_t = np.asarray(xi_t, dtype=float)
    u = rho_t * xi_t
    L_prior = float(u @ u)
    d_u = 2.0 * u
    L_smooth = 0.0
    if xi_prev is not None and rho_prev is not None:
        diff = u - rho_prev * np.asarray(xi_prev, dtype=float)
        L_smooth = float(np.abs(diff).sum())
        d_smooth = np.sign(diff)
    else:
        d_smooth = np.zeros_like(u)
    grads = {
        "prior": {"xi_t": rho_t * d_u, "rho_t": float(xi_t @ d_u)},
        "smooth": {"xi_t": rho_t * d_smooth, "rho_t": float(xi_t @ d_smooth)},
    }
    return L_prior, L_smooth, grads


@dataclass
class AttentionSnapshot:
    """Per-query attention over image tokens and over radar tokens."""

    image: dict = field(default_factory=dict)
    radar: dict = field(default_factory=dict)

    def validate(self, tol: float = 1e-6) -> None:
        for table in (self.image, self.radar):
            for key, a in table.items():
                a = np.asarray(a)
                if (a < 0).any() or abs(a.sum() - 1.0) > tol:
                    raise ValueError(f"attention for query {key!r} is not a distribution")


def qattn_consistency(snap_t: AttentionSnapshot, snap_prev: AttentionSnapshot, matching: Sequence[tuple]):
    """Summed L1 change of matched queries' attention between frames.

    ``matching`` holds ``(query_t, query_prev)`` pairs; pairs missing from
    either snapshot contribute nothing. Returns ``(value, grads)`` with grads
    keyed ``("image"|"radar", query_t)`` for the current snapshot.
    """
    total = 0.0
    grads = {}
    for m_t, m_p in matching:
        for kind in ("image", "radar"):
            cur = getattr(snap_t, kind)
            prev = getattr(snap_prev, kind)
            if m_t not in cur or m_p not in prev:
                continue
            a = np.asarray(cur[m_t], dtype=float)
            b = np.asarray(prev[m_p], dtype=float)
            if a.shape != b.shape:
                raise ValueError(f"attention shapes differ for matched pair ({m_t!r}, {m_p!r})")
            diff = a - b
            total += float(np.abs(diff).sum())
            key = (kind, m_t)
            grads[key] = grads.get(key, 0.0) + np.sign(diff)
    return total, grads


def total_aux_loss(components: dict, weights: LossWeights, grads: dict | None = None):
    """Weighted sum of ``calib``, ``prior``, ``smooth`` and ``q_attn`` terms.

    Missing components count as zero. When ``alpha == 0`` the calibration term
    is left out entirely, so an unavailable reference may be passed as None.
    ``grads`` optionally maps each component to a gradient (array or dict of
    arrays); the weighted sum of those is returned alongside the value.
    """
    coeff = {"calib": weights.alpha, "prior": weights.beta, "smooth": weights.gamma_w, "q_attn": weights.eta}
    value = 0.0
    total_grad = {}
    for name, w in coeff.items():
        if w == 0.0 or components.get(name) is None:
            continue
        value += w * float(components[name])
        if grads and name in grads:
            g = grads[name]
            items = g.items() if isinstance(g, dict) else [("x", g)]
            for k, arr in items:
                total_grad[k] = total_grad.get(k, 0.0) + w * np.asarray(arr, dtype=float)
    return value, total_grad
