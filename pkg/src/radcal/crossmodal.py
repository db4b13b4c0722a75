"""Toy-scale bi-directional cross-attention refinement network in NumPy.

Both maps are cut into non-overlapping patches, embedded linearly and offset
by fixed 2-D sinusoidal encodings. Each layer runs radar-to-image and
image-to-radar single-head attention on the same layer input, then adds
``MLP(LN(Z))`` to the stream. The mean of all tokens feeds a linear head that
emits a quaternion, a translation and a confidence logit.

Every forward pass keeps a cache; ``backward`` returns gradients for every
parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import math
import struct
from pathlib import Path

import numpy as np

from .geometry import ExtrinsicTransform, gated_update, se3_from_quat_trans, se3_log

LN_EPS = 1e-5
HEAD_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)

DIRECTIONS = ("r2i", "i2r")


# -- tokens -------------------------------------------------------------------


@dataclass
class TokenSet:
    tokens: np.ndarray  # (n, d), positional encoding included
    positional: np.ndarray  # (n, d)
    grid_shape: tuple[int, int]
    padded: bool = False


def sinusoidal_2d(rows: int, cols: int, d: int) -> np.ndarray:
    """Fixed 2-D encoding laid out as [row sin | row cos | col sin | col cos]."""
    if d % 4:
        raise ValueError(f"d={d} must be a multiple of 4")
    nb = d // 4
    freqs = 1.0 / 10000.0 ** (np.arange(nb) / nb)
    r = np.repeat(np.arange(rows), cols)[:, None] * freqs
    c = np.tile(np.arange(cols), rows)[:, None] * freqs
    return np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)


def patchify(image: np.ndarray, patch: int) -> tuple[np.ndarray, tuple[int, int], bool]:
    """Row-major non-overlapping patches, zero-padding ragged edges."""
    m = np.asarray(image, dtype=float)
    H, W = m.shape
    rows, cols = -(-H // patch), -(-W // patch)
    padded = rows * patch != H or cols * patch != W
    if padded:
        m = np.pad(m, ((0, rows * patch - H), (0, cols * patch - W)))
    p = m.reshape(rows, patch, cols, patch).transpose(0, 2, 1, 3).reshape(rows * cols, patch * patch)
    return p, (rows, cols), padded


def tokenize(image: np.ndarray, patch: int, d: int, W: np.ndarray, b: np.ndarray) -> TokenSet:
    p, grid, padded = patchify(image, patch)
    pe = sinusoidal_2d(grid[0], grid[1], d)
    return TokenSet(p @ W + b + pe, pe, grid, padded)


# -- parameters -----------------------------------------------------------------


@dataclass
class RefinerConfig:
    d: int = 16
    layers: int = 1
    patch: int = 4
    image_shape: tuple[int, int] = (8, 8)
    radar_shape: tuple[int, int] = (8, 8)

    def n_tokens(self, shape) -> int:
        return (-(-shape[0] // self.patch)) * (-(-shape[1] // self.patch))


def init_params(cfg: RefinerConfig, rng: np.random.Generator | None = None, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Random parameters; ``scale=0`` gives the zero configuration.

    The head bias is always ``(1, 0, 0, 0, 0, 0, 0, 0)`` so that a zero network
    predicts the identity rotation with confidence 0.5.
    """
    if cfg.d % 4:
        raise ValueError(f"d={cfg.d} must be a multiple of 4")
    rng = np.random.default_rng(0) if rng is None else rng
    d, pp = cfg.d, cfg.patch * cfg.patch
    nI = cfg.n_tokens(cfg.image_shape)
    nR = cfg.n_tokens(cfg.radar_shape)

    def w(*shape, fan_in=None):
        fan = shape[0] if fan_in is None else fan_in
        return scale * rng.normal(0.0, 1.0 / math.sqrt(fan), shape)

    p = {
        "img_embed.W": w(pp, d),
        "img_embed.b": scale * 0.1 * rng.normal(size=d),
        "rad_embed.W": w(pp, d),
        "rad_embed.b": scale * 0.1 * rng.normal(size=d),
    }
    for l in range(cfg.layers):
        for dirn, (nq, nk) in zip(DIRECTIONS, ((nR, nI), (nI, nR))):
            pre = f"layer{l}.{dirn}."
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + name] = w(d, d)
            p[pre + "B"] = scale * 0.1 * rng.normal(size=(nq, nk))
            p[pre + "ln.g"] = 1.0 + scale * 0.1 * rng.normal(size=d)
            p[pre + "ln.b"] = scale * 0.1 * rng.normal(size=d)
            p[pre + "mlp.W1"] = w(d, 4 * d)
            p[pre + "mlp.b1"] = scale * 0.1 * rng.normal(size=4 * d)
            p[pre + "mlp.W2"] = w(4 * d, d)
            p[pre + "mlp.b2"] = scale * 0.1 * rng.normal(size=d)
    p["head.W"] = w(d, 8)
    p["head.b"] = np.array([1.0, 0, 0, 0, 0, 0, 0, 0]) + scale * 0.1 * rng.normal(size=8)
    if scale == 0.0:
        for k in p:
            if k.endswith("ln.g"):
                p[k] = np.ones(d)
    return p


# -- building blocks --------------------------------------------------------------


def gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t)


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    sd = np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xh = xc / sd
    return xh * g + b, (xh, sd)


def layer_norm_backward(dy, g, cache):
    xh, sd = cache
    dg = (dy * xh).sum(axis=0)
    db = dy.sum(axis=0)
    dxh = dy * g
    dx = (dxh - dxh.mean(axis=1, keepdims=True) - xh * (dxh * xh).mean(axis=1, keepdims=True)) / sd
    return dx, dg, db


def _attend(Xq, Xkv, p, pre, d):
    Q = Xq @ p[pre + "Wq"]
    Kk = Xkv @ p[pre + "Wk"]
    V = Xkv @ p[pre + "Wv"]
    A = softmax_rows(Q @ Kk.T / math.sqrt(d) + p[pre + "B"])
    AV = A @ V
    Z = AV @ p[pre + "Wo"]
    Y, ln_cache = layer_norm(Z, p[pre + "ln.g"], p[pre + "ln.b"])
    H1 = Y @ p[pre + "mlp.W1"] + p[pre + "mlp.b1"]
    G = gelu(H1)
    M = G @ p[pre + "mlp.W2"] + p[pre + "mlp.b2"]
    cache = dict(Xq=Xq, Xkv=Xkv, Q=Q, K=Kk, V=V, A=A, AV=AV, Y=Y, ln=ln_cache, H1=H1, G=G)
    return Xq + M, cache


def _attend_backward(dOut, c, p, pre, d, grads):
    """Returns (dXq, dXkv) and accumulates parameter gradients."""
    dM = dOut
    grads[pre + "mlp.W2"] += c["G"].T @ dM
    grads[pre + "mlp.b2"] += dM.sum(axis=0)
    dH1 = (dM @ p[pre + "mlp.W2"].T) * gelu_grad(c["H1"])
    grads[pre + "mlp.W1"] += c["Y"].T @ dH1
    grads[pre + "mlp.b1"] += dH1.sum(axis=0)
    dY = dH1 @ p[pre + "mlp.W1"].T
    dZ, dg, db = layer_norm_backward(dY, p[pre + "ln.g"], c["ln"])
    grads[pre + "ln.g"] += dg
    grads[pre + "ln.b"] += db
    grads[pre + "Wo"] += c["AV"].T @ dZ
    dAV = dZ @ p[pre + "Wo"].T
    A = c["A"]
    dA = dAV @ c["V"].T
    dV = A.T @ dAV
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
    grads[pre + "B"] += dS
    dQ = dS @ c["K"] / math.sqrt(d)
    dK = dS.T @ c["Q"] / math.sqrt(d)
    grads[pre + "Wq"] += c["Xq"].T @ dQ
    grads[pre + "Wk"] += c["Xkv"].T @ dK
    grads[pre + "Wv"] += c["Xkv"].T @ dV
    dXq = dOut + dQ @ p[pre + "Wq"].T
    dXkv = dK @ p[pre + "Wk"].T + dV @ p[pre + "Wv"].T
    return dXq, dXkv


def cross_attention_layer(radar: np.ndarray, image: np.ndarray, p: dict, layer: int = 0):
    """One bi-directional layer; both directions read the same inputs.

    Returns ``(radar_out, image_out, caches)``.
    """
    d = radar.shape[1]
    if image.shape[1] != d:
        raise ValueError("radar and image tokens must share d")
    r_out, c_r = _attend(radar, image, p, f"layer{layer}.r2i.", d)
    i_out, c_i = _attend(image, radar, p, f"layer{layer}.i2r.", d)
    return r_out, i_out, {"r2i": c_r, "i2r": c_i}


def pool_tokens(radar: np.ndarray, image: np.ndarray) -> np.ndarray:
    if len(radar) + len(image) == 0:
        raise ValueError("cannot pool empty token sets")
    if len(radar) and len(image) and radar.shape[1] != image.shape[1]:
        raise ValueError("radar and image tokens must share d")
    return np.concatenate([radar, image], axis=0).mean(axis=0)


@dataclass
class RefinementOutput:
    q: np.ndarray
    t: np.ndarray
    rho: float

    def twist(self) -> np.ndarray:
        return se3_log(se3_from_quat_trans(self.q, self.t))

    def apply(self, T0: ExtrinsicTransform) -> ExtrinsicTransform:
        """Refined extrinsic ``exp(rho * log(SE3(q, t))) @ T0``."""
        return gated_update(T0, self.twist(), self.rho)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def refinement_head(z: np.ndarray, W: np.ndarray, b: np.ndarray) -> RefinementOutput:
    o = z @ W + b
    qr = o[:4]
    q = qr / (np.linalg.norm(qr) + HEAD_EPS)
    return RefinementOutput(q, o[4:7].copy(), _sigmoid(float(o[7])))


# -- full model -------------------------------------------------------------------


@dataclass
class ForwardCache:
    cfg: RefinerConfig
    img_patches: np.ndarray
    rad_patches: np.ndarray
    layers: list
    radar_tokens: np.ndarray
    image_tokens: np.ndarray
    z: np.ndarray
    head_out: np.ndarray

    def attention(self, layer: int = -1) -> dict[str, np.ndarray]:
        c = self.layers[layer]
        return {k: c[k]["A"] for k in DIRECTIONS}


def forward_refine(image_map, radar_map, params: dict, cfg: RefinerConfig) -> tuple[RefinementOutput, ForwardCache]:
    if cfg.layers < 1:
        raise ValueError("need at least one layer")
    img = tokenize(image_map, cfg.patch, cfg.d, params["img_embed.W"], params["img_embed.b"])
    rad = tokenize(radar_map, cfg.patch, cfg.d, params["rad_embed.W"], params["rad_embed.b"])
    XI, XR = img.tokens, rad.tokens
    caches = []
    for l in range(cfg.layers):
        XR, XI, c = cross_attention_layer(XR, XI, params, l)
        caches.append(c)
    z = pool_tokens(XR, XI)
    o = z @ params["head.W"] + params["head.b"]
    out = refinement_head(z, params["head.W"], params["head.b"])
    ip, _, _ = patchify(image_map, cfg.patch)
    rp, _, _ = patchify(radar_map, cfg.patch)
    return out, ForwardCache(cfg, ip, rp, caches, XR, XI, z, o)


def backward(cache: ForwardCache, params: dict, dq=None, dt=None, drho: float = 0.0) -> dict[str, np.ndarray]:
    """Gradients of a scalar with upstream partials w.r.t. (q, t, rho)."""
    cfg = cache.cfg
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    o = cache.head_out
    do = np.zeros(8)
    qr = o[:4]
    n = float(np.linalg.norm(qr))
    if dq is not None and n > 0:
        dq = np.asarray(dq, dtype=float)
        do[:4] = dq / (n + HEAD_EPS) - (qr @ dq) * qr / (n * (n + HEAD_EPS) ** 2)
    if dt is not None:
        do[4:7] = dt
    rho = _sigmoid(float(o[7]))
    do[7] = drho * rho * (1.0 - rho)
    grads["head.W"] += np.outer(cache.z, do)
    grads["head.b"] += do
    dz = params["head.W"] @ do
    nR, nI = len(cache.radar_tokens), len(cache.image_tokens)
    dXR = np.tile(dz / (nR + nI), (nR, 1))
    dXI = np.tile(dz / (nR + nI), (nI, 1))
    for l in reversed(range(cfg.layers)):
        c = cache.layers[l]
        dR_q, dI_kv = _attend_backward(dXR, c["r2i"], params, f"layer{l}.r2i.", cfg.d, grads)
        dI_q, dR_kv = _attend_backward(dXI, c["i2r"], params, f"layer{l}.i2r.", cfg.d, grads)
        dXR = dR_q + dR_kv
        dXI = dI_q + dI_kv
    grads["img_embed.W"] += cache.img_patches.T @ dXI
    grads["img_embed.b"] += dXI.sum(axis=0)
    grads["rad_embed.W"] += cache.rad_patches.T @ dXR
    grads["rad_embed.b"] += dXR.sum(axis=0)
    return grads


def surrogate_objective(out: RefinementOutput):
    """``|t|^2 + (1 - q_w)^2`` with its partials, used by gradient checks."""
    val = float(out.t @ out.t + (1.0 - out.q[0]) ** 2)
    dq = np.zeros(4)
    dq[0] = -2.0 * (1.0 - out.q[0])
    return val, dq, 2.0 * out.t


# -- serialization ----------------------------------------------------------------

_MAGIC = b"RCPARAM1"


def save_params(path, params: dict[str, np.ndarray], cfg: RefinerConfig | None = None) -> None:
    """Binary container: magic, manifest length, JSON manifest, then per tensor
    a dimension header and row-major little-endian float32 data."""
    names = sorted(params)
    manifest = {"tensors": [{"name": k, "shape": list(params[k].shape)} for k in names]}
    if cfg is not None:
        manifest["config"] = {
            "d": cfg.d,
            "layers": cfg.layers,
            "patch": cfg.patch,
            "image_shape": list(cfg.image_shape),
            "radar_shape": list(cfg.radar_shape),
        }
    mbytes = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for k in names:
            a = np.asarray(params[k], dtype="<f4")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))


def load_params(path) -> tuple[dict[str, np.ndarray], RefinerConfig | None]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError("not a parameter container")
    (mlen,) = struct.unpack_from("<I", data, 8)
    manifest = json.loads(data[12 : 12 + mlen])
    off = 12 + mlen
    out = {}
    for entry in manifest["tensors"]:
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        if list(shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {entry['name']}")
        count = int(np.prod(shape)) if ndim else 1
        out[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(float)
        off += 4 * count
    cfg = None
    if "config" in manifest:
        c = manifest["config"]
        cfg = RefinerConfig(c["d"], c["layers"], c["patch"], tuple(c["image_shape"]), tuple(c["radar_shape"]))
    return out, cfg
