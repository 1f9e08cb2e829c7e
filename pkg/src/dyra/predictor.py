"""Miniature scale-factor network: conv stack -> attention encoder -> mean-pool -> FC.

Two input modes:

* ``features`` -- an 8-vector of box statistics, lifted to ``tokens`` tokens
  by a linear embedding and mixed by residual 1-D convolutions along the
  token axis;
* ``thumbnail`` -- a grayscale raster (boxes drawn as filled rectangles),
  reduced to a 4x4 token grid by stride-2 3x3 convolutions.

The batched forward/backward are hand-written numpy. ``forward_tape``
rebuilds the same graph on the scalar autodiff tape for cross-checking.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .core import DomainError, ScalerConfig, bound_scale, bound_scale_grad

N_FEATURES = 8
LOG_AREA_CENTER = math.log(128.0**2)
LOG_AREA_SCALE = 2.0
MAX_BOXES = 12.0
# absolute pixel extent covered by a thumbnail, so resolution changes stay visible
THUMBNAIL_EXTENT = 1333.0

CHECKPOINT_FORMAT = "dyra-predictor"
CHECKPOINT_VERSION = 1


def box_features(widths, heights) -> np.ndarray:
    """8 normalised statistics of one image's boxes."""
    w = np.asarray(widths, dtype=np.float64)
    h = np.asarray(heights, dtype=np.float64)
    if w.size == 0:
        return np.zeros(N_FEATURES)
    z = (np.log(w * h) - LOG_AREA_CENTER) / LOG_AREA_SCALE
    asp = np.log(w / h)
    return np.array([
        w.size / MAX_BOXES,
        z.mean(),
        z.std(),
        z.min(),
        z.max(),
        float(np.median(z)),
        asp.mean(),
        asp.std(),
    ])


def render_thumbnail(boxes_xywh, side: int = 32, extent: float = THUMBNAIL_EXTENT) -> np.ndarray:
    """Rasterise boxes as filled unit rectangles on a ``side`` x ``side`` canvas."""
    canvas = np.zeros((side, side))
    cell = extent / side
    for x, y, w, h in boxes_xywh:
        x0 = int(np.clip(math.floor(x / cell), 0, side - 1))
        y0 = int(np.clip(math.floor(y / cell), 0, side - 1))
        x1 = int(np.clip(math.ceil((x + w) / cell), x0 + 1, side))
        y1 = int(np.clip(math.ceil((y + h) / cell), y0 + 1, side))
        canvas[y0:y1, x0:x1] = 1.0
    return canvas


def _conv_plan(cfg: ScalerConfig):
    """(c_in, c_out, stride) per conv layer."""
    H = cfg.hidden_dim
    if cfg.input_mode == "features":
        return [(H, H, 1)] * cfg.conv_layers
    grid = int(round(math.sqrt(cfg.tokens)))
    if grid * grid != cfg.tokens:
        raise DomainError("thumbnail mode needs a square token count")
    n_down = int(round(math.log2(cfg.thumbnail_side / grid)))
    if grid * 2**n_down != cfg.thumbnail_side or n_down > cfg.conv_layers or n_down < 1:
        raise DomainError("thumbnail_side must be tokens_grid * 2^k with 1 <= k <= conv_layers")
    plan = []
    c = 1
    for layer in range(cfg.conv_layers):
        plan.append((c, H, 2 if layer < n_down else 1))
        c = H
    return plan


def param_shapes(cfg: ScalerConfig):
    """Ordered (name, shape, fan_in) for every parameter."""
    H, T, FF = cfg.hidden_dim, cfg.tokens, cfg.ffn_dim
    out = []
    if cfg.input_mode == "features":
        out.append(("embed.w", (T * H, N_FEATURES), N_FEATURES))
        out.append(("embed.b", (T * H,), None))
        for i, (ci, co, _) in enumerate(_conv_plan(cfg)):
            out.append((f"conv{i}.w", (co, ci, 3), ci * 3))
            out.append((f"conv{i}.b", (co,), None))
    else:
        for i, (ci, co, _) in enumerate(_conv_plan(cfg)):
            out.append((f"conv{i}.w", (co, ci, 3, 3), ci * 9))
            out.append((f"conv{i}.b", (co,), None))
    for e in range(cfg.encoder_blocks):
        for m in ("wq", "wk", "wv", "wo"):
            out.append((f"enc{e}.{m}", (H, H), H))
        out.append((f"enc{e}.w1", (H, FF), H))
        out.append((f"enc{e}.b1", (FF,), None))
        out.append((f"enc{e}.w2", (FF, H), FF))
        out.append((f"enc{e}.b2", (H,), None))
    out.append(("head.w", (H,), H))
    out.append(("head.b", (), None))
    return out


@dataclass
class PredictorParams:
    cfg: ScalerConfig
    arrays: dict

    def names(self):
        return list(self.arrays)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, vec) -> "PredictorParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = vec[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return PredictorParams(self.cfg, out)

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def to_checkpoint(self, extra=None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "scaler": asdict(self.cfg),
            "params": [
                {"name": k, "shape": list(a.shape), "data": a.ravel().tolist()}
                for k, a in self.arrays.items()
            ],
            "extra": extra or {},
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "PredictorParams":
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 predictor checkpoint")
        cfg = ScalerConfig(**doc["scaler"])
        expected = param_shapes(cfg)
        arrays = {}
        for (name, shape, _), rec in zip(expected, doc["params"]):
            if rec["name"] != name or tuple(rec["shape"]) != tuple(shape):
                raise ValueError(f"checkpoint parameter mismatch at {rec['name']}")
            arrays[name] = np.array(rec["data"], dtype=np.float64).reshape(shape)
        if len(doc["params"]) != len(expected):
            raise ValueError("checkpoint parameter count mismatch")
        return cls(cfg, arrays)

    def save(self, path, extra=None):
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(extra), fh)

    @classmethod
    def load(cls, path) -> "PredictorParams":
        with open(path) as fh:
            return cls.from_checkpoint(json.load(fh))


def init(seed, cfg: ScalerConfig) -> PredictorParams:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, fan_in in param_shapes(cfg):
        if fan_in is None:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
    return PredictorParams(cfg, arrays)


def zeros(cfg: ScalerConfig) -> PredictorParams:
    return PredictorParams(cfg, {n: np.zeros(s) for n, s, _ in param_shapes(cfg)})


# ---------------------------------------------------------------- layers


def _conv1d_fwd(X, w, b):
    T = X.shape[1]
    Xp = np.pad(X, ((0, 0), (1, 1), (0, 0)))
    win = np.stack([Xp[:, k:k + T, :] for k in range(3)], axis=-1)  # (B,T,Cin,3)
    pre = np.einsum("btik,oik->bto", win, w) + b
    Z = np.tanh(pre)
    return X + Z, (win, Z)


def _conv1d_bwd(dY, w, cache):
    win, Z = cache
    T = dY.shape[1]
    dpre = dY * (1.0 - Z * Z)
    dw = np.einsum("bto,btik->oik", dpre, win)
    db = dpre.sum(axis=(0, 1))
    dwin = np.einsum("bto,oik->btik", dpre, w)
    dXp = np.zeros((dY.shape[0], T + 2, dY.shape[2]))
    for k in range(3):
        dXp[:, k:k + T, :] += dwin[..., k]
    return dY + dXp[:, 1:-1, :], dw, db


def _conv2d_fwd(X, w, b, stride):
    B, C, S, _ = X.shape
    So = S // stride
    Xp = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, So, So))
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = Xp[:, :, i:i + stride * So:stride, j:j + stride * So:stride]
    pre = np.einsum("bcijhw,ocij->bohw", cols, w) + b[None, :, None, None]
    Z = np.tanh(pre)
    residual = stride == 1 and w.shape[0] == w.shape[1]
    Y = X + Z if residual else Z
    return Y, (cols, Z, stride, X.shape, residual)


def _conv2d_bwd(dY, w, cache):
    cols, Z, stride, xshape, residual = cache
    B, C, S, _ = xshape
    So = Z.shape[2]
    dpre = dY * (1.0 - Z * Z)
    dw = np.einsum("bohw,bcijhw->ocij", dpre, cols)
    db = dpre.sum(axis=(0, 2, 3))
    dcols = np.einsum("bohw,ocij->bcijhw", dpre, w)
    dXp = np.zeros((B, C, S + 2, S + 2))
    for i in range(3):
        for j in range(3):
            dXp[:, :, i:i + stride * So:stride, j:j + stride * So:stride] += dcols[:, :, i, j]
    dX = dXp[:, :, 1:-1, 1:-1]
    if residual:
        dX = dX + dY
    return dX, dw, db


def _softmax(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=-1, keepdims=True)


def _encoder_fwd(X, p, e):
    H = X.shape[-1]
    wq, wk, wv, wo = (p[f"enc{e}.{m}"] for m in ("wq", "wk", "wv", "wo"))
    Q, K, V = X @ wq, X @ wk, X @ wv
    A = _softmax(Q @ K.transpose(0, 2, 1) / math.sqrt(H))
    O = A @ V
    X1 = X + O @ wo
    Hh = np.tanh(X1 @ p[f"enc{e}.w1"] + p[f"enc{e}.b1"])
    X2 = X1 + Hh @ p[f"enc{e}.w2"] + p[f"enc{e}.b2"]
    return X2, (X, Q, K, V, A, O, X1, Hh)


def _encoder_bwd(dX2, p, e, cache, grads):
    X, Q, K, V, A, O, X1, Hh = cache
    H = X.shape[-1]
    scale = 1.0 / math.sqrt(H)
    grads[f"enc{e}.w2"] = np.einsum("btf,bth->fh", Hh, dX2)
    grads[f"enc{e}.b2"] = dX2.sum(axis=(0, 1))
    dpre = (dX2 @ p[f"enc{e}.w2"].T) * (1.0 - Hh * Hh)
    grads[f"enc{e}.w1"] = np.einsum("bth,btf->hf", X1, dpre)
    grads[f"enc{e}.b1"] = dpre.sum(axis=(0, 1))
    dX1 = dX2 + dpre @ p[f"enc{e}.w1"].T
    grads[f"enc{e}.wo"] = np.einsum("bth,btg->hg", O, dX1)
    dO = dX1 @ p[f"enc{e}.wo"].T
    dA = dO @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQ = dS @ K * scale
    dK = dS.transpose(0, 2, 1) @ Q * scale
    grads[f"enc{e}.wq"] = np.einsum("bth,btg->hg", X, dQ)
    grads[f"enc{e}.wk"] = np.einsum("bth,btg->hg", X, dK)
    grads[f"enc{e}.wv"] = np.einsum("bth,btg->hg", X, dV)
    return (dX1 + dQ @ p[f"enc{e}.wq"].T + dK @ p[f"enc{e}.wk"].T
            + dV @ p[f"enc{e}.wv"].T)


# ---------------------------------------------------------------- network


def _check_input(x, cfg: ScalerConfig):
    x = np.asarray(x, dtype=np.float64)
    if cfg.input_mode == "features":
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != N_FEATURES:
            raise DomainError(f"expected (batch, {N_FEATURES}) features, got {x.shape}")
    else:
        side = cfg.thumbnail_side
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (side, side):
            raise DomainError(f"expected (batch, {side}, {side}) thumbnails, got {x.shape}")
    return x


def forward_raw(params: PredictorParams, x):
    """Raw (unbounded) outputs and the cache needed by :func:`backward`."""
    cfg, p = params.cfg, params.arrays
    x = _check_input(x, cfg)
    B = x.shape[0]
    caches = []
    if cfg.input_mode == "features":
        X = (x @ p["embed.w"].T + p["embed.b"]).reshape(B, cfg.tokens, cfg.hidden_dim)
        for i in range(cfg.conv_layers):
            X, c = _conv1d_fwd(X, p[f"conv{i}.w"], p[f"conv{i}.b"])
            caches.append(c)
    else:
        X = x[:, None, :, :]
        for i, (_, _, stride) in enumerate(_conv_plan(cfg)):
            X, c = _conv2d_fwd(X, p[f"conv{i}.w"], p[f"conv{i}.b"], stride)
            caches.append(c)
        X = X.reshape(B, cfg.hidden_dim, cfg.tokens).transpose(0, 2, 1)
    enc_caches = []
    for e in range(cfg.encoder_blocks):
        X, c = _encoder_fwd(X, p, e)
        enc_caches.append(c)
    pooled = X.mean(axis=1)
    raw = pooled @ p["head.w"] + p["head.b"]
    return raw, (x, caches, enc_caches, pooled)


def forward(x, params: PredictorParams, cfg: ScalerConfig | None = None):
    """Bounded scale factors for a batch (or a single input)."""
    cfg = params.cfg if cfg is None else cfg
    x_arr = np.asarray(x)
    single = x_arr.ndim == (1 if params.cfg.input_mode == "features" else 2)
    raw, _ = forward_raw(params, x)
    phi = bound_scale(raw, cfg)
    return float(phi[0]) if single else phi


def backward(params: PredictorParams, cache, draw) -> dict:
    """Gradients of ``sum(draw * raw)`` with respect to every parameter."""
    cfg, p = params.cfg, params.arrays
    x, caches, enc_caches, pooled = cache
    draw = np.asarray(draw, dtype=np.float64)
    grads = {}
    grads["head.w"] = pooled.T @ draw
    grads["head.b"] = np.array(draw.sum())
    dX = np.repeat((draw[:, None] * p["head.w"][None, :])[:, None, :] / cfg.tokens,
                   cfg.tokens, axis=1)
    for e in reversed(range(cfg.encoder_blocks)):
        dX = _encoder_bwd(dX, p, e, enc_caches[e], grads)
    if cfg.input_mode == "features":
        for i in reversed(range(cfg.conv_layers)):
            dX, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv1d_bwd(dX, p[f"conv{i}.w"], caches[i])
        dE = dX.reshape(x.shape[0], -1)
        grads["embed.w"] = dE.T @ x
        grads["embed.b"] = dE.sum(axis=0)
    else:
        B = x.shape[0]
        grid = int(round(math.sqrt(cfg.tokens)))
        dX = dX.transpose(0, 2, 1).reshape(B, cfg.hidden_dim, grid, grid)
        for i in reversed(range(cfg.conv_layers)):
            dX, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv2d_bwd(dX, p[f"conv{i}.w"], caches[i])
    return {k: grads[k] for k in p}


def value_and_grad(params: PredictorParams, x, dphi):
    """phi for the batch and the gradient of ``sum(dphi * phi)`` w.r.t. the parameters."""
    raw, cache = forward_raw(params, x)
    phi = bound_scale(raw, params.cfg)
    draw = np.asarray(dphi) * bound_scale_grad(raw, params.cfg)
    return phi, backward(params, cache, draw)


# ---------------------------------------------------------------- scalar-tape twin


def forward_tape(params_nodes: dict, x, cfg: ScalerConfig):
    """Same network for a single input, built from scalar tape operations.

    ``params_nodes`` maps names to nested lists (matching array shapes) of
    nodes or floats. Returns phi. Intended for small configurations only.
    """
    P = params_nodes
    H, T = cfg.hidden_dim, cfg.tokens
    if cfg.input_mode != "features":
        raise NotImplementedError("scalar twin covers feature mode only")
    x = [float(v) for v in np.asarray(x).ravel()]
    e = [ad.dot(row, x) + b for row, b in zip(P["embed.w"], P["embed.b"])]
    X = [e[t * H:(t + 1) * H] for t in range(T)]
    for i in range(cfg.conv_layers):
        w, b = P[f"conv{i}.w"], P[f"conv{i}.b"]
        new = []
        for t in range(T):
            row = []
            for o in range(H):
                terms = [b[o]]
                for k in range(3):
                    src = t + k - 1
                    if 0 <= src < T:
                        terms.extend(X[src][c] * w[o][c][k] for c in range(H))
                row.append(X[t][o] + ad.tanh(ad.sum_(terms)))
            new.append(row)
        X = new
    for en in range(cfg.encoder_blocks):
        g = lambda m: P[f"enc{en}.{m}"]  # noqa: E731

        def proj(X, W):
            return [[ad.dot(xt, [W[c][o] for c in range(H)]) for o in range(len(W[0]))] for xt in X]

        Q, K, V = proj(X, g("wq")), proj(X, g("wk")), proj(X, g("wv"))
        scale = 1.0 / math.sqrt(H)
        O = []
        for t in range(T):
            s = [ad.dot(Q[t], K[u]) * scale for u in range(T)]
            m = max(ad.value(v) for v in s)
            ex = [ad.exp(v - m) for v in s]
            z = ad.sum_(ex)
            a = [v / z for v in ex]
            O.append([ad.dot(a, [V[u][c] for u in range(T)]) for c in range(H)])
        OW = proj(O, g("wo"))
        X1 = [[X[t][c] + OW[t][c] for c in range(H)] for t in range(T)]
        hid = proj(X1, g("w1"))
        hid = [[ad.tanh(v + bb) for v, bb in zip(row, g("b1"))] for row in hid]
        ff = proj(hid, g("w2"))
        X = [[X1[t][c] + ff[t][c] + g("b2")[c] for c in range(H)] for t in range(T)]
    pooled = [ad.mean([X[t][c] for t in range(T)]) for c in range(H)]
    raw = ad.dot(pooled, P["head.w"]) + P["head.b"]
    tau = cfg.tau
    return ad.maximum(ad.sigmoid(raw), tau / 10.0) * tau


def nest(params: PredictorParams, flat_values):
    """Split a flat sequence (of nodes or floats) into nested lists shaped like ``params``."""
    out, pos = {}, 0
    for k, a in params.arrays.items():
        chunk = list(flat_values[pos:pos + a.size])
        pos += a.size
        out[k] = _reshape_list(chunk, a.shape)
    return out


def _reshape_list(seq, shape):
    if len(shape) == 0:
        return seq[0]
    if len(shape) == 1:
        return seq
    step = int(np.prod(shape[1:]))
    return [_reshape_list(seq[i * step:(i + 1) * step], shape[1:]) for i in range(shape[0])]
