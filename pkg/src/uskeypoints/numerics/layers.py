"""Differentiable layers used by the three keypoint networks.

Every function takes and returns :class:`Tensor` objects and records its own
backward rule on the tape. Parameterised layers are small classes holding
named leaf tensors so they can be collected, saved and optimised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    as_tensor,
    concat,
    make_result,
    matmul,
    mul,
    relu,
    sigmoid,
    tmax,
    tmean,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        kinds = {"conv2d", "batchnorm2d", "relu", "spatial_softmax", "bilinear_upsample", "cbam"}
        if self.kind not in kinds:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid layer spec {self}")

    def output_size(self, size: int, axis: int = 0) -> int:
        out = (size + 2 * self.padding - self.kernel[axis]) // self.stride + 1
        if out <= 0:
            raise DimensionError(f"conv output extent {out} <= 0 on spatial axis {axis} (input {size})")
        return out


# --------------------------------------------------------------------- conv2d
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,kh,kw]."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch on axis 1: input has {c}, weight expects {wc}")
    spec = LayerSpec("conv2d", (kh, kw), stride, padding, c, o)
    ho, wo = spec.output_size(h, 0), spec.output_size(w, 1)

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # channel-major scatter keeps the inner (n, ho, wo) slices contiguous
            dcols = (wmat.T @ g.transpose(1, 0, 2, 3).reshape(o, -1)).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += dcols[:, a, b]
            gx = gxp.transpose(1, 0, 2, 3)[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back)


# ---------------------------------------------------------------- batchnorm2d
def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalisation of ``x`` [N,C,H,W].

    In training mode the batch statistics are used and, if ``update_stats``,
    the running buffers are updated in place with ``momentum``.
    """
    n, c, h, w = x.shape
    xd = x.data
    g_ = gamma.data.reshape(1, c, 1, 1)
    b_ = beta.data.reshape(1, c, 1, 1)
    if training:
        if n < 2:
            raise DimensionError("batchnorm2d in train mode needs batch size >= 2 on axis 0")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        if update_stats:
            m = n * h * w
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1 - momentum
            running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * invstd
    out = g_ * xhat + b_

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if training:
                m = n * h * w
                gx = invstd / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                   - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * invstd
        return gx, gg, gbeta

    return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


# ------------------------------------------------------------ spatial softmax
def _norm_grid(n: int, dtype) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n).astype(dtype)


def softmax2d(logits: Tensor) -> Tensor:
    """Softmax over the two trailing (spatial) axes."""
    n, k, h, w = logits.shape
    z = logits.data.reshape(n, k, h * w)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=2, keepdims=True)).reshape(n, k, h, w)

    def back(g):
        inner = (g * p).sum(axis=(2, 3), keepdims=True)
        return (p * (g - inner),)

    return make_result(p, (logits,), back)


def spatial_softmax(logits: Tensor) -> Tuple[Tensor, Tensor]:
    """Return ``(coords [N,K,2], probs [N,K,H,W])``.

    ``coords[..., 0]`` is the expected x (column) and ``coords[..., 1]`` the
    expected y (row), both on a grid spanning [-1, 1] corner to corner.
    """
    if logits.ndim != 4:
        raise DimensionError(f"spatial_softmax expects [N,K,H,W], got {logits.shape}")
    n, k, h, w = logits.shape
    if h < 2 or w < 2:
        raise DimensionError(f"spatial_softmax needs H,W >= 2 on axes 2,3, got {h}x{w}")
    probs = softmax2d(logits)
    gy, gx = np.meshgrid(_norm_grid(h, logits.dtype), _norm_grid(w, logits.dtype), indexing="ij")
    grid = Tensor(np.stack([gx.ravel(), gy.ravel()], axis=1), dtype=logits.dtype)
    coords = matmul(probs.reshape(n, k, h * w), grid)
    return coords, probs


# ------------------------------------------------------------ gaussian render
def gaussian_render(coords: Tensor, sigma, height: int, width: int) -> Tensor:
    """Render isotropic Gaussians ``exp(-|g - c|^2 / (2 sigma^2))`` on a [-1,1] grid."""
    coords = as_tensor(coords)
    sigma = as_tensor(sigma, coords)
    n, k, two = coords.shape
    if two != 2:
        raise DimensionError(f"coords last axis must be 2, got {two}")
    sd = np.broadcast_to(sigma.data, (k,)).reshape(1, k, 1, 1)
    gx = _norm_grid(width, coords.dtype).reshape(1, 1, 1, width)
    gy = _norm_grid(height, coords.dtype).reshape(1, 1, height, 1)
    dx = gx - coords.data[:, :, 0, None, None]
    dy = gy - coords.data[:, :, 1, None, None]
    d2 = dx * dx + dy * dy
    s2 = sd * sd
    heat = np.exp(-d2 / (2.0 * s2))

    def back(g):
        gh = g * heat
        gc = None
        if coords.requires_grad:
            gc = np.stack([(gh * dx).sum(axis=(2, 3)), (gh * dy).sum(axis=(2, 3))], axis=-1) / s2[:, :, 0]
        gs = None
        if sigma.requires_grad:
            gs = (gh * d2 / (s2 * sd)).sum(axis=(0, 2, 3))
            gs = gs.reshape(sigma.shape) if sigma.size == k else gs.sum().reshape(sigma.shape)
        return gc, gs

    return make_result(heat, (coords, sigma), back)


# ---------------------------------------------------------- bilinear upsample
def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    a[np.arange(n_out), lo] = 1.0 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample [N,C,H,W] by an integer factor (align-corners convention)."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    ah = _interp_matrix(h, h * factor, x.dtype)
    aw = _interp_matrix(w, w * factor, x.dtype)
    out = ah @ x.data @ aw.T
    return make_result(out, (x,), lambda g: (ah.T @ g @ aw,))


# ------------------------------------------------------------------ mse loss
def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference; ``target`` is constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise DimensionError(f"mse_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    if not np.isfinite(loss):
        raise NonFiniteError("mse_loss produced a non-finite value")
    scale = 2.0 / diff.size
    return make_result(loss, (pred,), lambda g: (g * scale * diff,))


# ------------------------------------------------------------ parameter layers
def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = LayerSpec("conv2d", (kernel, kernel), stride, padding, in_ch, out_ch)
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}


class BatchNorm2d:
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True
        self.update_stats = True

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, update_stats=self.update_stats)

    def parameters(self) -> Dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class CBAM:
    """Channel-then-spatial attention gate.

    Channel gate: shared two-layer MLP over average- and max-pooled
    descriptors. Spatial gate: 7x7 conv over the channel-wise mean and max.
    """

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, channels // reduction)
        self.w1 = Tensor(kaiming_uniform(rng, (channels, hidden), channels, dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(kaiming_uniform(rng, (hidden, channels), hidden, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.spatial = Conv2d(2, 1, spatial_kernel, 1, spatial_kernel // 2, rng=rng, dtype=dtype)

    def channel_gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        avg = tmean(x, axis=(2, 3))
        mx = tmax(x.reshape(n, c, -1), axis=2)

        def mlp(v):
            return matmul(relu(matmul(v, self.w1) + self.b1), self.w2) + self.b2

        return sigmoid(mlp(avg) + mlp(mx)).reshape(n, c, 1, 1)

    def spatial_gate(self, x: Tensor) -> Tensor:
        desc = concat([tmean(x, axis=1, keepdims=True), tmax(x, axis=1, keepdims=True)], axis=1)
        return sigmoid(self.spatial(desc))

    def __call__(self, x: Tensor) -> Tensor:
        y = mul(x, self.channel_gate(x))
        return mul(y, self.spatial_gate(y))

    def parameters(self) -> Dict[str, Tensor]:
        p = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        p.update({f"spatial.{k}": v for k, v in self.spatial.parameters().items()})
        return p

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}


def cbam_block(x: Tensor, block: CBAM) -> Tensor:
    return block(x)
