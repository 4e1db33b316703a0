"""Transporter networks: feature encoder, keypoint network, refiner.

The feature encoder (FF-CNN) and KeyNet both read the 10-channel feature
probability map. KeyNet logits go through a spatial softmax and are rendered
back as Gaussian heatmaps. Features at source keypoints are suppressed and
target features pasted in (``transport``); the refiner then reconstructs the
target feature map.

Two attention variants are supported:

``transport_weight``
    every keypoint has a learnable transport strength ``sigmoid(raw_k)``.
``learned_sigma``
    every keypoint has a learnable Gaussian width ``softplus(s_k) + 1e-3``.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import (
    CBAM,
    AdamState,
    BatchNorm2d,
    Conv2d,
    DimensionError,
    Tensor,
    bilinear_upsample,
    gaussian_render,
    load_archive,
    mse_loss,
    no_grad,
    relu,
    save_archive,
    sigmoid,
    softplus,
    spatial_softmax,
)

ATTENTION_MODES = ("none", "transport_weight", "learned_sigma")
SIGMA_FLOOR = 1e-3


@dataclass
class TransporterConfig:
    in_channels: int = 10
    image_size: int = 256
    k: int = 10
    feature_channels: int = 32
    width: int = 32
    strides: Tuple[int, ...] = (2, 1, 2, 1, 1, 1)
    first_kernel: int = 7
    attention_mode: str = "none"
    cbam: bool = False
    sigma_init: float = 0.1
    weight_init_raw: float = 2.0
    dtype: str = "float32"

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != 6:
            raise ValueError("strides must list one value per encoder block (6)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        total = self.total_stride
        if total & (total - 1):
            raise ValueError("product of strides must be a power of two")
        if self.image_size % total:
            raise ValueError(f"image_size {self.image_size} not divisible by total stride {total}")
        if self.sigma_init <= SIGMA_FLOOR:
            raise ValueError(f"sigma_init must exceed {SIGMA_FLOOR}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_size(self) -> int:
        return self.image_size // self.total_stride

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransporterConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def architecture_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -------------------------------------------------------------------- blocks
class ConvBlock:
    """conv -> batchnorm -> ReLU."""

    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, kernel // 2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))

    def named(self):
        for k, v in self.conv.parameters().items():
            yield f"conv.{k}", v
        for k, v in self.bn.parameters().items():
            yield f"bn.{k}", v

    def buffers(self):
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}

    def batchnorms(self):
        return [self.bn]


class Network:
    """Common parameter and buffer bookkeeping."""

    blocks: List

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for i, blk in enumerate(self.blocks):
            if isinstance(blk, ConvBlock):
                for k, v in blk.named():
                    out[f"{i}.{k}"] = v
            elif hasattr(blk, "parameters"):
                for k, v in blk.parameters().items():
                    out[f"{i}.{k}"] = v
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self.blocks):
            if isinstance(blk, ConvBlock):
                out.update({f"{i}.{k}": v for k, v in blk.buffers().items()})
        return out

    def batchnorms(self) -> List[BatchNorm2d]:
        return [blk.bn for blk in self.blocks if isinstance(blk, ConvBlock)]


class FFCNN(Network):
    """Six conv blocks (7x7 first, 3x3 after) with an optional CBAM after block 3."""

    def __init__(self, cfg: TransporterConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        widths = [cfg.width] * 5 + [cfg.feature_channels]
        self.blocks = []
        cin = cfg.in_channels
        for i, (w, s) in enumerate(zip(widths, cfg.strides)):
            kernel = cfg.first_kernel if i == 0 else 3
            self.blocks.append(ConvBlock(cin, w, kernel, s, rng, dt))
            cin = w
            if i == 2 and cfg.cbam:
                self.blocks.append(CBAM(w, rng=rng, dtype=dt))

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class KeyNet(Network):
    """Five conv blocks and a final 1x1 conv to ``k`` logit maps."""

    def __init__(self, cfg: TransporterConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.blocks = []
        cin = cfg.in_channels
        for i, s in enumerate(cfg.strides[:5]):
            kernel = cfg.first_kernel if i == 0 else 3
            self.blocks.append(ConvBlock(cin, cfg.width, kernel, s, rng, dt))
            cin = cfg.width
        if cfg.strides[5] != 1:
            self.blocks.append(ConvBlock(cin, cfg.width, 3, cfg.strides[5], rng, dt))
        self.blocks.append(Conv2d(cin, cfg.k, 1, 1, 0, rng=rng, dtype=dt))

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


def _upsample_factors(total: int) -> Tuple[int, int]:
    n = int(round(np.log2(total)))
    return 2 ** ((n + 1) // 2), 2 ** (n // 2)


class RefineNet(Network):
    """Six conv blocks with two bilinear upsampling stages and a sigmoid output."""

    def __init__(self, cfg: TransporterConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        w = cfg.width
        self.factors = _upsample_factors(cfg.total_stride)
        self.blocks = [
            ConvBlock(cfg.feature_channels, w, 3, 1, rng, dt),
            ConvBlock(w, w, 3, 1, rng, dt),
            ConvBlock(w, w, 3, 1, rng, dt),
            ConvBlock(w, w, 3, 1, rng, dt),
            ConvBlock(w, w, 3, 1, rng, dt),
            Conv2d(w, cfg.in_channels, 3, 1, 1, rng=rng, dtype=dt),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        b = self.blocks
        x = b[1](b[0](x))
        x = bilinear_upsample(x, self.factors[0])
        x = b[4](b[3](b[2](x)))
        x = bilinear_upsample(x, self.factors[1])
        return sigmoid(b[5](x))


# ------------------------------------------------------------------- outputs
@dataclass
class KeypointOutput:
    coords: Tensor            # [N, K, 2] (x, y) in [-1, 1]
    heatmaps: Tensor          # [N, K, h, w]
    probs: Tensor             # [N, K, h, w] spatial softmax
    sigma: Tensor             # [K]
    weights: Optional[Tensor]  # [K] or None (unit transport)


@dataclass
class KeypointSet:
    coords: np.ndarray   # [K, 2]
    sigma: np.ndarray    # [K]
    weight: np.ndarray   # [K]

    def __post_init__(self):
        k = len(self.coords)
        if len(self.sigma) != k or len(self.weight) != k:
            raise ValueError("coords, sigma and weight must have equal length")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        if np.any(self.weight < 0) or np.any(self.weight > 1):
            raise ValueError("weights must lie in [0, 1]")


@dataclass
class TransportResult:
    epsilon: Tensor
    source_keys: KeypointOutput
    target_keys: KeypointOutput
    reconstruction: Tensor


# --------------------------------------------------------------------- model
def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


class TransporterModel:
    def __init__(self, config: Optional[TransporterConfig] = None, seed: int = 0):
        self.config = config or TransporterConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.ffcnn = FFCNN(cfg, rng)
        self.keynet = KeyNet(cfg, rng)
        self.refinenet = RefineNet(cfg, rng)
        dt = cfg.np_dtype
        self.sigma_raw = Tensor(np.full(cfg.k, _softplus_inv(cfg.sigma_init - SIGMA_FLOOR), dtype=dt),
                                requires_grad=cfg.attention_mode == "learned_sigma")
        self.weight_raw = Tensor(np.full(cfg.k, cfg.weight_init_raw, dtype=dt),
                                 requires_grad=cfg.attention_mode == "transport_weight")
        self.training = True

    # ---------------------------------------------------------- bookkeeping
    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for prefix, net in (("ffcnn", self.ffcnn), ("keynet", self.keynet), ("refinenet", self.refinenet)):
            for k, v in net.parameters().items():
                out[f"{prefix}.{k}"] = v
        if self.config.attention_mode == "learned_sigma":
            out["attention.sigma_raw"] = self.sigma_raw
        if self.config.attention_mode == "transport_weight":
            out["attention.weight_raw"] = self.weight_raw
        for name, t in out.items():
            t.name = name
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("ffcnn", self.ffcnn), ("keynet", self.keynet), ("refinenet", self.refinenet)):
            out.update({f"{prefix}.{k}": v for k, v in net.buffers().items()})
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = {f"param/{k}": v.data for k, v in self.parameters().items()}
        state.update({f"buffer/{k}": v for k, v in self.buffers().items()})
        state["fixed/sigma_raw"] = self.sigma_raw.data
        state["fixed/weight_raw"] = self.weight_raw.data
        return state

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        for name, t in params.items():
            t.data[...] = arrays[f"param/{name}"]
        for name, b in bufs.items():
            b[...] = arrays[f"buffer/{name}"]
        self.sigma_raw.data[...] = arrays["fixed/sigma_raw"]
        self.weight_raw.data[...] = arrays["fixed/weight_raw"]

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def _bns(self) -> List[BatchNorm2d]:
        return self.ffcnn.batchnorms() + self.keynet.batchnorms() + self.refinenet.batchnorms()

    def train(self) -> "TransporterModel":
        self.training = True
        for bn in self._bns():
            bn.training = True
        return self

    def eval(self) -> "TransporterModel":
        self.training = False
        for bn in self._bns():
            bn.training = False
        return self

    @contextlib.contextmanager
    def frozen_stats(self):
        """Batch statistics are still used in train mode but running buffers stay put."""
        bns = self._bns()
        for bn in bns:
            bn.update_stats = False
        try:
            yield
        finally:
            for bn in bns:
                bn.update_stats = True

    # -------------------------------------------------------------- forward
    def sigma(self) -> Tensor:
        if self.config.attention_mode == "learned_sigma":
            return softplus(self.sigma_raw) + SIGMA_FLOOR
        return Tensor(np.full(self.config.k, self.config.sigma_init), dtype=self.config.np_dtype)

    def transport_weights(self) -> Optional[Tensor]:
        if self.config.attention_mode == "transport_weight":
            return sigmoid(self.weight_raw)
        return None

    def features(self, fpm) -> Tensor:
        return self.ffcnn(_check_input(fpm, self.config))

    def keypoints(self, fpm) -> KeypointOutput:
        x = _check_input(fpm, self.config)
        logits = self.keynet(x)
        if logits.shape[1] != self.config.k:
            raise DimensionError(f"KeyNet produced {logits.shape[1]} maps, model expects k={self.config.k}")
        coords, probs = spatial_softmax(logits)
        sigma = self.sigma()
        h, w = logits.shape[2:]
        heat = gaussian_render(coords, sigma, h, w)
        return KeypointOutput(coords, heat, probs, sigma, self.transport_weights())

    def refine(self, epsilon: Tensor) -> Tensor:
        return self.refinenet(epsilon)


def _check_input(fpm, cfg: TransporterConfig) -> Tensor:
    x = fpm if isinstance(fpm, Tensor) else Tensor(np.asarray(fpm), dtype=cfg.np_dtype)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected [N,{cfg.in_channels},H,W] input, got {x.shape} (axis 1 = channels)")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise DimensionError(f"expected spatial size {cfg.image_size} on axes 2,3, got {x.shape[2:]}")
    if x.dtype != cfg.np_dtype:
        x = Tensor(x.data, requires_grad=False, dtype=cfg.np_dtype) if not x.requires_grad else x
    return x


# --------------------------------------------------------------- transport
def transport(psi_s: Tensor, psi_t: Tensor, phi_s: Tensor, phi_t: Tensor,
              weights: Optional[Tensor] = None) -> Tensor:
    """Move target features into place at each keypoint, in fixed index order.

    ``eps <- (1 - w*phi_s[k]) * (1 - w*phi_t[k]) * eps + w*phi_t[k] * psi_t``
    starting from ``eps = psi_s``; ``w = 1`` when ``weights`` is None.
    """
    if psi_s.shape != psi_t.shape:
        raise DimensionError(f"feature maps differ: {psi_s.shape} vs {psi_t.shape}")
    if phi_s.shape != phi_t.shape:
        raise DimensionError(f"heatmaps differ: {phi_s.shape} vs {phi_t.shape}")
    if phi_s.shape[0] != psi_s.shape[0] or phi_s.shape[2:] != psi_s.shape[2:]:
        raise DimensionError(f"heatmaps {phi_s.shape} do not match features {psi_s.shape} on axes 0,2,3")
    k = phi_s.shape[1]
    if weights is not None and weights.shape != (k,):
        raise DimensionError(f"weights shape {weights.shape} != ({k},)")
    eps = psi_s
    for i in range(k):
        hs = phi_s[:, i:i + 1]
        ht = phi_t[:, i:i + 1]
        if weights is not None:
            wk = weights[i]
            hs = hs * wk
            ht = ht * wk
        eps = (1.0 - hs) * (1.0 - ht) * eps + ht * psi_t
    return eps


def source_branch(model: TransporterModel, source) -> Tuple[Tensor, KeypointOutput]:
    """Source features and keypoints, computed off the tape (stop-gradient).

    Batch statistics are used in train mode but running buffers are left to
    the target branch.
    """
    with no_grad(), model.frozen_stats():
        psi_s = model.features(source).detach()
        ks = model.keypoints(source)
    ks.heatmaps = ks.heatmaps.detach()
    return psi_s, ks


def target_loss(model: TransporterModel, psi_s: Tensor, source_keys: KeypointOutput,
                target) -> Tuple[Tensor, TransportResult]:
    """Target branch, transport, refinement and reconstruction loss."""
    tgt = _check_input(target, model.config)
    psi_t = model.features(tgt)
    kt = model.keypoints(tgt)
    eps = transport(psi_s, psi_t, source_keys.heatmaps, kt.heatmaps, kt.weights)
    recon = model.refine(eps)
    loss = mse_loss(recon, tgt.data)
    return loss, TransportResult(eps, source_keys, kt, recon)


def training_forward(source, target, model: TransporterModel) -> Tuple[Tensor, TransportResult]:
    """Reconstruction loss for a batch of (source, target) feature maps.

    The source branch runs without the tape so gradients reach the shared
    networks only through the target branch.
    """
    psi_s, ks = source_branch(model, source)
    return target_loss(model, psi_s, ks, target)


def infer_keypoints(model: TransporterModel, fpm_batch: np.ndarray) -> List[KeypointSet]:
    """Eval-mode keypoints (normalised coordinates) for a batch of maps."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = model.keypoints(fpm_batch)
    finally:
        if was_training:
            model.train()
    sig = out.sigma.data.astype(np.float64)
    w = out.weights.data.astype(np.float64) if out.weights is not None else np.ones(model.config.k)
    return [KeypointSet(c.astype(np.float64), sig.copy(), w.copy()) for c in out.coords.data]


# --------------------------------------------------------------- checkpoint
class CheckpointMismatch(ValueError):
    pass


def checkpoint_save(path, model: TransporterModel, adam: Optional[AdamState] = None, epoch: int = 0,
                    rng_seed: int = 0, extra: Optional[dict] = None) -> None:
    arrays = dict(model.state_arrays())
    manifest = {
        "model": model.config.to_dict(),
        "architecture_hash": model.config.architecture_hash(),
        "k": model.config.k,
        "attention_mode": model.config.attention_mode,
        "cbam": model.config.cbam,
        "epoch": int(epoch),
        "rng_seed": int(rng_seed),
    }
    if adam is not None:
        manifest["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                            "eps": adam.eps, "step": adam.step}
        for name in adam.m:
            arrays[f"adam_m/{name}"] = adam.m[name]
            arrays[f"adam_v/{name}"] = adam.v[name]
    if extra:
        manifest.update(extra)
    save_archive(path, arrays, manifest)


def checkpoint_load(path, expected: Optional[TransporterConfig] = None):
    """Return ``(model, adam_state_or_None, manifest)``.

    If ``expected`` is given, any architectural difference is reported field
    by field and loading is refused.
    """
    arrays, manifest = load_archive(path)
    cfg = TransporterConfig.from_dict(manifest["model"])
    if expected is not None:
        a, b = cfg.to_dict(), expected.to_dict()
        diff = [f"{k}: checkpoint={a[k]!r} expected={b[k]!r}" for k in sorted(a) if a[k] != b[k]]
        if diff:
            raise CheckpointMismatch("architecture mismatch; " + "; ".join(diff))
    model = TransporterModel(cfg)
    model.load_state_arrays(arrays)
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        for key, arr in arrays.items():
            if key.startswith("adam_m/"):
                adam.m[key[7:]] = arr.copy()
            elif key.startswith("adam_v/"):
                adam.v[key[7:]] = arr.copy()
    return model, adam, manifest
