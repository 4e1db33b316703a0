"""Finite-difference gradient suite over every differentiable operation.

Each check builds a small random float64 instance, reduces the op's outputs
to a scalar with fixed random weights and compares tape gradients with
central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .numerics import (
    CBAM,
    BatchNorm2d,
    GradCheckResult,
    Tensor,
    batchnorm2d,
    bilinear_upsample,
    check_gradients,
    conv2d,
    gaussian_render,
    spatial_softmax,
)
from .numerics.gradcheck import projection_loss
from .transporter import TransporterConfig, TransporterModel, source_branch, target_loss, transport

F64 = np.float64


def _leaf(rng, shape, scale=1.0, low=None, high=None):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.normal(0.0, scale, size=shape)
    return Tensor(data, requires_grad=True, dtype=F64)


def _projected(fn, outs_shape_fn, rng):
    """Wrap ``fn`` (returning a tuple of tensors) into a scalar loss."""
    shapes = outs_shape_fn()
    weights = [rng.normal(size=s) for s in shapes]
    return lambda: projection_loss(fn(), weights)


def case_conv(rng):
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    x, w, b = _leaf(rng, (2, 2, 5, 5)), _leaf(rng, (2, 2, k, k)), _leaf(rng, (2,))
    f = lambda: (conv2d(x, w, b, stride, k // 2),)
    return _projected(f, lambda: [o.shape for o in f()], rng), {"x": x, "w": w, "b": b}


def case_batchnorm(rng):
    x = _leaf(rng, (3, 2, 3, 3))
    gamma, beta = _leaf(rng, (2,), low=0.5, high=1.5), _leaf(rng, (2,))
    rm, rv = np.zeros(2), np.ones(2)
    f = lambda: (batchnorm2d(x, gamma, beta, rm, rv, training=True, update_stats=False),)
    return _projected(f, lambda: [o.shape for o in f()], rng), {"x": x, "gamma": gamma, "beta": beta}


def case_spatial_softmax(rng):
    logits = _leaf(rng, (1, 2, 4, 4))
    f = lambda: spatial_softmax(logits)
    return _projected(f, lambda: [o.shape for o in f()], rng), {"logits": logits}


def case_gaussian_render(rng):
    coords = _leaf(rng, (1, 2, 2), low=-0.8, high=0.8)
    sigma = _leaf(rng, (2,), low=0.2, high=0.6)
    f = lambda: (gaussian_render(coords, sigma, 5, 6),)
    return _projected(f, lambda: [o.shape for o in f()], rng), {"coords": coords, "sigma": sigma}


def case_upsample(rng):
    x = _leaf(rng, (1, 2, 3, 4))
    factor = int(rng.integers(2, 4))
    f = lambda: (bilinear_upsample(x, factor),)
    return _projected(f, lambda: [o.shape for o in f()], rng), {"x": x}


def case_cbam(rng):
    block = CBAM(4, reduction=2, spatial_kernel=3, rng=rng, dtype=F64)
    x = _leaf(rng, (1, 4, 4, 4))
    f = lambda: (block(x),)
    inputs = {"x": x, **block.parameters()}
    return _projected(f, lambda: [o.shape for o in f()], rng), inputs


def case_transport(rng):
    shape = (1, 2, 4, 4)
    psi_s, psi_t = _leaf(rng, shape), _leaf(rng, shape)
    phi_s = _leaf(rng, shape, low=0.0, high=1.0)
    phi_t = _leaf(rng, shape, low=0.0, high=1.0)
    w = _leaf(rng, (2,), low=0.1, high=0.9)
    f = lambda: (transport(psi_s, psi_t, phi_s, phi_t, w),)
    inputs = {"psi_s": psi_s, "psi_t": psi_t, "phi_s": phi_s, "phi_t": phi_t, "weights": w}
    return _projected(f, lambda: [o.shape for o in f()], rng), inputs


def tiny_config(mode: str = "none", cbam: bool = False) -> TransporterConfig:
    return TransporterConfig(in_channels=2, image_size=8, k=2, feature_channels=2, width=2,
                             strides=(2, 1, 1, 1, 1, 1), first_kernel=3, attention_mode=mode,
                             cbam=cbam, sigma_init=0.3, dtype="float64")


def case_training_forward(rng):
    mode = ("none", "transport_weight", "learned_sigma")[int(rng.integers(0, 3))]
    model = TransporterModel(tiny_config(mode), seed=int(rng.integers(0, 2 ** 31)))
    src = rng.uniform(0, 1, size=(2, 2, 8, 8))
    tgt = rng.uniform(0, 1, size=(2, 2, 8, 8))
    # the source branch is a constant of the loss: freeze it at the unperturbed parameters
    psi_s, ks = source_branch(model, src)
    f = lambda: target_loss(model, psi_s, ks, tgt)[0]
    return f, dict(model.parameters())


CASES: Dict[str, Callable] = {
    "conv2d": case_conv,
    "batchnorm2d": case_batchnorm,
    "spatial_softmax": case_spatial_softmax,
    "gaussian_render": case_gaussian_render,
    "bilinear_upsample": case_upsample,
    "cbam": case_cbam,
    "transport": case_transport,
    "training_forward": case_training_forward,
}


@dataclass
class SuiteResult:
    results: List[GradCheckResult]
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tol) for r in self.results)


def run_suite(n_instances: int = 20, seed: int = 0, tol: float = 1e-3, h: float = 1e-3,
              names=None, guard_branches: bool = True) -> SuiteResult:
    """Worst relative error per op over ``n_instances`` seeded random instances.

    Entries whose difference stencil crosses a ReLU or max kink are skipped
    (and counted) unless ``guard_branches`` is False.
    """
    t0 = time.perf_counter()
    out = []
    for name, case in CASES.items():
        if names is not None and name not in names:
            continue
        worst, count, skipped = 0.0, 0, 0
        per_elem = 8 if name == "training_forward" else 64
        for i in range(n_instances):
            rng = np.random.default_rng([seed, i, len(name)])
            fn, inputs = case(rng)
            r = check_gradients(fn, inputs, h=h, max_elements=per_elem, rng=rng, name=name,
                                guard_branches=guard_branches)
            worst = max(worst, r.max_rel_error)
            count += r.n_checked
            skipped += r.n_skipped
        out.append(GradCheckResult(name, worst, count, skipped))
    return SuiteResult(out, time.perf_counter() - t0, tol)
