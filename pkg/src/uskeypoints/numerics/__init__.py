"""Tensor arithmetic, reverse-mode differentiation, layers and Adam."""

from .tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    concat,
    exp,
    log,
    matmul,
    mul,
    no_grad,
    relu,
    sigmoid,
    softplus,
    stack,
    sub,
    tmax,
    tmean,
    tsum,
)
from .layers import (
    CBAM,
    BatchNorm2d,
    Conv2d,
    LayerSpec,
    batchnorm2d,
    bilinear_upsample,
    cbam_block,
    conv2d,
    gaussian_render,
    mse_loss,
    softmax2d,
    spatial_softmax,
)
from .optim import AdamState, adam_step
from .gradcheck import GradCheckResult, check_gradients, relative_error
from .io import decode_t32, encode_t32, load_archive, load_t32, save_archive, save_t32

__all__ = [name for name in dir() if not name.startswith("_")]
