"""Network layers: 3x3 convolution, 2x2 max pooling, batch normalization,
leaky ReLU, fully connected, and the feature reweighting (FRW) layer.

The ``*_forward`` / functional entry points take tensors explicitly so they
can be gradient-checked in isolation; the classes only own parameters.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, add, matmul, mul

LRELU_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# ----------------------------------------------------------------------------
# functional primitives


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: bad shapes input {x.shape}, weight {weight.shape}")
    B, C, H, W = x.shape
    O = weight.shape[0]
    if weight.shape[1] != C:
        raise DimensionError(f"conv2d: weight expects {weight.shape[1]} input channels, input has {C}")
    if bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {O} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # im2col laid out as (C, 3*3, B, H, W) so each kernel offset is one block copy
    cols = np.empty((C, 9, B, H, W), dtype=x.dtype)
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k] = xp[:, :, di:di + H, dj:dj + W].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * 9, B * H * W)
    wmat = weight.data.reshape(O, C * 9)
    out = (wmat @ cols).reshape(O, B, H, W).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def backward(g):
        gcol = g.transpose(1, 0, 2, 3).reshape(O, B * H * W)
        gw = (gcol @ cols.T).reshape(weight.shape)
        gb = gcol.sum(axis=1)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gcol).reshape(C, 9, B, H, W)
            gxp = np.zeros_like(xp)
            for k in range(9):
                di, dj = divmod(k, 3)
                gxp[:, :, di:di + H, dj:dj + W] += dcols[:, k].transpose(1, 0, 2, 3)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.  Odd extents are padded (ceil mode);
    gradient goes to the first row-major maximum of each window."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise DimensionError(f"max_pool2d needs H, W >= 2, got {H}x{W}")
    Ho, Wo = -(-H // 2), -(-W // 2)
    xp = x.data
    if (Ho * 2, Wo * 2) != (H, W):
        xp = np.full((B, C, Ho * 2, Wo * 2), -np.inf, dtype=x.dtype)
        xp[:, :, :H, :W] = x.data
    win = xp.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((B, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * 2, Wo * 2)
        return (gx[:, :, :H, :W],)

    return Tensor.from_op(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = LRELU_SLOPE) -> Tensor:
    if not 0 < slope < 1:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data >= 0, x.dtype.type(1), x.dtype.type(slope))
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization for ``B x C`` or ``B x C x H x W`` inputs.

    In training mode ``running_mean``/``running_var`` are updated in place by
    an exponential moving average (``momentum`` weights the old value).
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects rank 2 or 4 input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if not training:
        scale = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * scale
        out = xhat * g_ + b_

        def backward_eval(g):
            return g * g_ * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor.from_op(out, (x, gamma, beta), backward_eval)

    if x.shape[0] < 2:
        raise ContractError("batch_norm in training mode needs a batch of at least 2")
    n = x.size // C
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv_std
    out = xhat * g_ + b_
    running_mean *= momentum
    running_mean += (1 - momentum) * mu.reshape(C)
    running_var *= momentum
    running_var += (1 - momentum) * var.reshape(C) * (n / max(n - 1, 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def fc_forward(weight: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped ``in x out``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"fc: input {x.shape}, weight {weight.shape}, bias {bias.shape} disagree")
    return add(matmul(x, weight), bias)


def frw_forward(w_frw: Tensor, x: Tensor) -> Tensor:
    """Reweight every embedding dimension: ``x * w_frw`` row by row."""
    if x.ndim != 2 or w_frw.shape != (x.shape[1],):
        raise DimensionError(f"frw: weights {w_frw.shape} do not match embeddings {x.shape}")
    return mul(x, w_frw)


# ----------------------------------------------------------------------------
# parameter holders


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class ConvLayer:
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32, name: str = "conv"):
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9, dtype), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def conv_forward(layer: ConvLayer, x: Tensor) -> Tensor:
    return layer(x)


def maxpool_forward(x: Tensor) -> Tensor:
    return max_pool2d(x)


class BatchNormLayer:
    def __init__(self, channels: int, dtype=np.float32, eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                 name: str = "bn"):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self.training = True
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


def batchnorm_forward(layer: BatchNormLayer, x: Tensor) -> Tensor:
    return layer(x)


class FCLayer:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32, name: str = "fc"):
        self.weight = Tensor(he_normal(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return fc_forward(self.weight, self.bias, x)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class FRWLayer:
    """Learned per-dimension embedding weights.

    Initialized to the constant ``sqrt(2C/D)`` so that half the squared norm
    equals the constraint target ``C`` from the first step.
    """

    def __init__(self, dim: int, norm_target: float = 200.0, dtype=np.float32, name: str = "frw"):
        value = math.sqrt(2.0 * norm_target / dim)
        self.weight = Tensor(np.full(dim, value, dtype=dtype), requires_grad=True, name=f"{name}.weight")

    def __call__(self, x: Tensor) -> Tensor:
        return frw_forward(self.weight, x)

    def parameters(self) -> list[Tensor]:
        return [self.weight]
