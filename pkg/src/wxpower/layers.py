"""Trainable layers and initialization on top of the tensor tape.

Layers are plain records of parameter tensors; forward functions take the
layer, the input, and (where behaviour differs) the mode string "train" or
"eval". Batchnorm registers a fused op with its derived backward rule so
the whole layer costs one tape record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1

MODES = ("train", "eval")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class Rng:
    """Deterministic random source (PCG64) with dtype-aware draws.

    Draw order is part of every caller's contract: models consume the
    stream in construction order, dropout per forward call.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        if not isinstance(seed, int) or seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        out = self._gen.standard_normal(size=tuple(shape), dtype=dtype)
        if std != 1.0:
            out *= std  # in-place keeps the requested dtype
        return out

    def uniform(self, shape, low: float, high: float, dtype=np.float32) -> np.ndarray:
        # Generator.uniform has no dtype parameter; build from random().
        # In-place scaling keeps peak memory at one array for huge draws.
        u = self._gen.random(size=tuple(shape), dtype=dtype)
        u *= high - low
        u += low
        return u

    def random(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.random(size=tuple(shape), dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def kaiming_init(shape, fan_in: int, rng: Rng, dtype=np.float32) -> T.Tensor:
    """Normal draw with std sqrt(2/fan_in), for layers feeding a relu."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    return T.Tensor(rng.normal(shape, std=std, dtype=dtype), requires_grad=True)


def uniform_init(shape, bound: float, rng: Rng, dtype=np.float32) -> T.Tensor:
    """Uniform draw on [-bound, +bound]."""
    if bound <= 0:
        raise ValueError(f"bound must be positive, got {bound}")
    return T.Tensor(rng.uniform(shape, -bound, bound, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# fully connected

@dataclass
class LinearLayer:
    weight: T.Tensor  # (out_features, in_features)
    bias: T.Tensor    # (out_features,)

    @classmethod
    def new(cls, in_features: int, out_features: int, rng: Rng,
            dtype=np.float32) -> "LinearLayer":
        bound = 1.0 / float(np.sqrt(in_features))
        weight = uniform_init((out_features, in_features), bound, rng, dtype)
        bias = T.create([out_features], 0.0, dtype=dtype, requires_grad=True)
        return cls(weight, bias)


def linear_forward(layer: LinearLayer, x: T.Tensor) -> T.Tensor:
    return T.linear(x, layer.weight, layer.bias)


# ---------------------------------------------------------------------------
# dropout

@dataclass(frozen=True)
class DropoutSpec:
    p: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {self.p}")


def dropout(x: T.Tensor, spec: DropoutSpec, mode: str, rng: Rng | None) -> T.Tensor:
    """Inverted dropout: train scales kept entries by 1/(1-p); eval is identity."""
    _check_mode(mode)
    if mode == "eval" or spec.p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an Rng")
    keep = (rng.random(x.shape, dtype=x.dtype) >= spec.p)
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - spec.p))
    return T.mul(x, T.Tensor(mask))


# ---------------------------------------------------------------------------
# batch normalization over NCHW channels

class BatchNorm2d:
    """Per-channel normalization with learnable affine and running stats.

    gamma/beta are parameters; running_mean/running_var are buffers
    (saved with checkpoints, never trained, never counted as parameters).
    Batch statistics use the biased variance; the running estimates blend
    in each batch with `momentum`.
    """

    def __init__(self, num_features: int, eps: float = BATCHNORM_EPS,
                 momentum: float = BATCHNORM_MOMENTUM, dtype=np.float32):
        if num_features <= 0:
            raise ValueError(f"num_features must be positive, got {num_features}")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.num_features = num_features
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = T.create([num_features], 1.0, dtype=dtype, requires_grad=True)
        self.beta = T.create([num_features], 0.0, dtype=dtype, requires_grad=True)
        self.running_mean = T.create([num_features], 0.0, dtype=dtype)
        self.running_var = T.create([num_features], 1.0, dtype=dtype)


def batchnorm2d_forward(bn: BatchNorm2d, x: T.Tensor, mode: str) -> T.Tensor:
    _check_mode(mode)
    if x.data.ndim != 4 or x.shape[1] != bn.num_features:
        raise T.ShapeError(
            f"batchnorm2d: need (N,{bn.num_features},H,W), got {x.shape}")
    xd = x.data
    n, c, h, w = xd.shape
    gamma, beta = bn.gamma, bn.beta
    gd = gamma.data[None, :, None, None]

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise T.ShapeError("batchnorm2d train mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # biased
        inv = 1.0 / np.sqrt(var + xd.dtype.type(bn.eps))
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        mom = xd.dtype.type(bn.momentum)
        bn.running_mean.data[:] = (1 - mom) * bn.running_mean.data + mom * mu
        bn.running_var.data[:] = (1 - mom) * bn.running_var.data + mom * var

        ga = gamma.data

        def rule(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            coeff = (ga * inv / g.dtype.type(m))[None, :, None, None]
            dx = coeff * (g.dtype.type(m) * g
                          - dbeta[None, :, None, None]
                          - xhat * dgamma[None, :, None, None])
            return (dx, dgamma, dbeta)

        return T.record("batchnorm2d", (x, gamma, beta), out, rule)

    # eval: normalize with frozen running stats; affine map per channel
    inv = 1.0 / np.sqrt(bn.running_var.data + xd.dtype.type(bn.eps))
    xhat = (xd - bn.running_mean.data[None, :, None, None]) * inv[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]
    ga = gamma.data

    def rule_eval(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dx = g * (ga * inv)[None, :, None, None]
        return (dx, dgamma, dbeta)

    return T.record("batchnorm2d", (x, gamma, beta), out, rule_eval)
