"""Dense layers with hand-written forward/backward passes.

Only what the quantizer needs: affine maps, 1-D batch normalization, ReLU and
row softmax, stacked as ``affine -> batchnorm -> relu`` blocks.  All arrays are
plain numpy, row-major, shape ``(batch, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class InvalidBatchError(ValueError):
    pass


def _check_cols(x: np.ndarray, expected: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != expected:
        raise ShapeError(f"{what}: expected (B, {expected}) input, got {x.shape}")


@dataclass
class AffineLayer:
    weight: np.ndarray  # (d_in, d_out)
    bias: np.ndarray  # (d_out,)
    weight_grad: np.ndarray = field(default=None, repr=False)
    bias_grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weight)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
        return cls(w, np.zeros(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def params(self):
        yield "weight", self.weight, self.weight_grad
        yield "bias", self.bias, self.bias_grad


def affine_forward(x: np.ndarray, layer: AffineLayer) -> np.ndarray:
    _check_cols(x, layer.d_in, "affine_forward")
    return x @ layer.weight + layer.bias


def affine_backward(x: np.ndarray, layer: AffineLayer, out_grad: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into ``layer`` and return d loss / d x."""
    _check_cols(x, layer.d_in, "affine_backward")
    if out_grad.shape != (x.shape[0], layer.d_out):
        raise ShapeError(f"affine_backward: out_grad shape {out_grad.shape} "
                         f"does not match ({x.shape[0]}, {layer.d_out})")
    layer.weight_grad += x.T @ out_grad
    layer.bias_grad += out_grad.sum(axis=0)
    return out_grad @ layer.weight.T


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    training: bool = True
    gamma_grad: np.ndarray = field(default=None, repr=False)
    beta_grad: np.ndarray = field(default=None, repr=False)
    _cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.gamma_grad is None:
            self.gamma_grad = np.zeros_like(self.gamma)
        if self.beta_grad is None:
            self.beta_grad = np.zeros_like(self.beta)

    @classmethod
    def init(cls, d: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1, epsilon: float = 1e-5):
        return cls(
            gamma=np.ones(d, dtype=dtype),
            beta=np.zeros(d, dtype=dtype),
            running_mean=np.zeros(d, dtype=dtype),
            running_var=np.ones(d, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def params(self):
        yield "gamma", self.gamma, self.gamma_grad
        yield "beta", self.beta, self.beta_grad

    def buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer) -> np.ndarray:
    """Normalize each feature.

    Train mode uses the (biased) batch variance for normalization and folds the
    unbiased estimate into the running statistics; eval mode is a fixed affine
    map built from the running statistics.
    """
    _check_cols(x, layer.dim, "batchnorm_forward")
    if not layer.training:
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
        scale = (layer.gamma * inv_std).astype(x.dtype)
        shift = (layer.beta - layer.running_mean * layer.gamma * inv_std).astype(x.dtype)
        return x * scale + shift

    n = x.shape[0]
    if n < 2:
        raise InvalidBatchError("batchnorm in train mode needs at least 2 rows")
    mean = x.mean(axis=0)
    centered = x - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    x_hat = centered * inv_std
    layer._cache = (x_hat, inv_std)

    m = layer.momentum
    layer.running_mean *= 1 - m
    layer.running_mean += m * mean
    layer.running_var *= 1 - m
    layer.running_var += m * var * (n / (n - 1))
    return x_hat * layer.gamma + layer.beta


def batchnorm_backward(layer: BatchNormLayer, out_grad: np.ndarray) -> np.ndarray:
    """Backward pass for the most recent train-mode forward."""
    if layer._cache is None:
        raise RuntimeError("batchnorm_backward called without a train-mode forward")
    x_hat, inv_std = layer._cache
    if out_grad.shape != x_hat.shape:
        raise ShapeError(f"batchnorm_backward: got {out_grad.shape}, expected {x_hat.shape}")
    n = x_hat.shape[0]
    layer.gamma_grad += (out_grad * x_hat).sum(axis=0)
    layer.beta_grad += out_grad.sum(axis=0)
    g = out_grad * layer.gamma
    return (inv_std / n) * (n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
    return np.where(x > 0, out_grad, 0).astype(out_grad.dtype, copy=False)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax over the last axis."""
    return probs * (out_grad - (out_grad * probs).sum(axis=-1, keepdims=True))


class MLP:
    """``[affine -> batchnorm -> relu] * len(hidden)`` followed by an output affine.

    ``forward`` caches what ``backward`` needs, so calls must alternate
    forward/backward during training.
    """

    def __init__(self, d_in: int, hidden: Sequence[int], d_out: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.hidden = tuple(int(h) for h in hidden)
        self.blocks: list[tuple[AffineLayer, BatchNormLayer]] = []
        width = d_in
        for h in self.hidden:
            self.blocks.append((AffineLayer.init(width, h, rng, dtype), BatchNormLayer.init(h, dtype)))
            width = h
        self.out = AffineLayer.init(width, d_out, rng, dtype)
        self._acts: list[tuple[np.ndarray, np.ndarray]] = []
        self._last_in: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.blocks[0][0].d_in if self.blocks else self.out.d_in

    @property
    def d_out(self) -> int:
        return self.out.d_out

    def train(self, mode: bool = True) -> None:
        for _, bn in self.blocks:
            bn.training = mode

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._acts = []
        h = x
        for aff, bn in self.blocks:
            pre = batchnorm_forward(affine_forward(h, aff), bn)
            self._acts.append((h, pre))
            h = relu(pre)
        self._last_in = h
        return affine_forward(h, self.out)

    def backward(self, out_grad: np.ndarray) -> np.ndarray:
        g = affine_backward(self._last_in, self.out, out_grad)
        for (aff, bn), (inp, pre) in zip(reversed(self.blocks), reversed(self._acts)):
            g = relu_backward(pre, g)
            g = batchnorm_backward(bn, g)
            g = affine_backward(inp, aff, g)
        return g

    def params(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for i, (aff, bn) in enumerate(self.blocks):
            for name, p, g in aff.params():
                yield f"block{i}.affine.{name}", p, g
            for name, p, g in bn.params():
                yield f"block{i}.bn.{name}", p, g
        for name, p, g in self.out.params():
            yield f"out.{name}", p, g

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, (_, bn) in enumerate(self.blocks):
            for name, b in bn.buffers():
                yield f"block{i}.bn.{name}", b


def gradient_check(loss_and_grads: Callable[[], tuple[float, Sequence[np.ndarray]]],
                   params: Sequence[np.ndarray], epsilon: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_and_grads`` must evaluate the loss at the current contents of
    ``params`` (which are perturbed in place) and return the analytic gradients
    in the same order.  Everything should be float64.
    """
    _, analytic = loss_and_grads()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_and_grads()[0]
            flat[i] = orig - epsilon
            down = loss_and_grads()[0]
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
