"""Neural multi-codebook quantizer: encoder heads, codebooks, decoder.

The encoder maps x to M heads living in learned spaces; head m is scored
against codebook m by dot product divided by a per-codebook temperature.  The
decoder sums the selected codewords (one per codebook) and maps the sum back
to the input space.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import DEFAULT_DTYPE, MLP, ShapeError, log_softmax_rows, softmax_backward, softmax_rows

CHECKPOINT_MAGIC = b"UNQ1"


class InvalidCodeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def gumbel_noise(shape, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Standard Gumbel samples ``-log(-log(U))``."""
    u = rng.random(shape)
    tiny = np.finfo(np.float64).tiny
    u = np.clip(u, tiny, 1.0 - 1e-16)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(logits: np.ndarray, noise: np.ndarray, hard: bool = True):
    """Relaxed (and optionally discretized) sample over the last axis.

    Returns ``(y, y_soft)``.  With ``hard`` the forward value ``y`` is the
    one-hot argmax of ``log p + noise`` (lowest index on ties); the backward
    pass always goes through ``y_soft``.
    """
    scores = log_softmax_rows(logits) + noise
    y_soft = softmax_rows(scores)
    if not hard:
        return y_soft, y_soft
    idx = scores.argmax(axis=-1)
    y = np.zeros_like(y_soft)
    np.put_along_axis(y, idx[..., None], 1, axis=-1)
    return y, y_soft


def gumbel_softmax_backward(y_soft: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits, straight through the hard argmax."""
    # The log-softmax in front of the noise adds ``-p * sum(d)``, and the softmax
    # VJP already sums to zero along the row, so that term vanishes.
    return softmax_backward(y_soft, out_grad)


@dataclass
class TrainPass:
    """Everything a train-mode forward leaves behind for the backward pass."""
    x: np.ndarray
    heads: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    y: np.ndarray
    y_soft: np.ndarray
    reconstruction: np.ndarray


class UnqModel:
    def __init__(self, D: int, M: int, K: int = 256, d_code: int = 256,
                 encoder_hidden: Sequence[int] = (1024, 1024),
                 decoder_hidden: Sequence[int] = (1024, 1024),
                 seed: int | np.random.Generator = 0, dtype=DEFAULT_DTYPE):
        if min(D, M, K, d_code) <= 0:
            raise ValueError("D, M, K and d_code must be positive")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.D, self.M, self.K, self.d_code = int(D), int(M), int(K), int(d_code)
        self.dtype = np.dtype(dtype)
        self.encoder = MLP(D, encoder_hidden, M * d_code, rng, dtype)
        self.decoder = MLP(d_code, decoder_hidden, D, rng, dtype)
        self.codebooks = rng.normal(0.0, 1.0 / np.sqrt(d_code), size=(M, K, d_code)).astype(dtype)
        self.log_tau = np.zeros(M, dtype=dtype)
        self.codebooks_grad = np.zeros_like(self.codebooks)
        self.log_tau_grad = np.zeros_like(self.log_tau)
        self.training = False
        self.train(False)

    # -- bookkeeping -------------------------------------------------------

    @property
    def encoder_hidden(self) -> tuple[int, ...]:
        return self.encoder.hidden

    @property
    def decoder_hidden(self) -> tuple[int, ...]:
        return self.decoder.hidden

    @property
    def tau(self) -> np.ndarray:
        return np.exp(self.log_tau)

    def train(self, mode: bool = True) -> "UnqModel":
        self.training = mode
        self.encoder.train(mode)
        self.decoder.train(mode)
        return self

    def eval(self) -> "UnqModel":
        return self.train(False)

    @contextlib.contextmanager
    def inference(self):
        """Temporarily switch to eval mode."""
        prev = self.training
        self.train(False)
        try:
            yield self
        finally:
            self.train(prev)

    def params(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, p, g in self.encoder.params():
            yield "encoder." + name, p, g
        yield "codebooks", self.codebooks, self.codebooks_grad
        yield "log_tau", self.log_tau, self.log_tau_grad
        for name, p, g in self.decoder.params():
            yield "decoder." + name, p, g

    def zero_grad(self) -> None:
        for _, _, g in self.params():
            g.fill(0)

    def _as_input(self, x, width: int, what: str) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != width:
            raise ShapeError(f"{what}: expected (B, {width}) input, got {x.shape}")
        return x

    # -- encoder side ------------------------------------------------------

    def encode_heads(self, x) -> np.ndarray:
        """``net(x)`` reshaped to ``(B, M, d_code)``; uses the current mode."""
        x = self._as_input(x, self.D, "encode_heads")
        return self.encoder.forward(x).reshape(-1, self.M, self.d_code)

    def codeword_logits(self, heads: np.ndarray, use_temperature: bool = True) -> np.ndarray:
        """``<heads[b, m], c_mk> / tau_m`` with shape ``(B, M, K)``."""
        dots = np.einsum("bmd,mkd->bmk", heads, self.codebooks)
        if use_temperature:
            dots = dots / self.tau[None, :, None].astype(dots.dtype)
        return dots

    def hard_encode(self, x, batch_size: int = 4096) -> np.ndarray:
        """Deterministic codes, argmax per codebook, lowest index on ties."""
        x = self._as_input(x, self.D, "hard_encode")
        out = np.empty((x.shape[0], self.M), dtype=np.int64)
        with self.inference():
            for s in range(0, x.shape[0], batch_size):
                heads = self.encode_heads(x[s:s + batch_size])
                # tau > 0 so scaling cannot change the argmax; skip it
                out[s:s + batch_size] = self.codeword_logits(heads, use_temperature=False).argmax(axis=-1)
        return out

    def gumbel_encode(self, x, rng: np.random.Generator, hard: bool = True,
                      noise: np.ndarray | None = None) -> np.ndarray:
        """One (relaxed) one-hot per codebook, shape ``(B, M, K)``."""
        logits = self.codeword_logits(self.encode_heads(x))
        if noise is None:
            noise = gumbel_noise(logits.shape, rng, self.dtype)
        y, _ = gumbel_softmax(logits, noise, hard=hard)
        return y

    # -- decoder side ------------------------------------------------------

    def codeword_sum(self, codes_or_onehots) -> np.ndarray:
        arr = np.asarray(codes_or_onehots)
        if arr.ndim == 3:
            if arr.shape[1:] != (self.M, self.K):
                raise ShapeError(f"one-hots must be (B, {self.M}, {self.K}), got {arr.shape}")
            return np.einsum("bmk,mkd->bd", arr.astype(self.dtype, copy=False), self.codebooks)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.M:
            raise ShapeError(f"codes must be (B, {self.M}), got {arr.shape}")
        codes = arr.astype(np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.K):
            raise InvalidCodeError(f"code indices must lie in [0, {self.K})")
        total = np.zeros((codes.shape[0], self.d_code), dtype=self.dtype)
        for m in range(self.M):
            total += self.codebooks[m][codes[:, m]]
        return total

    def decode(self, codes_or_onehots, batch_size: int = 4096) -> np.ndarray:
        """Reconstruct in the input space from codes ``(B, M)`` or one-hots ``(B, M, K)``."""
        summed = self.codeword_sum(codes_or_onehots)
        out = np.empty((summed.shape[0], self.D), dtype=self.dtype)
        with self.inference():
            for s in range(0, summed.shape[0], batch_size):
                out[s:s + batch_size] = self.decoder.forward(summed[s:s + batch_size])
        return out

    # -- training pass -----------------------------------------------------

    def train_forward(self, x, noise: np.ndarray, hard: bool = True,
                      decode: bool = True) -> TrainPass:
        x = self._as_input(x, self.D, "train_forward")
        heads = self.encode_heads(x)
        logits = self.codeword_logits(heads)
        probs = softmax_rows(logits)
        y, y_soft = gumbel_softmax(logits, noise, hard=hard)
        recon = self.decoder.forward(self.codeword_sum(y)) if decode else None
        return TrainPass(x, heads, logits, probs, y, y_soft, recon)

    def train_backward(self, tp: TrainPass, recon_grad: np.ndarray | None,
                       logits_grad: np.ndarray | None) -> None:
        """Accumulate parameter gradients for one :meth:`train_forward`.

        ``recon_grad`` is d loss / d reconstruction and ``logits_grad`` collects
        any terms that act on the logits directly (regularizer, triplet).
        """
        d_logits = np.zeros_like(tp.logits) if logits_grad is None else logits_grad.astype(self.dtype, copy=True)
        if recon_grad is not None:
            d_sum = self.decoder.backward(recon_grad.astype(self.dtype, copy=False))
            self.codebooks_grad += np.einsum("bmk,bd->mkd", tp.y, d_sum)
            d_y = np.einsum("bd,mkd->bmk", d_sum, self.codebooks)
            d_logits += gumbel_softmax_backward(tp.y_soft, d_y)

        tau = self.tau[None, :, None].astype(self.dtype)
        d_dots = d_logits / tau
        self.log_tau_grad -= (d_logits * tp.logits).sum(axis=(0, 2))
        self.codebooks_grad += np.einsum("bmk,bmd->mkd", d_dots, tp.heads)
        d_heads = np.einsum("bmk,mkd->bmd", d_dots, self.codebooks)
        self.encoder.backward(d_heads.reshape(tp.x.shape[0], -1))


def assignment_probs(logits: np.ndarray) -> np.ndarray:
    """Per-codebook softmax over the K codewords."""
    return softmax_rows(logits)


def joint_code_prob(probs: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Probability of a full code tuple: product of per-codebook entries."""
    picked = np.take_along_axis(probs, np.asarray(codes)[..., None], axis=-1)[..., 0]
    return picked.prod(axis=-1)


# -- checkpoints ------------------------------------------------------------

def _mlp_arrays(mlp: MLP):
    for aff, bn in mlp.blocks:
        yield aff.weight
        yield aff.bias
        yield bn.gamma
        yield bn.beta
        yield bn.running_mean
        yield bn.running_var
    yield mlp.out.weight
    yield mlp.out.bias


def state_arrays(model: UnqModel) -> list[np.ndarray]:
    """All persisted arrays in checkpoint order.

    Encoder blocks (weight, bias, gamma, beta, running mean, running var), the
    encoder output affine, codebooks ``(M, K, d_code)``, log temperatures, then
    the decoder in the same layout as the encoder.
    """
    return [*_mlp_arrays(model.encoder), model.codebooks, model.log_tau, *_mlp_arrays(model.decoder)]


def save_checkpoint(model: UnqModel, path) -> None:
    header = [model.D, model.M, model.K, model.d_code,
              len(model.encoder_hidden), *model.encoder_hidden,
              len(model.decoder_hidden), *model.decoder_hidden]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(f"<{len(header)}I", *header))
        for arr in state_arrays(model):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=DEFAULT_DTYPE) -> UnqModel:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take_u32(n: int):
        nonlocal pos
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated header at byte {pos}")
        vals = struct.unpack_from(f"<{n}I", data, pos)
        pos += 4 * n
        return vals

    D, M, K, d_code, n_enc = take_u32(5)
    enc = take_u32(n_enc)
    (n_dec,) = take_u32(1)
    dec = take_u32(n_dec)
    model = UnqModel(D, M, K, d_code, enc, dec, seed=0, dtype=dtype)
    for arr in state_arrays(model):
        nbytes = arr.size * 4
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated parameter blob at byte {pos}")
        arr[...] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=pos).reshape(arr.shape)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return model
