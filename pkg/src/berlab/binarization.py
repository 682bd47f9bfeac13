"""Binary quantization, bit packing and XNOR/popcount kernels.

Bit convention: bit 1 stores +1, bit 0 stores -1. ``sign(0)`` is +1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_core import DTYPE, ShapeError, _pair, conv_output_size

WORD_BITS = 64


class BinarizeMode(str, Enum):
    DETERMINISTIC = "deterministic_sign"
    STOCHASTIC = "stochastic"


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a flat 0/1 uint8 vector into little-endian uint64 words, zero padded."""
    packed = np.packbits(bits, bitorder="little")
    nbytes = -(-bits.size // WORD_BITS) * 8
    if packed.size < nbytes:
        packed = np.concatenate([packed, np.zeros(nbytes - packed.size, np.uint8)])
    return packed.view("<u8").copy()


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack each row of a 2-d 0/1 array separately -> (rows, words)."""
    rows, k = bits.shape
    words = -(-k // WORD_BITS)
    packed = np.packbits(bits, axis=1, bitorder="little")
    if packed.shape[1] < words * 8:
        packed = np.pad(packed, ((0, 0), (0, words * 8 - packed.shape[1])))
    return np.ascontiguousarray(packed).view("<u8")


@dataclass(frozen=True, eq=False)
class BitTensor:
    """A {-1, +1} tensor stored one bit per element in uint64 words.

    Elements are packed in row-major order; pad bits in the last word are zero,
    so two BitTensors are equal exactly when their shapes and words are.
    """

    shape: tuple
    words: np.ndarray

    @property
    def bit_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BitTensor":
        """Build from a 0/1 array (1 means +1)."""
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(tuple(bits.shape), _pack_bits(bits.reshape(-1)))

    @classmethod
    def pack(cls, values: np.ndarray) -> "BitTensor":
        """Pack a tensor whose entries are all exactly -1 or +1."""
        values = np.asarray(values)
        if not np.all((values == 1) | (values == -1)):
            raise ValueError("BitTensor.pack requires every entry to be -1 or +1")
        return cls.from_bits(values > 0)

    def bits(self) -> np.ndarray:
        """Unpacked 0/1 uint8 array of ``shape``."""
        flat = np.unpackbits(self.words.view(np.uint8), count=self.bit_count, bitorder="little")
        return flat.reshape(self.shape)

    def unpack(self, dtype=DTYPE) -> np.ndarray:
        """Unpacked {-1, +1} array of ``shape``."""
        b = self.bits().astype(dtype)
        b *= 2
        b -= 1
        return b

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __repr__(self) -> str:
        return f"BitTensor(shape={self.shape}, words={self.words.size})"


def pack(values: np.ndarray) -> BitTensor:
    return BitTensor.pack(values)


def unpack(bt: BitTensor, dtype=DTYPE) -> np.ndarray:
    return bt.unpack(dtype)


def hard_sigmoid(x):
    """``max(0, min(1, (x + 1) / 2))``."""
    return np.clip((np.asarray(x) + 1) / 2, 0, 1)


def binarize(x: np.ndarray, mode: BinarizeMode | str = BinarizeMode.DETERMINISTIC,
             rng: np.random.Generator | None = None) -> BitTensor:
    """Quantize a real tensor to a BitTensor.

    Deterministic mode takes the sign with ``sign(0) = +1``. Stochastic mode
    returns +1 with probability ``hard_sigmoid(x)``, consuming one uniform draw
    per element in row-major order.
    """
    x = np.asarray(x)
    mode = BinarizeMode(mode)
    if mode is BinarizeMode.DETERMINISTIC:
        return BitTensor.from_bits(x >= 0)
    if rng is None:
        raise ValueError("stochastic binarization requires an rng")
    u = rng.random(x.size).reshape(x.shape)
    return BitTensor.from_bits(u < hard_sigmoid(x))


def ste_backward(grad_out: np.ndarray, x_pre: np.ndarray) -> np.ndarray:
    """Straight-through gradient gated to ``|x_pre| <= 1`` (closed interval)."""
    if grad_out.shape != x_pre.shape:
        raise ShapeError(f"ste_backward shape mismatch: grad {grad_out.shape} vs input {x_pre.shape}")
    return grad_out * (np.abs(x_pre) <= 1)


def binarize_weights(latent: np.ndarray, scaling: bool = False):
    """Sign-binarize latent weights; optional per-output-filter scale = mean |w|.

    Returns ``(BitTensor, scale)`` where ``scale`` is None unless ``scaling``.
    """
    latent = np.asarray(latent)
    bits = BitTensor.from_bits(latent >= 0)
    scale = None
    if scaling:
        scale = np.abs(latent).reshape(latent.shape[0], -1).mean(axis=1).astype(DTYPE)
    return bits, scale


def clip_latent(latent: np.ndarray) -> np.ndarray:
    """Clamp latent weights to [-1, 1] in place after an optimizer step."""
    return np.clip(latent, -1, 1, out=latent)


# ---------------------------------------------------------------------------
# XNOR + popcount kernels
# ---------------------------------------------------------------------------

def _popcount_dot(a_words: np.ndarray, w_words: np.ndarray, k: int, chunk: int = 4096) -> np.ndarray:
    """``k - 2 * popcount(a XOR w)`` for every (row of a, row of w) pair."""
    out = np.empty((a_words.shape[0], w_words.shape[0]), dtype=np.int64)
    for s in range(0, a_words.shape[0], chunk):
        x = a_words[s:s + chunk, None, :] ^ w_words[None, :, :]
        out[s:s + chunk] = k - 2 * np.bitwise_count(x).sum(axis=-1, dtype=np.int64)
    return out


def xnor_dense(act: BitTensor, weights: BitTensor) -> np.ndarray:
    """Binary fully connected layer: act (N, D), weights (M, D) -> (N, M) integers."""
    if not isinstance(act, BitTensor) or not isinstance(weights, BitTensor):
        raise TypeError("xnor_dense operates on BitTensor operands only")
    if len(act.shape) != 2 or len(weights.shape) != 2 or act.shape[1] != weights.shape[1]:
        raise ShapeError(f"xnor_dense shape mismatch: act {act.shape} vs weights {weights.shape}")
    k = act.shape[1]
    return _popcount_dot(_pack_rows(act.bits()), _pack_rows(weights.bits()), k)


def xnor_conv2d(act: BitTensor, weights: BitTensor, stride=1, padding=0) -> np.ndarray:
    """Pad-free binary cross-correlation via XNOR and popcount.

    Each output equals ``K - 2 * popcount(a XOR w)`` with ``K = Cin*Kh*Kw``,
    identical to the real convolution of the unpacked +-1 tensors.
    """
    if not isinstance(act, BitTensor) or not isinstance(weights, BitTensor):
        raise TypeError("xnor_conv2d operates on BitTensor operands only")
    if _pair(padding) != (0, 0):
        raise ValueError("binary convolutions are pad-free; padding must be 0")
    if len(act.shape) != 4 or len(weights.shape) != 4 or act.shape[1] != weights.shape[1]:
        raise ShapeError(f"xnor_conv2d shape mismatch: act {act.shape} vs weights {weights.shape}")
    n, c, h, w = act.shape
    cout, _, kh, kw = weights.shape
    if h < kh or w < kw:
        raise ShapeError(f"xnor_conv2d kernel larger than input: act {act.shape} vs weights {weights.shape}")
    sh, sw = _pair(stride)
    ho, wo = conv_output_size(h, kh, sh, 0), conv_output_size(w, kw, sw, 0)
    win = sliding_window_view(act.bits(), (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = _popcount_dot(_pack_rows(patches), _pack_rows(weights.bits().reshape(cout, -1)), c * kh * kw)
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
