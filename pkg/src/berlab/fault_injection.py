"""Write-error channel for stored binary activations.

A -1 (AP) bit survives a write with probability ``p_minus1`` and a +1 (P)
bit with probability ``p_plus1``; otherwise the stored bit is inverted.
Errors are re-sampled on every training forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binarization import BitTensor, _pack_bits


@dataclass(frozen=True)
class BerChannelConfig:
    p_plus1: float = 1.0
    p_minus1: float = 1.0

    def __post_init__(self):
        for name in ("p_plus1", "p_minus1"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def symmetric(cls, p: float) -> "BerChannelConfig":
        return cls(p, p)

    @classmethod
    def from_ber(cls, ber: float) -> "BerChannelConfig":
        return cls.symmetric(1.0 - ber)

    @property
    def is_identity(self) -> bool:
        return self.p_plus1 == 1.0 and self.p_minus1 == 1.0


@dataclass(frozen=True)
class FaultSchedule:
    """Which binary activation sites see the channel; constant over layers and epochs.

    ``sites`` of None means every fault-flagged activation in the network.
    """

    channel: BerChannelConfig
    sites: frozenset | None = None

    def applies_to(self, site: str) -> bool:
        return self.sites is None or site in self.sites


def effective_ber(cfg: BerChannelConfig) -> float:
    """Average flip probability of the two states."""
    return ((1.0 - cfg.p_plus1) + (1.0 - cfg.p_minus1)) / 2.0


def flip_mask(bits: np.ndarray, cfg: BerChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of flipped positions; one uniform draw per element, row-major."""
    u = rng.random(bits.size).reshape(bits.shape)
    return np.where(bits.astype(bool), u >= cfg.p_plus1, u >= cfg.p_minus1)


def apply_write_channel(bits: BitTensor, cfg: BerChannelConfig, rng: np.random.Generator) -> BitTensor:
    """Pass a BitTensor through the write channel, returning a new BitTensor."""
    mask = flip_mask(bits.bits(), cfg, rng)
    return BitTensor(bits.shape, bits.words ^ _pack_bits(mask.reshape(-1).astype(np.uint8)))
