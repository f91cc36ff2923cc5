"""MDL weight-space entropy from pooled BF16 bit-field histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

# Fixed codebook overhead (~3.5 KB of Huffman tables).
L0_BITS = 28_672


@dataclass
class Bf16Histograms:
    """Pooled sign/exponent/mantissa counts over BF16 parameters."""

    sign_counts: np.ndarray
    exponent_counts: np.ndarray
    mantissa_counts: np.ndarray
    total: int

    def merge(self, other: "Bf16Histograms") -> "Bf16Histograms":
        return Bf16Histograms(
            self.sign_counts + other.sign_counts,
            self.exponent_counts + other.exponent_counts,
            self.mantissa_counts + other.mantissa_counts,
            self.total + other.total,
        )


def bf16_decompose_histograms(raw_bits) -> Bf16Histograms:
    """Histogram the sign (bit 15), exponent (bits 14-7) and mantissa (bits 6-0)."""
    words = np.ascontiguousarray(raw_bits, dtype=np.uint16).ravel()
    if words.size == 0:
        raise DataError("empty bit array")
    sign = words >> 15
    exponent = (words >> 7) & 0xFF
    mantissa = words & 0x7F
    return Bf16Histograms(
        np.bincount(sign, minlength=2).astype(np.int64),
        np.bincount(exponent, minlength=256).astype(np.int64),
        np.bincount(mantissa, minlength=128).astype(np.int64),
        int(words.size),
    )


def shannon_entropy(counts) -> float:
    """Entropy in bits of the empirical distribution behind a histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DataError("negative histogram counts")
    total = counts.sum()
    if total <= 0:
        raise DataError("histogram has zero total")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


@dataclass
class MdlEstimate:
    """Description length and normalized bits-per-parameter."""

    l_bits: float
    bits_per_param: float
    l0_bits: float
    bits_per_param_no_overhead: float
    component_entropies: tuple[float, float, float]
    n_params: int
    n_matrices_skipped: int = 0

    def as_dict(self) -> dict:
        hs, he, hm = self.component_entropies
        return {
            "l_bits": self.l_bits,
            "bits_per_param": self.bits_per_param,
            "l0_bits": self.l0_bits,
            "bits_per_param_no_overhead": self.bits_per_param_no_overhead,
            "sign_entropy": hs,
            "exponent_entropy": he,
            "mantissa_entropy": hm,
            "n_params": self.n_params,
            "n_matrices_skipped": self.n_matrices_skipped,
        }


def mdl_bits(bundle) -> MdlEstimate:
    """Pooled MDL estimate over every bf16 matrix in the bundle.

    f32 matrices carry no 16-bit payload and are skipped; the count of skipped
    matrices is reported so callers can warn.
    """
    hist = None
    skipped = 0
    for m in bundle.matrices:
        if m.dtype != "bf16" or m.raw_bits is None:
            skipped += 1
            continue
        h = bf16_decompose_histograms(m.raw_bits)
        hist = h if hist is None else hist.merge(h)
    if hist is None:
        raise DataError("bundle contains no bf16 payloads")
    hs = shannon_entropy(hist.sign_counts)
    he = shannon_entropy(hist.exponent_counts)
    hm = shannon_entropy(hist.mantissa_counts)
    per_param = hs + he + hm
    l_bits = hist.total * per_param + L0_BITS
    return MdlEstimate(
        l_bits=float(l_bits),
        bits_per_param=float(l_bits / hist.total),
        l0_bits=float(L0_BITS),
        bits_per_param_no_overhead=float(per_param),
        component_entropies=(hs, he, hm),
        n_params=hist.total,
        n_matrices_skipped=skipped,
    )
