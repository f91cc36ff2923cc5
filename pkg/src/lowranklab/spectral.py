"""Singular spectra and the spectral predictors derived from them.

All operations are pure. Matrices are converted to float64 before
decomposition; singular values below RANK_EPS times the largest are kept in
reported spectra but ignored for rank counting.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import DataError, DegeneracyError

RANK_EPS = 1e-12

ROLE_SCOPES = {
    "attn": frozenset({"attn_q", "attn_k", "attn_v", "attn_o"}),
    "mlp": frozenset({"mlp_gate", "mlp_up", "mlp_down"}),
}
ROLE_SCOPES["both"] = ROLE_SCOPES["attn"] | ROLE_SCOPES["mlp"]


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DataError("expected a nonempty 2-D matrix")
    if not np.all(np.isfinite(w)):
        raise DataError("matrix contains non-finite entries")
    return w


def singular_values(w) -> np.ndarray:
    """Full singular spectrum of ``w``, nonincreasing."""
    return np.linalg.svd(_as_matrix(w), compute_uv=False)


def _require_nonzero(sigma: np.ndarray, what: str) -> np.ndarray:
    if sigma[0] <= 0.0:
        raise DegeneracyError(f"undefined {what} for zero matrix")
    return sigma


def numerical_rank(sigma: np.ndarray) -> int:
    """Count of singular values above RANK_EPS relative to the largest."""
    if sigma[0] <= 0.0:
        return 0
    return int(np.count_nonzero(sigma > RANK_EPS * sigma[0]))


def stable_rank(w) -> float:
    """Squared Frobenius norm over squared spectral norm; in [1, rank]."""
    sigma = _require_nonzero(singular_values(w), "stable rank")
    sq = sigma * sigma
    return float(sq.sum() / sq[0])


def effective_rank(w) -> float:
    """Exponential of the Shannon entropy of the l1-normalized spectrum."""
    sigma = _require_nonzero(singular_values(w), "effective rank")
    p = sigma / sigma.sum()
    p = p[p > 0.0]
    return float(np.exp(-(p * np.log(p)).sum()))


def energy_rank(w, fraction: float) -> int:
    """Smallest rank whose leading singular values carry ``fraction`` of the energy."""
    if not 0.0 < fraction <= 1.0:
        raise DataError("fraction must lie in (0, 1]")
    sigma = _require_nonzero(singular_values(w), "energy rank")
    if fraction == 1.0:
        return numerical_rank(sigma)
    energy = np.cumsum(sigma * sigma)
    return int(np.searchsorted(energy, fraction * energy[-1]) + 1)


def truncation_error(w, k: int) -> float:
    """Relative squared Frobenius error of the best rank-``k`` approximation."""
    sigma = _require_nonzero(singular_values(w), "truncation error")
    if not 0 <= k <= sigma.size:
        raise DataError(f"rank {k} out of range for spectrum of length {sigma.size}")
    sq = sigma * sigma
    return float(1.0 - sq[:k].sum() / sq.sum())


def truncation_floor(rho_s: float, k: int) -> float:
    """Lower bound on the relative rank-``k`` truncation error, clamped at zero."""
    if rho_s < 1.0:
        raise DataError("stable rank must be at least 1")
    if k < 0:
        raise DataError("rank must be nonnegative")
    return max(0.0, 1.0 - k / rho_s)


def aggregate(values, sizes) -> float:
    """Parameter-weighted mean of per-matrix statistics."""
    values = np.asarray(values, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if values.size == 0 or values.shape != sizes.shape:
        raise DataError("aggregate needs equal-length nonempty value and size lists")
    if np.any(sizes <= 0):
        raise DataError("sizes must be positive")
    return float((values * sizes).sum() / sizes.sum())


def dataset_entropy(prompt_embeddings) -> float:
    """Von Neumann entropy (bits) of the Gram matrix of prompt-mean embeddings.

    Each prompt contributes the mean of its token embeddings; the Gram of the
    stacked means is trace-normalized and its eigenvalue entropy returned.
    """
    if len(prompt_embeddings) == 0:
        raise DataError("need at least one prompt")
    means = []
    for emb in prompt_embeddings:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise DataError("each prompt needs a nonempty tokens x dim embedding matrix")
        means.append(emb.mean(axis=0))
    q = np.vstack(means)
    gram = q @ q.T
    trace = float(np.trace(gram))
    if trace <= 0.0:
        raise DegeneracyError("degenerate Gram: all prompt means are zero")
    lam = np.linalg.eigvalsh(gram / trace)
    lam = np.clip(lam, 0.0, None)
    lam = lam[lam > 0.0]
    return float(-(lam * np.log2(lam)).sum())


@dataclass
class SpectralSummary:
    """Per-matrix spectrum statistics."""

    sigma: np.ndarray
    stable_rank: float
    effective_rank: float
    k95: int
    k99: int
    numerical_rank: int
    k_ref: int

    @classmethod
    def from_matrix(cls, w) -> "SpectralSummary":
        sigma = _require_nonzero(singular_values(w), "spectral summary")
        sq = sigma * sigma
        rho_s = float(sq.sum() / sq[0])
        p = sigma / sigma.sum()
        p = p[p > 0.0]
        rho_eff = float(np.exp(-(p * np.log(p)).sum()))
        energy = np.cumsum(sq)
        k95 = int(np.searchsorted(energy, 0.95 * energy[-1]) + 1)
        k99 = int(np.searchsorted(energy, 0.99 * energy[-1]) + 1)
        return cls(sigma=sigma, stable_rank=rho_s, effective_rank=rho_eff,
                   k95=k95, k99=k99, numerical_rank=numerical_rank(sigma),
                   k_ref=ceil(rho_eff))

    def as_dict(self) -> dict:
        return {
            "stable_rank": self.stable_rank,
            "effective_rank": self.effective_rank,
            "k95": self.k95,
            "k99": self.k99,
            "numerical_rank": self.numerical_rank,
            "k_ref": self.k_ref,
            "sigma": [float(s) for s in self.sigma],
        }


@dataclass
class AggregateRanks:
    """Parameter-weighted model-level rank statistics over a role scope."""

    rho_s_bar: float
    rho_eff_bar: float
    scope: str

    def as_dict(self) -> dict:
        return {"rho_s_bar": self.rho_s_bar, "rho_eff_bar": self.rho_eff_bar,
                "scope": self.scope}


def aggregate_ranks(matrices, scope: str = "both") -> AggregateRanks:
    """Aggregate stable/effective rank over matrices whose role is in ``scope``.

    ``matrices`` is any iterable of objects with .role, .values and
    .param_count (bundle matrices). Roles outside the scope sets, including
    `embed` and `other`, are skipped.
    """
    if scope not in ROLE_SCOPES:
        raise DataError(f"unknown scope {scope!r}")
    roles = ROLE_SCOPES[scope]
    selected = [m for m in matrices if m.role in roles]
    if not selected:
        raise DataError(f"no matrices match scope {scope!r}")
    sizes = [m.param_count for m in selected]
    rho_s = [stable_rank(m.values) for m in selected]
    rho_eff = [effective_rank(m.values) for m in selected]
    return AggregateRanks(aggregate(rho_s, sizes), aggregate(rho_eff, sizes), scope)
