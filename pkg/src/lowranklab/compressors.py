"""SVD-family weight compressors and the ratio -> rank bookkeeping.

Four procedures: plain truncated SVD, activation-scaled SVD (with either
stable-rank or calibration-error rank allocation), and least-squares factor
refinement with an optional input-whitening step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bundleio import ModelBundle, WeightMatrix
from .errors import DataError, DegeneracyError
from .spectral import ROLE_SCOPES, singular_values, stable_rank

METHODS = ("vanilla", "asvd", "asvd_sr", "svdllm", "svdllm_whiten")

ASVD_SCALE_FLOOR = 1e-8


class RankBudgetWarning(UserWarning):
    """The parameter budget cannot fit even a rank-1 factorization."""


class CholeskyFallbackWarning(UserWarning):
    """Whitening hit a rank-deficient Gram and fell back to a ridged factorization."""


@dataclass
class LowRankFactors:
    """Rank-k factorization W ~= left @ diag(singulars) @ right.T.

    When ``scaling`` is present (activation-scaled SVD), the right factor rows
    are divided by it on reconstruction: the decomposition was taken of W*S and
    S^-1 stays folded against the right basis.
    """

    left: np.ndarray
    singulars: np.ndarray
    right: np.ndarray
    scaling: np.ndarray | None = None

    @property
    def k(self) -> int:
        return int(self.singulars.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left.shape[0], self.right.shape[0])

    @property
    def param_count(self) -> int:
        m, n = self.shape
        return self.k * (m + n) + (n if self.scaling is not None else 0)

    def effective_right(self) -> np.ndarray:
        if self.scaling is None:
            return self.right
        return self.right / self.scaling[:, None]

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singulars) @ self.effective_right().T


@dataclass
class CompressionConfig:
    method: str = "vanilla"
    gamma: float = 0.5
    alpha: float = 0.5
    target: str = "both"
    ridge: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataError(f"unknown method {self.method!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise DataError("gamma must lie in (0, 1]")
        if self.alpha < 0.0:
            raise DataError("alpha must be nonnegative")
        if self.target not in ROLE_SCOPES:
            raise DataError(f"unknown target {self.target!r}")


def rank_for_ratio(rows: int, cols: int, gamma: float) -> int:
    """Largest rank whose factorized storage k*(rows+cols) fits gamma*rows*cols.

    Clamped to [1, min(rows, cols)]; warns when even rank 1 exceeds the budget.
    """
    if not 0.0 < gamma <= 1.0:
        raise DataError("gamma must lie in (0, 1]")
    k = int(gamma * rows * cols / (rows + cols))
    if k < 1:
        warnings.warn(
            f"gamma={gamma} cannot fit a rank-1 factorization of {rows}x{cols}; using k=1",
            RankBudgetWarning, stacklevel=2)
        return 1
    return min(k, min(rows, cols))


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise DataError("expected a nonempty 2-D matrix")
    return w


def _check_calib(w: np.ndarray, calib_x) -> np.ndarray:
    x = np.asarray(calib_x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("calibration activations must be 2-D (samples x channels)")
    if x.shape[1] != w.shape[1]:
        raise DataError(f"calibration has {x.shape[1]} channels, matrix expects {w.shape[1]}")
    if not np.any(x):
        raise DataError("all-zero calibration activations")
    return x


def svd_truncate(w, k: int) -> LowRankFactors:
    """Best rank-k approximation by truncated SVD (Eckart-Young optimum)."""
    w = _as_matrix(w)
    if not 1 <= k <= min(w.shape):
        raise DataError(f"rank {k} out of range for shape {w.shape}")
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    return LowRankFactors(u[:, :k].copy(), s[:k].copy(), vt[:k].T.copy())


def asvd_compress(w, calib_x, k: int, alpha: float = 0.5) -> LowRankFactors:
    """Activation-scaled truncated SVD.

    Channel scales s_i = (mean_j |X_ji|)^alpha are applied to the columns of W
    before decomposition so truncation spares high-activation channels; the
    inverse scale stays folded against the right factor.
    """
    w = _as_matrix(w)
    x = _check_calib(w, calib_x)
    if not 1 <= k <= min(w.shape):
        raise DataError(f"rank {k} out of range for shape {w.shape}")
    magnitudes = np.abs(x).mean(axis=0)
    scales = np.maximum(magnitudes, ASVD_SCALE_FLOOR) ** alpha
    u, s, vt = np.linalg.svd(w * scales[None, :], full_matrices=False)
    return LowRankFactors(u[:, :k].copy(), s[:k].copy(), vt[:k].T.copy(), scaling=scales)


def _canonical_factors(a: np.ndarray, basis: np.ndarray) -> LowRankFactors:
    # Reduce A @ basis.T to ordinary SVD form via thin QR of both factors.
    qa, ra = np.linalg.qr(a)
    qb, rb = np.linalg.qr(basis)
    u, s, vt = np.linalg.svd(ra @ rb.T)
    return LowRankFactors(qa @ u, s, qb @ vt.T)


def svdllm_refine(w, calib_x, k: int, whiten: bool = False,
                  ridge: float = 1e-8) -> LowRankFactors:
    """Least-squares refit of the left factor against calibration outputs.

    The right basis is fixed from the SVD of W (or of W*L when whitening with
    X.T X = L L.T), then the left factor minimizing the calibration output
    error is solved in closed form. Normal equations carry a scale-aware ridge
    of ridge * trace(Gram) / dim.
    """
    w = _as_matrix(w)
    x = _check_calib(w, calib_x)
    if not 1 <= k <= min(w.shape):
        raise DataError(f"rank {k} out of range for shape {w.shape}")

    if whiten:
        gram = x.T @ x
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            warnings.warn("rank-deficient calibration Gram; whitening with ridged Cholesky",
                          CholeskyFallbackWarning, stacklevel=2)
            lam = ridge * np.trace(gram) / gram.shape[0]
            chol = np.linalg.cholesky(gram + lam * np.eye(gram.shape[0]))
        _, _, vt = np.linalg.svd(w @ chol, full_matrices=False)
        # Map the whitened basis back so X @ basis spans the refit space.
        basis = np.linalg.solve(chol.T, vt[:k].T)
    else:
        _, _, vt = np.linalg.svd(w, full_matrices=False)
        basis = vt[:k].T.copy()

    proj = x @ basis
    gram_k = proj.T @ proj
    lam = ridge * np.trace(gram_k) / gram_k.shape[0]
    rhs = proj.T @ (x @ w.T)
    a_t = np.linalg.solve(gram_k + lam * np.eye(k), rhs)
    return _canonical_factors(a_t.T, basis)


def output_error(w, factors: LowRankFactors, x) -> float:
    """Relative calibration output error ||X W^T - X W~^T||_F / ||X W^T||_F."""
    w = _as_matrix(w)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DataError("activation shape does not match the matrix")
    base = x @ w.T
    denom = np.linalg.norm(base)
    if denom == 0.0:
        raise DegeneracyError("zero reference output; relative error undefined")
    approx = x @ factors.reconstruct().T
    return float(np.linalg.norm(base - approx) / denom)


def _output_error_curve(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # err[k] for k = 0..r under plain truncation: residual energy of X(W-W_k)^T
    # is sum_{j>k} sigma_j^2 ||X v_j||^2 because the left vectors are orthonormal.
    _, s, vt = np.linalg.svd(w, full_matrices=False)
    contrib = (s ** 2) * (np.linalg.norm(x @ vt.T, axis=0) ** 2)
    total = contrib.sum()
    if total <= 0.0:
        raise DegeneracyError("zero reference output; allocation gains undefined")
    tail = np.concatenate([np.cumsum(contrib[::-1])[::-1], [0.0]])
    return np.sqrt(np.clip(tail / total, 0.0, None))


def asvd_allocate_ranks(matrices, total_budget: int, mode: str = "stable_rank",
                        calib=None) -> list[int]:
    """Greedy per-matrix rank allocation under a total parameter budget.

    Every matrix starts at rank 1; each step grants +1 rank to the matrix with
    the largest sensitivity-weighted marginal error reduction. ``stable_rank``
    mode weights spectral-energy gains by the matrix's stable rank;
    ``output_error`` mode uses the measured calibration-error drop. Ties break
    toward the lower matrix index.
    """
    if mode not in ("stable_rank", "output_error"):
        raise DataError(f"unknown allocation mode {mode!r}")
    ws = [_as_matrix(w) for w in matrices]
    if not ws:
        raise DataError("no matrices to allocate")
    if mode == "output_error":
        if calib is None or len(calib) != len(ws):
            raise DataError("output_error mode needs one calibration array per matrix")
        xs = [_check_calib(w, x) for w, x in zip(ws, calib)]

    costs = [sum(w.shape) for w in ws]
    max_ranks = [min(w.shape) for w in ws]
    if sum(costs) > total_budget:
        raise DataError(f"budget {total_budget} cannot fit rank 1 everywhere "
                        f"(needs {sum(costs)})")

    if mode == "stable_rank":
        weights = [stable_rank(w) for w in ws]
        curves = []
        for w in ws:
            sq = singular_values(w) ** 2
            tail = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]])
            curves.append(tail / sq.sum())
        gains = [[weights[i] * (curves[i][k] - curves[i][k + 1])
                  for k in range(max_ranks[i])] for i in range(len(ws))]
    else:
        err_curves = [_output_error_curve(w, x) for w, x in zip(ws, xs)]
        gains = [[err_curves[i][k] - err_curves[i][k + 1]
                  for k in range(max_ranks[i])] for i in range(len(ws))]

    ranks = [1] * len(ws)
    remaining = total_budget - sum(costs)
    while True:
        best, best_gain = -1, -np.inf
        for i in range(len(ws)):
            if ranks[i] >= max_ranks[i] or costs[i] > remaining:
                continue
            g = gains[i][ranks[i]]
            if g > best_gain:
                best, best_gain = i, g
        if best < 0:
            break
        ranks[best] += 1
        remaining -= costs[best]
    return ranks


def compress_bundle(bundle: ModelBundle, config: CompressionConfig,
                    calib: dict | None = None) -> tuple[ModelBundle, list[dict]]:
    """Compress every matrix matching the target scope; pass the rest through.

    ``calib`` maps matrix names to activation arrays; the key "default" is a
    fallback applied when the channel count matches. Returns the factorized
    bundle (factors stored as f32 "<name>.left" / "<name>.right" with the
    singular values folded into the left factor and any channel scaling folded
    into the right) plus a per-matrix report.
    """
    calib = calib or {}
    roles = ROLE_SCOPES[config.target]
    targeted = [m for m in bundle.matrices if m.role in roles]
    if not targeted:
        raise DataError(f"no matrices match target {config.target!r}")

    def calib_for(m: WeightMatrix):
        if m.name in calib:
            return calib[m.name]
        x = calib.get("default")
        if x is not None and np.asarray(x).ndim == 2 and np.asarray(x).shape[1] == m.cols:
            return x
        return None

    needs_calib = config.method in ("asvd", "asvd_sr", "svdllm", "svdllm_whiten")
    if needs_calib:
        missing = [m.name for m in targeted if calib_for(m) is None]
        if missing:
            raise DataError(f"method {config.method!r} needs calibration for: {missing}")

    if config.method in ("asvd", "asvd_sr"):
        budget = int(config.gamma * sum(m.param_count for m in targeted))
        mode = "output_error" if config.method == "asvd" else "stable_rank"
        xs = [calib_for(m) for m in targeted] if mode == "output_error" else None
        ranks = asvd_allocate_ranks([m.values for m in targeted], budget, mode, xs)
        rank_of = {m.name: k for m, k in zip(targeted, ranks)}
    else:
        rank_of = {m.name: rank_for_ratio(m.rows, m.cols, config.gamma) for m in targeted}

    out_matrices: list[WeightMatrix] = []
    report: list[dict] = []
    for m in bundle.matrices:
        if m.role not in roles:
            out_matrices.append(m)
            continue
        k = rank_of[m.name]
        x = calib_for(m)
        if config.method == "vanilla":
            factors = svd_truncate(m.values, k)
        elif config.method in ("asvd", "asvd_sr"):
            factors = asvd_compress(m.values, x, k, config.alpha)
        else:
            factors = svdllm_refine(m.values, x, k,
                                    whiten=config.method == "svdllm_whiten",
                                    ridge=config.ridge)
        left = (factors.left * factors.singulars).astype(np.float32)
        right = factors.effective_right().astype(np.float32)
        out_matrices.append(WeightMatrix(f"{m.name}.left", m.role, m.layer_index, left))
        out_matrices.append(WeightMatrix(f"{m.name}.right", m.role, m.layer_index, right))
        entry = {
            "name": m.name,
            "rows": m.rows,
            "cols": m.cols,
            "rank": k,
            "params_before": m.param_count,
            "params_after": k * (m.rows + m.cols),
        }
        if x is not None:
            entry["output_error"] = output_error(m.values, factors, x)
        report.append(entry)

    metadata = dict(bundle.metadata)
    metadata.update({
        "compression.method": config.method,
        "compression.gamma": repr(config.gamma),
        "compression.alpha": repr(config.alpha),
        "compression.target": config.target,
        "compression.original_params": str(bundle.total_params),
    })
    for name, k in rank_of.items():
        metadata[f"compression.rank.{name}"] = str(k)
    return ModelBundle(out_matrices, metadata), report
