"""Synthetic verification experiments on simulated transformer layers.

Compression sweeps measure relative output error of rank-truncated layers
(attention value pathway, SwiGLU MLP, or the gate*up Hadamard stage alone),
a 17-model fitting harness ranks functional forms of the error curve, the
Hadamard experiment measures effective-rank scaling of element-wise products,
and the perturbation suite checks the matrix-product bound, the Hadamard
expansion identity, and the truncation floor on random instances.

Everything is a pure function of (config, seed): each trial draws from an
independent substream derived from (seed, trial_index), so parallel and
serial execution agree exactly. The sweeps map the compression ratio to a
rank fraction, k = max(1, round(gamma * min(m, n))); this differs from the
parameter-budget mapping used by the compressors module and is flagged in
both places.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import DataError, DegeneracyError
from .formulas import pearson
from .spectral import effective_rank, stable_rank, truncation_error, truncation_floor

LAYER_KINDS = ("attention_value_path", "mlp_swiglu", "hadamard_only")

DEFAULT_ATTN_DIMS = (896, 896)
DEFAULT_MLP_DIMS = (896, 4864)
DEFAULT_SAMPLES = 64
DEFAULT_TRIALS = 8
DEFAULT_GAMMA_GRID = tuple(np.linspace(0.1, 1.0, 10))
DEFAULT_HADAMARD_DIMS = (256, 256)
DEFAULT_HADAMARD_RANKS = tuple(range(10, 100, 10))
# Factor-entry mean (in units of the entry standard deviation) for the
# Hadamard experiment: a dominant mean component, as trained weights have,
# puts the product in the additive effective-rank regime.
DEFAULT_FACTOR_MEAN = 2.5


def _trial_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def silu(z):
    return z / (1.0 + np.exp(-z))


def gen_lowrank(rows: int, cols: int, target_rank: int, seed: int,
                mean: float = 0.0) -> np.ndarray:
    """Product of two seeded normal factors of inner dimension ``target_rank``.

    ``mean`` shifts the factor entries; zero gives standard-normal factors.
    """
    if not 1 <= target_rank <= min(rows, cols):
        raise DataError(f"target rank {target_rank} out of range for {rows}x{cols}")
    rng = np.random.default_rng(seed)
    left = rng.standard_normal((rows, target_rank)) + mean
    right = rng.standard_normal((target_rank, cols)) + mean
    return left @ right


def rank_fraction(gamma: float, rows: int, cols: int) -> int:
    """Sweep rank mapping: keep a gamma fraction of the smaller dimension."""
    return max(1, round(gamma * min(rows, cols)))


@dataclass
class SweepCurve:
    layer_kind: str
    gamma_grid: tuple
    rel_errors: tuple
    dims: tuple
    seed: int
    trials: int

    def as_dict(self) -> dict:
        return {
            "layer_kind": self.layer_kind,
            "gamma_grid": [float(g) for g in self.gamma_grid],
            "rel_errors": [float(e) for e in self.rel_errors],
            "dims": list(self.dims),
            "seed": self.seed,
            "trials": self.trials,
        }


class _TruncatedApply:
    """Cached SVD of a weight; applies the rank-k truncation to activations."""

    def __init__(self, w: np.ndarray):
        self.u, self.s, self.vt = np.linalg.svd(w, full_matrices=False)
        self.min_dim = min(w.shape)

    def apply(self, x: np.ndarray, k: int) -> np.ndarray:
        return ((x @ self.u[:, :k]) * self.s[:k]) @ self.vt[:k]


def compression_sweep(layer_kind: str, dims: tuple | None = None,
                      gamma_grid=None, trials: int = DEFAULT_TRIALS,
                      seed: int = 0, n_samples: int = DEFAULT_SAMPLES) -> SweepCurve:
    """Mean relative output error of a truncated synthetic layer per ratio."""
    if layer_kind not in LAYER_KINDS:
        raise DataError(f"unknown layer kind {layer_kind!r}")
    if dims is None:
        dims = DEFAULT_ATTN_DIMS if layer_kind == "attention_value_path" else DEFAULT_MLP_DIMS
    grid = tuple(float(g) for g in (DEFAULT_GAMMA_GRID if gamma_grid is None else gamma_grid))
    if not grid or any(not 0.0 < g <= 1.0 for g in grid):
        raise DataError("gamma grid must be nonempty with entries in (0, 1]")
    if trials < 1:
        raise DataError("need at least one trial")

    d, inner = dims
    errors = np.zeros(len(grid))
    for trial in range(trials):
        rng = _trial_rng(seed, trial)
        x = rng.standard_normal((n_samples, d))
        if layer_kind == "attention_value_path":
            w_v = rng.standard_normal((d, inner)) / np.sqrt(d)
            w_o = rng.standard_normal((inner, d)) / np.sqrt(inner)
            t_v, t_o = _TruncatedApply(w_v), _TruncatedApply(w_o)
            base = (x @ w_v) @ w_o
            base_norm = np.linalg.norm(base)
            for j, g in enumerate(grid):
                out = t_o.apply(t_v.apply(x, rank_fraction(g, d, inner)),
                                rank_fraction(g, inner, d))
                errors[j] += np.linalg.norm(out - base) / base_norm
        else:
            w_gate = rng.standard_normal((d, inner)) / np.sqrt(d)
            w_up = rng.standard_normal((d, inner)) / np.sqrt(d)
            t_g, t_u = _TruncatedApply(w_gate), _TruncatedApply(w_up)
            hadamard = silu(x @ w_gate) * (x @ w_up)
            if layer_kind == "mlp_swiglu":
                w_down = rng.standard_normal((inner, d)) / np.sqrt(inner)
                t_d = _TruncatedApply(w_down)
                base = hadamard @ w_down
            else:
                base = hadamard
            base_norm = np.linalg.norm(base)
            for j, g in enumerate(grid):
                k = rank_fraction(g, d, inner)
                h = silu(t_g.apply(x, k)) * t_u.apply(x, k)
                out = t_d.apply(h, rank_fraction(g, inner, d)) \
                    if layer_kind == "mlp_swiglu" else h
                errors[j] += np.linalg.norm(out - base) / base_norm
    errors /= trials
    return SweepCurve(layer_kind, grid, tuple(float(e) for e in errors),
                      tuple(dims), seed, trials)


# --- functional-form fitting harness ---------------------------------------

def _exp_clip(z):
    return np.exp(np.clip(z, -50.0, 50.0))


# (name, design-matrix builder) for models linear in their parameters; the
# intercept column is implicit.
_LINEAR_FORMS = (
    ("linear", lambda g: [g]),
    ("quadratic", lambda g: [g, g ** 2]),
    ("cubic", lambda g: [g, g ** 2, g ** 3]),
    ("quartic", lambda g: [g, g ** 2, g ** 3, g ** 4]),
    ("sqrt", lambda g: [np.sqrt(g)]),
    ("cbrt", lambda g: [g ** (1.0 / 3.0)]),
    ("fourth_root", lambda g: [g ** 0.25]),
    ("log", lambda g: [np.log(g)]),
    ("log_linear", lambda g: [np.log(g), g]),
    ("log_quadratic", lambda g: [np.log(g), g, g ** 2]),
    ("sqrt_plus_log", lambda g: [np.sqrt(g), np.log(g)]),
)

# (name, n_params, predictor) for models with nonlinear parameters.
_NONLINEAR_FORMS = (
    ("exp_growth", 3, lambda p, g: p[0] + p[1] * _exp_clip(p[2] * g)),
    ("exp_decay", 3, lambda p, g: p[0] + p[1] * _exp_clip(-p[2] * (1.0 - g))),
    ("linear_plus_exp", 4, lambda p, g: p[0] + p[1] * g + p[2] * _exp_clip(p[3] * g)),
    ("power_law", 3, lambda p, g: p[0] + p[1] * np.sign(g) * np.abs(g) ** p[2]),
    ("sigmoid", 4, lambda p, g: p[0] + p[1] / (1.0 + _exp_clip(-p[2] * (g - p[3])))),
    ("tanh", 4, lambda p, g: p[0] + p[1] * np.tanh(p[2] * (g - p[3]))),
)

N_FORMS = len(_LINEAR_FORMS) + len(_NONLINEAR_FORMS)
_RESTARTS = 20


@dataclass
class FormFit:
    name: str
    r: float
    rmse: float
    n_params: int
    converged: bool = True

    def as_dict(self) -> dict:
        return {"name": self.name, "r": self.r, "rmse": self.rmse,
                "n_params": self.n_params, "converged": self.converged}


@dataclass
class FormRanking:
    fits: list[FormFit]

    def rank_of(self, name: str) -> int:
        for i, fit in enumerate(self.fits, start=1):
            if fit.name == name:
                return i
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {"models": [f.as_dict() for f in self.fits]}


def _score(y: np.ndarray, pred: np.ndarray, n_params: int, name: str) -> FormFit:
    if not np.all(np.isfinite(pred)):
        return FormFit(name, -np.inf, np.inf, n_params, converged=False)
    rmse = float(np.sqrt(np.mean((y - pred) ** 2)))
    try:
        r = pearson(y, pred)
    except DegeneracyError:
        return FormFit(name, -np.inf, rmse, n_params, converged=False)
    return FormFit(name, r, rmse, n_params)


def fit_forms(curve: SweepCurve) -> FormRanking:
    """Fit all 17 candidate error-curve models; rank by correlation.

    Nonlinear models use least squares with 20 seeded restarts; a model whose
    every restart fails is flagged unconverged and ranked last.
    """
    g = np.asarray(curve.gamma_grid, dtype=np.float64)
    y = np.asarray(curve.rel_errors, dtype=np.float64)
    if g.size < 10:
        raise DataError(f"need at least 10 grid points, got {g.size}")

    fits = []
    for name, builder in _LINEAR_FORMS:
        design = np.column_stack([np.ones_like(g)] + builder(g))
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
        fits.append(_score(y, design @ beta, design.shape[1], name))

    for idx, (name, n_params, predict) in enumerate(_NONLINEAR_FORMS):
        rng = _trial_rng(curve.seed, 1000 + idx)
        best = None
        for restart in range(_RESTARTS):
            x0 = np.ones(n_params) if restart == 0 else rng.normal(0.0, 2.0, n_params)
            try:
                sol = least_squares(lambda p: predict(p, g) - y, x0, max_nfev=400)
            except (ValueError, np.linalg.LinAlgError):
                continue
            if not np.all(np.isfinite(sol.x)):
                continue
            sse = float(sol.cost)
            if best is None or sse < best[0]:
                best = (sse, sol.x)
        if best is None:
            fits.append(FormFit(name, -np.inf, np.inf, n_params, converged=False))
        else:
            fits.append(_score(y, predict(best[1], g), n_params, name))

    fits.sort(key=lambda f: (-round(f.r, 9) if np.isfinite(f.r) else np.inf,
                             f.n_params, f.name))
    return FormRanking(fits)


# --- Hadamard effective-rank experiment -------------------------------------

@dataclass
class HadamardRow:
    target_rank: int
    rho_a: float
    rho_b: float
    rho_product: float
    geo_mean: float
    ratio: float


@dataclass
class HadamardReport:
    rows: list[HadamardRow]
    average_ratio: float
    dims: tuple
    seed: int

    def as_dict(self) -> dict:
        return {
            "rows": [{"target_rank": r.target_rank, "rho_a": r.rho_a, "rho_b": r.rho_b,
                      "rho_product": r.rho_product, "geo_mean": r.geo_mean,
                      "ratio": r.ratio} for r in self.rows],
            "average_ratio": self.average_ratio,
            "dims": list(self.dims),
            "seed": self.seed,
        }


def hadamard_rank_experiment(target_ranks=DEFAULT_HADAMARD_RANKS,
                             dims: tuple = DEFAULT_HADAMARD_DIMS, seed: int = 0,
                             factor_mean: float = DEFAULT_FACTOR_MEAN) -> HadamardReport:
    """Effective rank of A*B (element-wise) against the geometric-mean prediction."""
    rows = []
    for t in target_ranks:
        seeds = np.random.SeedSequence(entropy=seed, spawn_key=(int(t),)).generate_state(2)
        a = gen_lowrank(dims[0], dims[1], int(t), int(seeds[0]), mean=factor_mean)
        b = gen_lowrank(dims[0], dims[1], int(t), int(seeds[1]), mean=factor_mean)
        rho_a, rho_b = effective_rank(a), effective_rank(b)
        rho_ab = effective_rank(a * b)
        geo = float(np.sqrt(rho_a * rho_b))
        rows.append(HadamardRow(int(t), rho_a, rho_b, rho_ab, geo, rho_ab / geo))
    return HadamardReport(rows, float(np.mean([r.ratio for r in rows])),
                          tuple(dims), seed)


# --- degradation-rate comparison --------------------------------------------

@dataclass
class DegradationComparison:
    attn_ratio: float
    mlp_ratio: float
    attn_errors: tuple
    mlp_errors: tuple
    gamma_low: float
    gamma_high: float

    def as_dict(self) -> dict:
        return {
            "gamma_low": self.gamma_low, "gamma_high": self.gamma_high,
            "attn_ratio": self.attn_ratio, "mlp_ratio": self.mlp_ratio,
            "attn_errors": list(self.attn_errors), "mlp_errors": list(self.mlp_errors),
        }


def degradation_compare(gamma_low: float, gamma_high: float,
                        dims: tuple = (896, 896, 4864), trials: int = DEFAULT_TRIALS,
                        seed: int = 0) -> DegradationComparison:
    """Ratio of mean output error at gamma_low vs gamma_high per layer kind.

    A zero high-ratio error (gamma_high = 1) reports the ratio as +inf.
    """
    if not 0.0 < gamma_low <= gamma_high <= 1.0:
        raise DataError("need 0 < gamma_low <= gamma_high <= 1")
    d, d_v, d_ff = dims
    grid = (gamma_low, gamma_high)
    attn = compression_sweep("attention_value_path", (d, d_v), grid, trials, seed)
    mlp = compression_sweep("mlp_swiglu", (d, d_ff), grid, trials, seed)

    def ratio(errors):
        low, high = errors
        # Full-rank reconstruction leaves only float dust; flag as infinite.
        return float("inf") if high < 1e-12 else low / high

    return DegradationComparison(ratio(attn.rel_errors), ratio(mlp.rel_errors),
                                 attn.rel_errors, mlp.rel_errors,
                                 gamma_low, gamma_high)


# --- perturbation-bound property checks -------------------------------------

@dataclass
class PerturbationReport:
    trials: int
    product_bound_violations: int
    hadamard_identity_max_residual: float
    floor_violations: int

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "product_bound_violations": self.product_bound_violations,
            "hadamard_identity_max_residual": self.hadamard_identity_max_residual,
            "floor_violations": self.floor_violations,
        }


def perturbation_checks(trials: int = 1000, dims: tuple = (16, 12),
                        seed: int = 0) -> PerturbationReport:
    """Check the product perturbation bound, Hadamard identity, and error floor."""
    if trials < 1:
        raise DataError("need at least one trial")
    max_m, max_n = dims
    product_violations = 0
    floor_violations = 0
    max_residual = 0.0
    for trial in range(trials):
        rng = _trial_rng(seed, trial)
        m = int(rng.integers(2, max_m + 1))
        p = int(rng.integers(2, max_n + 1))
        n = int(rng.integers(2, max_m + 1))

        a = rng.standard_normal((m, p))
        b = rng.standard_normal((p, n))
        da = rng.standard_normal((m, p)) * rng.uniform(0.0, 0.5)
        db = rng.standard_normal((p, n)) * rng.uniform(0.0, 0.5)
        lhs = np.linalg.norm((a + da) @ (b + db) - a @ b)
        rhs = (np.linalg.norm(a, 2) * np.linalg.norm(db)
               + np.linalg.norm(da) * np.linalg.norm(b, 2)
               + np.linalg.norm(da) * np.linalg.norm(db))
        if lhs > rhs * (1.0 + 1e-12) + 1e-12:
            product_violations += 1

        g_act = rng.standard_normal((m, n))
        u_act = rng.standard_normal((m, n))
        dg = rng.standard_normal((m, n)) * rng.uniform(0.0, 0.5)
        du = rng.standard_normal((m, n)) * rng.uniform(0.0, 0.5)
        exact = (g_act + dg) * (u_act + du) - g_act * u_act
        expansion = g_act * du + dg * u_act + dg * du
        scale = max(np.linalg.norm(exact), 1e-300)
        max_residual = max(max_residual,
                           float(np.linalg.norm(exact - expansion) / scale))

        w = rng.standard_normal((m, p))
        k = int(rng.integers(0, min(m, p) + 1))
        if truncation_floor(stable_rank(w), k) > truncation_error(w, k) + 1e-12:
            floor_violations += 1

    return PerturbationReport(trials, product_violations, max_residual, floor_violations)
