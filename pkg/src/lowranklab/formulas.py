"""Formula catalogs, target transformations, OLS fitting, and LOO selection.

Two catalogs feed the fitter: 42 interpretable templates (ids F1-F42) and 20
formulas found by symbolic regression (ids D1-D20). A formula is a feature
builder: its terms are evaluated per record and a linear model with intercept
is fit on top. Entropy-bearing formulas apply to perplexity targets only.

Additive or multiplicative constants inside discovered formulas are absorbed
by the fitted intercept/slope; the four structures where the constant sits
inside a nonlinearity (D5, D6, D10, D20) carry one extra shift parameter fit
by golden-section search wrapped around OLS.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegeneracyError
from .records import ObservationRecord

_EPS = 1e-12

SHIFT_RANGE = (1e-6, 1e3)
DEFAULT_SHIFT = 1.0

ACCURACY_TARGETS = ("rel_degradation", "log_odds", "raw_accuracy", "accuracy_drop")
PERPLEXITY_TARGETS = ("log_perplexity", "rel_ppl_degradation", "log_ppl_ratio")
TARGET_KINDS = ACCURACY_TARGETS + PERPLEXITY_TARGETS

_TARGET_FIELDS = {
    "rel_degradation": ("acc", "acc0"),
    "log_odds": ("acc",),
    "raw_accuracy": ("acc",),
    "accuracy_drop": ("acc", "acc0"),
    "log_perplexity": ("ppl",),
    "rel_ppl_degradation": ("ppl", "ppl0"),
    "log_ppl_ratio": ("ppl", "ppl0"),
}


class ScopeError(DataError):
    """A formula was used with a target outside its declared scope."""


class DegenerateDesignWarning(UserWarning):
    """The design matrix was singular; a ridge fallback produced the solution."""


def target_transform(record: ObservationRecord, kind: str) -> float:
    """Evaluate the requested degradation target for one record."""
    if kind not in _TARGET_FIELDS:
        raise DataError(f"unknown target kind {kind!r}")
    for name in _TARGET_FIELDS[kind]:
        if getattr(record, name) is None:
            raise DataError(f"record missing {name!r} needed by target {kind!r}")
    if kind == "rel_degradation":
        return (record.acc0 - record.acc) / record.acc0
    if kind == "log_odds":
        if not 0.0 < record.acc < 1.0:
            raise DataError("log_odds needs accuracy strictly inside (0, 1)")
        return math.log(record.acc / (1.0 - record.acc))
    if kind == "raw_accuracy":
        return record.acc
    if kind == "accuracy_drop":
        return record.acc0 - record.acc
    if kind == "log_perplexity":
        return math.log(record.ppl)
    if kind == "rel_ppl_degradation":
        return (record.ppl - record.ppl0) / record.ppl0
    return math.log(record.ppl / record.ppl0)


def scope_allows(scope: str, target_kind: str) -> bool:
    if scope == "all":
        return True
    if scope == "perplexity_only":
        return target_kind in PERPLEXITY_TARGETS
    if scope == "accuracy_only":
        return target_kind in ACCURACY_TARGETS
    raise DataError(f"unknown scope {scope!r}")


# Protected transforms for the discovered catalog, whose log/ratio forms have
# open domains.
def _plog(x: float) -> float:
    return math.log(max(x, _EPS))


def _pdiv(a: float, b: float) -> float:
    if abs(b) < _EPS:
        b = -_EPS if b < 0 else _EPS
    return a / b


def _pexp(x: float) -> float:
    return math.exp(min(x, 50.0))


@dataclass(frozen=True)
class Formula:
    """A feature builder: id, admissible targets, and per-term evaluators."""

    id: str
    label: str
    scope: str
    n_vars: int
    variables: tuple[str, ...]
    terms: tuple = field(repr=False)
    shift: bool = False


def build_features(formula: Formula, record: ObservationRecord,
                   target_kind: str | None = None,
                   shift: float | None = None) -> np.ndarray:
    """Evaluate the formula's predictor terms (intercept excluded) on a record."""
    if target_kind is not None and not scope_allows(formula.scope, target_kind):
        raise ScopeError(f"{formula.id} is {formula.scope}; not admissible for "
                         f"target {target_kind!r}")
    values = record.field_values()
    for name in formula.variables:
        if values.get(name) is None:
            raise DataError(f"record missing {name!r} required by {formula.id}")
    c = (DEFAULT_SHIFT if shift is None else shift) if formula.shift else None
    return np.array([term(values, c) for term in formula.terms], dtype=np.float64)


def _f(id, label, scope, n_vars, variables, *terms, shift=False):
    return Formula(id, label, scope, n_vars, tuple(variables), tuple(terms), shift)


def template_catalog() -> list[Formula]:
    """The 42 interpretable templates, in catalog order."""
    g = lambda v, c: v["gamma"]
    return [
        _f("F1", "gamma", "all", 1, ["gamma"], g),
        _f("F2", "log(gamma)", "all", 1, ["gamma"], lambda v, c: math.log(v["gamma"])),
        _f("F3", "bits/gamma", "all", 1, ["bits", "gamma"],
           lambda v, c: v["bits"] / v["gamma"]),
        _f("F4", "log_n - log_n_comp", "all", 1, ["log_n", "log_n_comp"],
           lambda v, c: v["log_n"] - v["log_n_comp"]),
        _f("F5", "gamma, log_n", "all", 2, ["gamma", "log_n"],
           g, lambda v, c: v["log_n"]),
        _f("F6", "gamma, bits", "all", 2, ["gamma", "bits"],
           g, lambda v, c: v["bits"]),
        _f("F7", "log_n, log_n_comp", "all", 2, ["log_n", "log_n_comp"],
           lambda v, c: v["log_n"], lambda v, c: v["log_n_comp"]),
        _f("F8", "bits, rho_s_bar", "all", 2, ["bits", "rho_s_bar"],
           lambda v, c: v["bits"], lambda v, c: v["rho_s_bar"]),
        _f("F9", "bits/gamma, log_n - log_n_comp", "all", 2,
           ["bits", "gamma", "log_n", "log_n_comp"],
           lambda v, c: v["bits"] / v["gamma"],
           lambda v, c: v["log_n"] - v["log_n_comp"]),
        _f("F10", "gamma^2, exp(-gamma)", "all", 2, ["gamma"],
           lambda v, c: v["gamma"] ** 2, lambda v, c: math.exp(-v["gamma"])),
        _f("F11", "gamma, log_n, bits", "all", 3, ["gamma", "log_n", "bits"],
           g, lambda v, c: v["log_n"], lambda v, c: v["bits"]),
        _f("F12", "gamma, log_n_comp, bits", "all", 3, ["gamma", "log_n_comp", "bits"],
           g, lambda v, c: v["log_n_comp"], lambda v, c: v["bits"]),
        _f("F13", "log_n, log_n_comp, bits", "all", 3, ["log_n", "log_n_comp", "bits"],
           lambda v, c: v["log_n"], lambda v, c: v["log_n_comp"], lambda v, c: v["bits"]),
        _f("F14", "gamma, rho_s_bar, bits", "all", 3, ["gamma", "rho_s_bar", "bits"],
           g, lambda v, c: v["rho_s_bar"], lambda v, c: v["bits"]),
        _f("F15", "gamma^2, exp(-gamma), log_n_comp", "all", 3, ["gamma", "log_n_comp"],
           lambda v, c: v["gamma"] ** 2, lambda v, c: math.exp(-v["gamma"]),
           lambda v, c: v["log_n_comp"]),
        _f("F16", "gamma * rho_eff_bar", "all", 1, ["gamma", "rho_eff_bar"],
           lambda v, c: v["gamma"] * v["rho_eff_bar"]),
        _f("F17", "bits * rho_s_bar", "all", 1, ["bits", "rho_s_bar"],
           lambda v, c: v["bits"] * v["rho_s_bar"]),
        _f("F18", "gamma, bits, gamma*bits", "all", 3, ["gamma", "bits"],
           g, lambda v, c: v["bits"], lambda v, c: v["gamma"] * v["bits"]),
        _f("F19", "gamma^2, 1/gamma - 1, log_n_comp", "all", 3, ["gamma", "log_n_comp"],
           lambda v, c: v["gamma"] ** 2, lambda v, c: 1.0 / v["gamma"] - 1.0,
           lambda v, c: v["log_n_comp"]),
        _f("F20", "gamma^2, 1/gamma, log_n_comp", "all", 3, ["gamma", "log_n_comp"],
           lambda v, c: v["gamma"] ** 2, lambda v, c: 1.0 / v["gamma"],
           lambda v, c: v["log_n_comp"]),
        _f("F21", "gamma^2, log(1/gamma), log_n_comp", "all", 3, ["gamma", "log_n_comp"],
           lambda v, c: v["gamma"] ** 2, lambda v, c: math.log(1.0 / v["gamma"]),
           lambda v, c: v["log_n_comp"]),
        _f("F22", "gamma^2, exp(1/gamma - 1), log_n_comp", "all", 3, ["gamma", "log_n_comp"],
           lambda v, c: v["gamma"] ** 2, lambda v, c: _pexp(1.0 / v["gamma"] - 1.0),
           lambda v, c: v["log_n_comp"]),
        _f("F23", "gamma, entropy", "perplexity_only", 2, ["gamma", "entropy"],
           g, lambda v, c: v["entropy"]),
        _f("F24", "entropy, log_n", "perplexity_only", 2, ["entropy", "log_n"],
           lambda v, c: v["entropy"], lambda v, c: v["log_n"]),
        _f("F25", "gamma, entropy, gamma*entropy", "perplexity_only", 3,
           ["gamma", "entropy"],
           g, lambda v, c: v["entropy"], lambda v, c: v["gamma"] * v["entropy"]),
        _f("F26", "entropy, bits", "perplexity_only", 2, ["entropy", "bits"],
           lambda v, c: v["entropy"], lambda v, c: v["bits"]),
        _f("F27", "gamma_attn, gamma_mlp", "all", 2, ["gamma_attn", "gamma_mlp"],
           lambda v, c: v["gamma_attn"], lambda v, c: v["gamma_mlp"]),
        _f("F28", "gamma_attn, gamma_mlp, log_n", "all", 3,
           ["gamma_attn", "gamma_mlp", "log_n"],
           lambda v, c: v["gamma_attn"], lambda v, c: v["gamma_mlp"],
           lambda v, c: v["log_n"]),
        _f("F29", "gamma_attn/gamma_mlp", "all", 1, ["gamma_attn", "gamma_mlp"],
           lambda v, c: v["gamma_attn"] / v["gamma_mlp"]),
        _f("F30", "log(svd_rank)", "all", 1, ["svd_rank"],
           lambda v, c: math.log(v["svd_rank"])),
        _f("F31", "log(svd_rank), log_n", "all", 2, ["svd_rank", "log_n"],
           lambda v, c: math.log(v["svd_rank"]), lambda v, c: v["log_n"]),
        _f("F32", "svd_rank/rho_s_bar, bits", "all", 2, ["svd_rank", "rho_s_bar", "bits"],
           lambda v, c: v["svd_rank"] / v["rho_s_bar"], lambda v, c: v["bits"]),
        _f("F33", "k95_bar, gamma", "all", 2, ["k95_bar", "gamma"],
           lambda v, c: v["k95_bar"], g),
        _f("F34", "k99_bar - k95_bar, log_n_comp", "all", 2,
           ["k95_bar", "k99_bar", "log_n_comp"],
           lambda v, c: v["k99_bar"] - v["k95_bar"], lambda v, c: v["log_n_comp"]),
        _f("F35", "gamma, log_n", "perplexity_only", 2, ["gamma", "log_n"],
           g, lambda v, c: v["log_n"]),
        _f("F36", "gamma, log_n_comp", "perplexity_only", 2, ["gamma", "log_n_comp"],
           g, lambda v, c: v["log_n_comp"]),
        _f("F37", "gamma, log(ppl0)", "perplexity_only", 2, ["gamma", "ppl0"],
           g, lambda v, c: math.log(v["ppl0"])),
        _f("F38", "gamma, log(ppl0), log_n", "perplexity_only", 3,
           ["gamma", "ppl0", "log_n"],
           g, lambda v, c: math.log(v["ppl0"]), lambda v, c: v["log_n"]),
        _f("F39", "gamma, log_n", "accuracy_only", 2, ["gamma", "log_n"],
           g, lambda v, c: v["log_n"]),
        _f("F40", "gamma, log_n_comp", "accuracy_only", 2, ["gamma", "log_n_comp"],
           g, lambda v, c: v["log_n_comp"]),
        _f("F41", "gamma, acc0, log_n", "accuracy_only", 3, ["gamma", "acc0", "log_n"],
           g, lambda v, c: v["acc0"], lambda v, c: v["log_n"]),
        _f("F42", "gamma, entropy", "perplexity_only", 2, ["gamma", "entropy"],
           g, lambda v, c: v["entropy"]),
    ]


def discovered_catalog() -> list[Formula]:
    """The 20 formulas found by symbolic regression, as single-feature builders."""
    return [
        _f("D1", "log(rho_s_bar)/log_n_comp", "all", 2, ["rho_s_bar", "log_n_comp"],
           lambda v, c: _pdiv(_plog(v["rho_s_bar"]), v["log_n_comp"])),
        _f("D2", "bits/gamma", "all", 2, ["bits", "gamma"],
           lambda v, c: _pdiv(v["bits"], v["gamma"])),
        # D3's multiplicative constant folds into the intercept after the log.
        _f("D3", "log((rho_s_bar + svd_rank)/entropy)", "perplexity_only", 3,
           ["rho_s_bar", "svd_rank", "entropy"],
           lambda v, c: _plog(_pdiv(v["rho_s_bar"] + v["svd_rank"], v["entropy"]))),
        _f("D4", "gamma + entropy + exp(gamma)", "perplexity_only", 2,
           ["gamma", "entropy"],
           lambda v, c: v["gamma"] + v["entropy"] + _pexp(v["gamma"])),
        _f("D5", "log(rho_s_bar/(entropy + c))", "perplexity_only", 2,
           ["rho_s_bar", "entropy"],
           lambda v, c: _plog(_pdiv(v["rho_s_bar"], v["entropy"] + c)), shift=True),
        _f("D6", "1/(bits + c)", "all", 1, ["bits"],
           lambda v, c: _pdiv(1.0, v["bits"] + c), shift=True),
        _f("D7", "1/bits", "all", 1, ["bits"],
           lambda v, c: _pdiv(1.0, v["bits"])),
        _f("D8", "exp(-gamma)", "all", 1, ["gamma"],
           lambda v, c: _pexp(-v["gamma"])),
        # D9's shift only rescales the slope: exp(-(g + c)) = exp(-c) exp(-g).
        _f("D9", "exp(-(gamma + c))", "all", 1, ["gamma"],
           lambda v, c: _pexp(-v["gamma"])),
        _f("D10", "1/sqrt(gamma + c)", "all", 1, ["gamma"],
           lambda v, c: _pdiv(1.0, math.sqrt(v["gamma"] + c)), shift=True),
        _f("D11", "1/sqrt(log_n_comp)", "all", 1, ["log_n_comp"],
           lambda v, c: _pdiv(1.0, math.sqrt(max(v["log_n_comp"], _EPS)))),
        _f("D12", "entropy/gamma", "perplexity_only", 2, ["entropy", "gamma"],
           lambda v, c: _pdiv(v["entropy"], v["gamma"])),
        _f("D13", "log(log(rho_eff_bar) * svd_rank)", "all", 2,
           ["rho_eff_bar", "svd_rank"],
           lambda v, c: _plog(_plog(v["rho_eff_bar"]) * v["svd_rank"])),
        _f("D14", "1/svd_rank + 1/gamma + bits", "all", 3,
           ["svd_rank", "gamma", "bits"],
           lambda v, c: _pdiv(1.0, v["svd_rank"]) + _pdiv(1.0, v["gamma"]) + v["bits"]),
        _f("D15", "entropy - gamma", "perplexity_only", 2, ["entropy", "gamma"],
           lambda v, c: v["entropy"] - v["gamma"]),
        _f("D16", "log(rho_s_bar)/log_n", "all", 2, ["rho_s_bar", "log_n"],
           lambda v, c: _pdiv(_plog(v["rho_s_bar"]), v["log_n"])),
        _f("D17", "bits", "all", 1, ["bits"], lambda v, c: v["bits"]),
        _f("D18", "c/bits", "all", 1, ["bits"],
           lambda v, c: _pdiv(1.0, v["bits"])),
        _f("D19", "c/sqrt(bits)", "all", 1, ["bits"],
           lambda v, c: _pdiv(1.0, math.sqrt(max(v["bits"], _EPS)))),
        _f("D20", "1/sqrt(bits + c)", "all", 1, ["bits"],
           lambda v, c: _pdiv(1.0, math.sqrt(max(v["bits"] + c, _EPS))), shift=True),
    ]


def default_predictor() -> Formula:
    """The headline interaction predictor: compression ratio times stable rank."""
    return _f("GSR", "gamma * rho_s_bar", "all", 2, ["gamma", "rho_s_bar"],
              lambda v, c: v["gamma"] * v["rho_s_bar"])


def full_catalog() -> list[Formula]:
    return template_catalog() + discovered_catalog() + [default_predictor()]


def catalog_by_id(formula_id: str) -> Formula:
    for f in full_catalog():
        if f.id == formula_id:
            return f
    raise DataError(f"unknown formula id {formula_id!r}")


def fit_ols(features, targets) -> np.ndarray:
    """Least squares on the intercept-augmented design; ridge fallback when singular."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
        raise DataError("features must be n x p with matching n-vector targets")
    n, p = f.shape
    if n < p + 2:
        raise DataError(f"need at least {p + 2} samples for {p} features, got {n}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in the regression inputs")
    z = np.column_stack([np.ones(n), f])
    beta, _, rank, _ = np.linalg.lstsq(z, y, rcond=None)
    if rank < z.shape[1]:
        warnings.warn("singular design; solving ridge-regularized normal equations",
                      DegenerateDesignWarning, stacklevel=2)
        gram = z.T @ z
        lam = 1e-10 * np.trace(gram) / gram.shape[0]
        beta = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), z.T @ y)
    return beta


def pearson(y, yhat) -> float:
    """Sample Pearson correlation; errors on fewer than 2 points or zero variance."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or y.size < 2:
        raise DataError("pearson needs two equal-length vectors of at least 2 entries")
    dy = y - y.mean()
    dz = yhat - yhat.mean()
    denom = np.sqrt((dy * dy).sum() * (dz * dz).sum())
    if denom == 0.0:
        raise DegeneracyError("degenerate correlation: zero variance")
    return float(np.clip((dy * dz).sum() / denom, -1.0, 1.0))


@dataclass
class FitResult:
    formula_id: str
    coefficients: np.ndarray
    train_r: float
    loo_r: float
    n: int
    target_kind: str
    shift: float | None = None
    n_skipped: int = 0

    def as_dict(self) -> dict:
        out = {
            "formula_id": self.formula_id,
            "coefficients": [float(b) for b in self.coefficients],
            "train_r": self.train_r,
            "loo_r": self.loo_r,
            "n": self.n,
            "target": self.target_kind,
        }
        if self.shift is not None:
            out["shift"] = self.shift
        if self.n_skipped:
            out["n_skipped"] = self.n_skipped
        return out


def _golden_section(objective, lo: float, hi: float, iters: int = 60) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = objective(d)
    return 0.5 * (a + b)


def _usable_records(formula: Formula, records, target_kind: str):
    fields_needed = _TARGET_FIELDS[target_kind]
    usable = []
    for rec in records:
        values = rec.field_values()
        if any(values.get(name) is None for name in formula.variables):
            continue
        if any(getattr(rec, name) is None for name in fields_needed):
            continue
        usable.append(rec)
    return usable


def _fit_with_shift(formula: Formula, recs, y: np.ndarray, target_kind: str):
    """Fit OLS, optimizing the formula's shift constant when it has one."""
    def features_for(c):
        return np.vstack([build_features(formula, r, target_kind, shift=c) for r in recs])

    if not formula.shift:
        feats = features_for(None)
        return fit_ols(feats, y), None, feats

    def objective(u):
        feats = features_for(10.0 ** u)
        if not np.all(np.isfinite(feats)):
            return np.inf
        try:
            beta = fit_ols(feats, y)
        except DataError:
            return np.inf
        resid = y - (np.column_stack([np.ones(len(y)), feats]) @ beta)
        return float(resid @ resid)

    lo, hi = math.log10(SHIFT_RANGE[0]), math.log10(SHIFT_RANGE[1])
    best_u = _golden_section(objective, lo, hi)
    c = 10.0 ** best_u
    feats = features_for(c)
    return fit_ols(feats, y), c, feats


def loo_correlation(formula: Formula, records, target_kind: str) -> FitResult:
    """Leave-one-out evaluation: refit on n-1 records, predict the held-out one.

    Returns the full-fit coefficients and train correlation alongside the
    pooled-prediction LOO correlation.
    """
    if not scope_allows(formula.scope, target_kind):
        raise ScopeError(f"{formula.id} is {formula.scope}; not admissible for "
                         f"target {target_kind!r}")
    usable = _usable_records(formula, records, target_kind)
    n, p = len(usable), len(formula.terms)
    if n < p + 3:
        raise DataError(f"{formula.id}: need at least {p + 3} usable records, got {n}")
    y = np.array([target_transform(r, target_kind) for r in usable])
    if np.ptp(y) == 0.0:
        raise DegeneracyError("degenerate target: constant over usable records")

    beta, shift, feats = _fit_with_shift(formula, usable, y, target_kind)
    train_pred = np.column_stack([np.ones(n), feats]) @ beta
    train_r = pearson(y, train_pred)

    preds = np.empty(n)
    for i in range(n):
        rest = usable[:i] + usable[i + 1:]
        beta_i, shift_i, _ = _fit_with_shift(formula, rest, np.delete(y, i), target_kind)
        xi = build_features(formula, usable[i], target_kind, shift=shift_i)
        preds[i] = beta_i[0] + xi @ beta_i[1:]
    loo_r = pearson(y, preds)
    return FitResult(formula.id, beta, train_r, loo_r, n, target_kind,
                     shift=shift, n_skipped=len(records) - n)


@dataclass
class FormulaRanking:
    ranked: list[FitResult]
    excluded: dict[str, str]


def select_best(formulas, records, target_kind: str) -> FormulaRanking:
    """Rank formulas by LOO correlation; ties prefer fewer variables, then id.

    Formulas outside the target's scope or failing to fit are excluded with
    the reason recorded.
    """
    results = []
    excluded = {}
    for formula in formulas:
        if not scope_allows(formula.scope, target_kind):
            excluded[formula.id] = f"scope {formula.scope} excludes target {target_kind}"
            continue
        try:
            results.append((formula, loo_correlation(formula, records, target_kind)))
        except (DataError, DegeneracyError) as exc:
            excluded[formula.id] = str(exc)
    if not results:
        raise DegeneracyError(f"no admissible formulas for target {target_kind!r}")
    results.sort(key=lambda pair: (-round(pair[1].loo_r, 9), pair[0].n_vars, pair[0].id))
    return FormulaRanking([fit for _, fit in results], excluded)
