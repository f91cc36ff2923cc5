"""Genetic-programming symbolic regression over observation records.

Expression trees combine record variables, ephemeral constants, unary ops
(neg, inv, sqrt, log, exp) and binary ops (add, sub, mul, div). Protected
evaluation keeps every finite input finite. The search is a pure function of
(records, config): one seeded stream drives initialization, selection and
breeding in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formulas
from .errors import DataError, DegeneracyError

VARIABLES = ("gamma", "log_n", "log_n_comp", "bits", "rho_s_bar",
             "rho_eff_bar", "svd_rank", "entropy")
UNARY_OPS = ("neg", "inv", "sqrt", "log", "exp")
BINARY_OPS = ("add", "sub", "mul", "div")
_NONLINEAR_UNARY = frozenset({"inv", "sqrt", "log", "exp"})

_EPS = 1e-12
_EXP_CLAMP = 50.0
_MAX_TREE_DEPTH = 8


class Expression:
    """A node in an expression tree: variable, constant, or operator."""

    __slots__ = ("op", "value", "children")

    def __init__(self, op, value=None, children=()):
        self.op = op
        self.value = value
        self.children = list(children)

    @property
    def size(self) -> int:
        return 1 + sum(ch.size for ch in self.children)

    @property
    def depth(self) -> int:
        if not self.children:
            return 1
        return 1 + max(ch.depth for ch in self.children)

    def variables(self) -> set:
        if self.op == "var":
            return {self.value}
        out = set()
        for ch in self.children:
            out |= ch.variables()
        return out

    def nonlinear_count(self) -> int:
        count = sum(ch.nonlinear_count() for ch in self.children)
        if self.op in _NONLINEAR_UNARY:
            count += 1
        elif self.op == "div" and self.children[1].op != "const":
            count += 1
        return count

    def copy(self) -> "Expression":
        return Expression(self.op, self.value, [ch.copy() for ch in self.children])

    def to_prefix(self) -> str:
        if self.op == "var":
            return self.value
        if self.op == "const":
            return repr(self.value)
        inner = ", ".join(ch.to_prefix() for ch in self.children)
        return f"{self.op}({inner})"

    def evaluate(self, columns: dict):
        if self.op == "var":
            return columns[self.value]
        if self.op == "const":
            return self.value
        if self.op == "neg":
            return -self.children[0].evaluate(columns)
        if self.op == "inv":
            return _protected_div(1.0, self.children[0].evaluate(columns))
        if self.op == "sqrt":
            return np.sqrt(np.abs(self.children[0].evaluate(columns)))
        if self.op == "log":
            return np.log(np.maximum(np.abs(self.children[0].evaluate(columns)), _EPS))
        if self.op == "exp":
            return np.exp(np.minimum(self.children[0].evaluate(columns), _EXP_CLAMP))
        a = self.children[0].evaluate(columns)
        b = self.children[1].evaluate(columns)
        if self.op == "add":
            return a + b
        if self.op == "sub":
            return a - b
        if self.op == "mul":
            return a * b
        return _protected_div(a, b)

    def __repr__(self):
        return f"Expression({self.to_prefix()})"


def _protected_div(a, b):
    b = np.asarray(b, dtype=np.float64)
    safe = np.where(np.abs(b) < _EPS, np.copysign(_EPS, b), b)
    return a / safe


@dataclass
class GpConfig:
    population: int = 1000
    generations: int = 20
    tournament_size: int = 20
    parsimony: float = 1e-3
    p_crossover: float = 0.9
    p_subtree: float = 0.05
    p_hoist: float = 0.05
    p_point: float = 0.05
    seed: int = 0
    max_vars: int = 3
    max_nonlinear: int = 2

    def __post_init__(self):
        if self.population < 1 or self.generations < 1:
            raise DataError("population and generations must be at least 1")
        for name in ("p_crossover", "p_subtree", "p_hoist", "p_point"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.tournament_size < 1:
            raise DataError("tournament size must be at least 1")


def eval_expr(expr: Expression, record) -> float:
    """Evaluate an expression on one record; missing variables are an error."""
    values = record.field_values()
    columns = {}
    for name in expr.variables():
        if values.get(name) is None:
            raise DataError(f"record missing variable {name!r}")
        columns[name] = values[name]
    return float(np.asarray(expr.evaluate(columns)))


def complexity_filter(expr: Expression, config: GpConfig) -> bool:
    """True iff the expression obeys the variable and nonlinearity budgets."""
    return (len(expr.variables()) <= config.max_vars
            and expr.nonlinear_count() <= config.max_nonlinear)


def _random_constant(rng) -> float:
    magnitude = 10.0 ** rng.uniform(-3.0, 3.0)
    return float(magnitude if rng.random() < 0.5 else -magnitude)


def _random_terminal(rng, variables) -> Expression:
    if variables and rng.random() < 0.8:
        return Expression("var", variables[int(rng.integers(len(variables)))])
    return Expression("const", _random_constant(rng))


_ALL_OPS = UNARY_OPS + BINARY_OPS


def _random_tree(rng, variables, depth: int, method: str) -> Expression:
    if depth <= 0 or (method == "grow" and rng.random() < 0.3):
        return _random_terminal(rng, variables)
    op = _ALL_OPS[int(rng.integers(len(_ALL_OPS)))]
    arity = 1 if op in UNARY_OPS else 2
    return Expression(op, None, [_random_tree(rng, variables, depth - 1, method)
                                 for _ in range(arity)])


def _nodes_with_parents(root: Expression):
    out = [(None, 0, root)]
    stack = [root]
    while stack:
        node = stack.pop()
        for i, ch in enumerate(node.children):
            out.append((node, i, ch))
            stack.append(ch)
    return out


def _pick_node(rng, root: Expression):
    nodes = _nodes_with_parents(root)
    return nodes[int(rng.integers(len(nodes)))]


def _splice(root: Expression, parent, idx: int, replacement: Expression) -> Expression:
    if parent is None:
        return replacement
    parent.children[idx] = replacement
    return root


def _crossover(rng, a: Expression, b: Expression) -> Expression:
    child = a.copy()
    parent, idx, _ = _pick_node(rng, child)
    _, _, donor = _pick_node(rng, b)
    child = _splice(child, parent, idx, donor.copy())
    return child if child.depth <= _MAX_TREE_DEPTH else a.copy()


def _subtree_mutation(rng, a: Expression, variables) -> Expression:
    child = a.copy()
    parent, idx, _ = _pick_node(rng, child)
    child = _splice(child, parent, idx, _random_tree(rng, variables, 2, "grow"))
    return child if child.depth <= _MAX_TREE_DEPTH else a.copy()


def _hoist_mutation(rng, a: Expression) -> Expression:
    child = a.copy()
    parent, idx, node = _pick_node(rng, child)
    _, _, inner = _pick_node(rng, node)
    return _splice(child, parent, idx, inner.copy())


def _point_mutation(rng, a: Expression, variables) -> Expression:
    child = a.copy()
    _, _, node = _pick_node(rng, child)
    if node.op == "var":
        node.value = variables[int(rng.integers(len(variables)))] if variables else node.value
    elif node.op == "const":
        node.value = _random_constant(rng)
    elif node.op in UNARY_OPS:
        node.op = UNARY_OPS[int(rng.integers(len(UNARY_OPS)))]
    else:
        node.op = BINARY_OPS[int(rng.integers(len(BINARY_OPS)))]
    return child


def _fitness(expr: Expression, columns: dict, y: np.ndarray, config: GpConfig) -> float:
    if not complexity_filter(expr, config):
        return np.inf
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        pred = np.broadcast_to(np.asarray(expr.evaluate(columns), dtype=np.float64),
                               y.shape)
        resid = pred - y
        mse = float(np.mean(resid * resid))
    if not np.isfinite(mse):
        return np.inf
    return mse + config.parsimony * expr.size


@dataclass
class GpResult:
    expression: Expression
    prefix: str
    fit: formulas.FitResult | None
    fitness_trace: list[float] = field(default_factory=list)
    n_records: int = 0


def gp_discover(records, target_kind: str, config: GpConfig | None = None) -> GpResult:
    """Evolve an expression predicting the target; returns the winner with its LOO fit.

    Entropy is only offered as a variable for perplexity targets, matching the
    catalog scope rule. The generation-best fitness trace is nonincreasing
    because the best individual is carried over unchanged.
    """
    config = config or GpConfig()
    target_fields = formulas._TARGET_FIELDS[target_kind]
    usable = [r for r in records
              if all(getattr(r, f) is not None for f in target_fields)]
    if len(usable) < 10:
        raise DataError(f"need at least 10 records with {target_kind!r} targets, "
                        f"got {len(usable)}")
    y = np.array([formulas.target_transform(r, target_kind) for r in usable])
    if np.ptp(y) == 0.0:
        raise DegeneracyError("degenerate target: constant over usable records")

    allowed = [v for v in VARIABLES
               if all(r.field_values().get(v) is not None for r in usable)]
    if target_kind in formulas.ACCURACY_TARGETS and "entropy" in allowed:
        allowed.remove("entropy")
    variables = tuple(allowed)
    columns = {v: np.array([r.field_values()[v] for r in usable]) for v in variables}

    rng = np.random.default_rng(config.seed)
    population = []
    for i in range(config.population):
        method = "grow" if i % 2 == 0 else "full"
        depth = 1 + (i % 3)
        population.append(_random_tree(rng, variables, depth, method))

    def tournament(fits):
        idx = rng.integers(0, len(population), size=config.tournament_size)
        best = idx[int(np.argmin(fits[idx]))]
        return population[int(best)]

    trace = []
    fits = np.array([_fitness(e, columns, y, config) for e in population])
    for _ in range(config.generations):
        elite_idx = int(np.argmin(fits))
        trace.append(float(fits[elite_idx]))
        nxt = [population[elite_idx].copy()]
        while len(nxt) < config.population:
            parent = tournament(fits)
            if rng.random() < config.p_crossover:
                child = _crossover(rng, parent, tournament(fits))
            else:
                child = parent.copy()
            if rng.random() < config.p_subtree:
                child = _subtree_mutation(rng, child, variables)
            if rng.random() < config.p_hoist:
                child = _hoist_mutation(rng, child)
            if rng.random() < config.p_point:
                child = _point_mutation(rng, child, variables)
            nxt.append(child)
        population = nxt
        fits = np.array([_fitness(e, columns, y, config) for e in population])

    best_idx = int(np.argmin(fits))
    trace.append(float(fits[best_idx]))
    best = population[best_idx]
    if not np.isfinite(fits[best_idx]):
        raise DegeneracyError("no admissible expression under the complexity constraints")

    wrapped = formulas.Formula(
        id="GP", label=best.to_prefix(),
        scope="perplexity_only" if "entropy" in best.variables() else "all",
        n_vars=len(best.variables()),
        variables=tuple(sorted(best.variables())),
        terms=(lambda v, c: float(np.asarray(best.evaluate(v))),),
    )
    try:
        fit = formulas.loo_correlation(wrapped, usable, target_kind)
    except (DataError, DegeneracyError):
        fit = None
    return GpResult(best, best.to_prefix(), fit, trace, len(usable))
