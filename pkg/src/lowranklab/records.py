"""Observation records: one compression configuration's predictors and targets.

The CSV interchange format uses one column per field; an empty cell means the
field is missing. Perplexity/accuracy targets and several predictors are
optional so that records from different evaluation setups can coexist.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import DataError

LAYERS = ("attn", "mlp", "both")

CSV_COLUMNS = (
    "method", "task", "layer",
    "gamma", "log_n", "log_n_comp", "bits", "rho_s_bar", "rho_eff_bar",
    "svd_rank", "entropy", "k95_bar", "k99_bar", "gamma_attn", "gamma_mlp",
    "ppl", "ppl0", "acc", "acc0",
)

_REQUIRED = ("gamma", "log_n", "log_n_comp", "bits", "rho_s_bar", "rho_eff_bar", "svd_rank")


@dataclass
class ObservationRecord:
    gamma: float
    log_n: float
    log_n_comp: float
    bits: float
    rho_s_bar: float
    rho_eff_bar: float
    svd_rank: float
    entropy: float | None = None
    k95_bar: float | None = None
    k99_bar: float | None = None
    gamma_attn: float | None = None
    gamma_mlp: float | None = None
    ppl: float | None = None
    ppl0: float | None = None
    acc: float | None = None
    acc0: float | None = None
    task: str = ""
    layer: str = "both"
    method: str = ""

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise DataError(f"gamma {self.gamma} outside (0, 1]")
        if self.log_n < self.log_n_comp:
            raise DataError("log_n must be at least log_n_comp")
        if self.layer not in LAYERS:
            raise DataError(f"unknown layer {self.layer!r}")
        for name in ("gamma_attn", "gamma_mlp"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v <= 1.0:
                raise DataError(f"{name} {v} outside (0, 1]")
        for name in ("acc", "acc0"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 1.0:
                raise DataError(f"{name} {v} outside (0, 1)")
        for name in ("ppl", "ppl0"):
            v = getattr(self, name)
            if v is not None and v <= 0.0:
                raise DataError(f"{name} must be positive")

    def field_values(self) -> dict:
        """Numeric fields as a name -> value dict (missing fields are None)."""
        out = {}
        for f in fields(self):
            if f.name in ("task", "layer", "method"):
                continue
            out[f.name] = getattr(self, f.name)
        return out


def read_observations(path) -> list[ObservationRecord]:
    """Parse the observation CSV; empty cells become missing fields."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing observation file: {path}")
    records = []
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing_cols = [c for c in _REQUIRED if c not in header]
        if missing_cols:
            raise DataError(f"observation CSV missing columns: {missing_cols}")
        for lineno, row in enumerate(reader, start=2):
            kwargs = {}
            for col in CSV_COLUMNS:
                raw = (row.get(col) or "").strip()
                if col in ("method", "task", "layer"):
                    if raw:
                        kwargs[col] = raw
                    continue
                if raw == "":
                    if col in _REQUIRED:
                        raise DataError(f"line {lineno}: required column {col!r} is empty")
                    continue
                try:
                    kwargs[col] = float(raw)
                except ValueError as exc:
                    raise DataError(f"line {lineno}: bad value {raw!r} in {col!r}") from exc
            try:
                records.append(ObservationRecord(**kwargs))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
    return records


def write_observations(records, path) -> None:
    """Write records using full float precision so a round trip is exact."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            row = []
            for col in CSV_COLUMNS:
                value = getattr(rec, col)
                if value is None:
                    row.append("")
                elif isinstance(value, float):
                    row.append(repr(value))
                else:
                    row.append(value)
            writer.writerow(row)


def filter_records(records, layer: str | None = None, task: str | None = None,
                   method: str | None = None) -> list[ObservationRecord]:
    out = list(records)
    if layer is not None:
        out = [r for r in out if r.layer == layer]
    if task is not None:
        out = [r for r in out if r.task == task]
    if method is not None:
        out = [r for r in out if r.method == method]
    return out
