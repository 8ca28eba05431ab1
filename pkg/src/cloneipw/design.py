"""Small term algebra for building regression design matrices.

A :class:`DesignSpec` is an ordered list of terms.  Each term turns a
column dictionary (name -> 1-d array over analysis rows) into one or more
design columns.  The vocabulary is deliberately small: intercept, numeric
main effects, categorical expansions, indicator bins over a numeric
column, time bases (per-visit factor, natural cubic spline, log time),
and pairwise interactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SchemaError
from .glm import quantile_knots, spline_basis


class Term:
    """Interface: build(data) -> (2-d array, list of column names)."""

    def build(self, data):  # pragma: no cover - abstract
        raise NotImplementedError

    def term_names(self) -> tuple[str, ...]:
        raise NotImplementedError


def _col(data, name):
    try:
        return np.asarray(data[name], dtype=float)
    except KeyError:
        raise SchemaError(f"design term references unknown column {name!r}") from None


@dataclass(frozen=True)
class Intercept(Term):
    def build(self, data):
        n = len(next(iter(data.values())))
        return np.ones((n, 1)), ["intercept"]

    def term_names(self):
        return ("intercept",)


@dataclass(frozen=True)
class Numeric(Term):
    column: str

    def build(self, data):
        return _col(data, self.column)[:, None], [self.column]

    def term_names(self):
        return (self.column,)


@dataclass(frozen=True)
class Categorical(Term):
    """Indicator expansion against a reference level.

    Levels must be supplied so the design is stable across data subsets.
    """

    column: str
    levels: tuple
    reference: object = None

    def build(self, data):
        values = np.asarray(data.get(self.column))
        if values is None or self.column not in data:
            raise SchemaError(f"design term references unknown column {self.column!r}")
        ref = self.levels[0] if self.reference is None else self.reference
        cols, names = [], []
        for lv in self.levels:
            if lv == ref:
                continue
            cols.append((values == lv).astype(float))
            names.append(f"{self.column}[{lv}]")
        if not cols:
            raise ConfigError(f"categorical term {self.column!r} needs at least two levels")
        return np.column_stack(cols), names

    def term_names(self):
        return (self.column,)


@dataclass(frozen=True)
class Bins(Term):
    """Indicators for a numeric column falling in half-open ranges.

    ``edges`` are interval breakpoints; the indicator set deliberately
    omits the reference range so the intercept absorbs it.  An interval
    (lo, hi] is encoded as lo < x <= hi with -inf/inf allowed.
    """

    column: str
    intervals: tuple  # of (lo, hi) pairs, reference range excluded

    def build(self, data):
        x = _col(data, self.column)
        cols, names = [], []
        for lo, hi in self.intervals:
            cols.append(((x > lo) & (x <= hi)).astype(float))
            names.append(f"{self.column}({lo},{hi}]")
        return np.column_stack(cols), names

    def term_names(self):
        return (self.column,)


@dataclass(frozen=True)
class TimeFactor(Term):
    """Per-visit indicator basis for the time-specific intercept."""

    months: tuple
    reference: int | None = None
    column: str = "t"

    def build(self, data):
        t = _col(data, self.column)
        ref = self.months[0] if self.reference is None else self.reference
        cols, names = [], []
        for m in self.months:
            if m == ref:
                continue
            cols.append((t == m).astype(float))
            names.append(f"t[{m}]")
        if not cols:  # single analyzed month: nothing beyond the intercept
            n = len(t)
            return np.empty((n, 0)), []
        return np.column_stack(cols), names

    def term_names(self):
        return ("t",)


@dataclass(frozen=True)
class TimeSpline(Term):
    """Natural cubic spline in the visit index."""

    knots: tuple
    column: str = "t"

    def build(self, data):
        t = _col(data, self.column)
        basis = spline_basis(t, np.asarray(self.knots, dtype=float))
        names = [f"t_spline{j}" for j in range(basis.shape[1])]
        return basis, names

    def term_names(self):
        return ("t",)


@dataclass(frozen=True)
class LogTime(Term):
    """ln(t - origin + 1); zero at the origin month."""

    origin: int
    column: str = "t"

    def build(self, data):
        t = _col(data, self.column)
        return np.log(t - self.origin + 1.0)[:, None], [f"log_t{self.origin}"]

    def term_names(self):
        return ("t",)


@dataclass(frozen=True)
class Interaction(Term):
    left: Term
    right: Term

    def build(self, data):
        xl, nl = self.left.build(data)
        xr, nr = self.right.build(data)
        cols, names = [], []
        for j, a in enumerate(nl):
            for k, b in enumerate(nr):
                cols.append(xl[:, j] * xr[:, k])
                names.append(f"{a}:{b}")
        return np.column_stack(cols), names

    def term_names(self):
        return self.left.term_names() + self.right.term_names()


@dataclass
class DesignSpec:
    """Ordered list of terms; builds a design matrix with unique names."""

    terms: list = field(default_factory=list)

    def build(self, data) -> tuple[np.ndarray, list[str]]:
        if not self.terms:
            raise ConfigError("design spec has no terms")
        mats, names = [], []
        for term in self.terms:
            m, n = term.build(data)
            mats.append(m)
            names.extend(n)
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate design column name(s): {', '.join(dup)}")
        return np.hstack(mats), names

    def term_names(self) -> set:
        out = set()
        for term in self.terms:
            out.update(term.term_names())
        return out


def time_spline_from_data(t_values, probs=(0.05, 0.35, 0.65, 0.95)) -> TimeSpline:
    return TimeSpline(knots=tuple(quantile_knots(t_values, probs)))
