"""Sparse multivariate polynomial arithmetic over entity-indexed variables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

DEFAULT_TERM_LIMIT = 100_000


class PolynomialError(ValueError):
    """Base class for polynomial arithmetic failures."""


class MissingVariableError(PolynomialError):
    """An assignment or box does not cover some variable of the polynomial."""


class TermLimitError(PolynomialError):
    """An operation would exceed the configured term-count cap."""


class NonFiniteError(PolynomialError):
    """A coefficient or operand stopped being a finite float."""


def _require_finite(x, what: str) -> float:
    try:
        x = float(x)
    except (TypeError, ValueError):
        raise NonFiniteError(f"{what} must be a real number, got {x!r}") from None
    if not math.isfinite(x):
        raise NonFiniteError(f"{what} must be finite, got {x!r}")
    return x


@dataclass(frozen=True, order=True)
class VarId:
    """One indeterminate: a single attribute contributed by a single entity.

    Two VarIds name the same indeterminate iff both fields match.  Budget
    accounting aggregates spends by ``entity`` alone, so one person
    contributing several attributes is charged for all of them together.
    """

    entity: str
    attribute: str = ""

    def label(self) -> str:
        return f"{self.entity}:{self.attribute}" if self.attribute else self.entity


@dataclass(frozen=True)
class Monomial:
    """Product of variables with positive integer exponents; the empty product is 1.

    ``powers`` is kept sorted by variable with every exponent >= 1, so equal
    monomials are structurally identical and hash alike.
    """

    powers: tuple[tuple[VarId, int], ...] = ()

    @classmethod
    def unit(cls) -> "Monomial":
        return _UNIT

    @classmethod
    def of(cls, exponents: Mapping[VarId, int]) -> "Monomial":
        items = []
        for v, e in exponents.items():
            if e == 0:
                continue
            if not isinstance(e, int) or e < 0:
                raise PolynomialError(
                    f"exponent of {v.label()} must be a non-negative integer, got {e!r}"
                )
            items.append((v, e))
        return cls(tuple(sorted(items)))

    @property
    def degree(self) -> int:
        return sum(e for _, e in self.powers)

    def degree_in(self, v: VarId) -> int:
        for var, e in self.powers:
            if var == v:
                return e
        return 0

    def variables(self) -> frozenset[VarId]:
        return frozenset(v for v, _ in self.powers)

    def __mul__(self, other: "Monomial") -> "Monomial":
        merged = dict(self.powers)
        for v, e in other.powers:
            merged[v] = merged.get(v, 0) + e
        return Monomial(tuple(sorted(merged.items())))

    def without_one(self, v: VarId) -> "Monomial":
        """This monomial with one power of v removed (differentiation step)."""
        out = []
        for var, e in self.powers:
            if var == v:
                if e > 1:
                    out.append((var, e - 1))
            else:
                out.append((var, e))
        return Monomial(tuple(out))

    def __str__(self) -> str:
        if not self.powers:
            return "1"
        parts = []
        for v, e in self.powers:
            parts.append(f"x[{v.label()}]" if e == 1 else f"x[{v.label()}]^{e}")
        return "*".join(parts)


_UNIT = Monomial()


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi] with finite endpoints."""

    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "lo", _require_finite(self.lo, "interval lower end"))
        object.__setattr__(self, "hi", _require_finite(self.hi, "interval upper end"))
        if self.lo > self.hi:
            raise ValueError(f"interval requires lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, x: float) -> "Interval":
        x = _require_finite(x, "interval point")
        return cls(x, x)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float, slack: float = 0.0) -> bool:
        return self.lo - slack <= x <= self.hi + slack

    def hull_with(self, x: float) -> "Interval":
        """Smallest interval covering both self and the point x."""
        x = _require_finite(x, "hull point")
        return Interval(min(self.lo, x), max(self.hi, x))

    def abs_max(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def __add__(self, other: "Interval") -> "Interval":
        return Interval(self.lo + other.lo, self.hi + other.hi)

    def __neg__(self) -> "Interval":
        return Interval(-self.hi, -self.lo)

    def scale(self, c: float) -> "Interval":
        c = _require_finite(c, "scale factor")
        a, b = c * self.lo, c * self.hi
        return Interval(min(a, b), max(a, b))

    def __mul__(self, other: "Interval") -> "Interval":
        products = (
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        )
        return Interval(min(products), max(products))

    def power(self, k: int) -> "Interval":
        """Exact range of x**k over the interval (not repeated multiplication)."""
        if not isinstance(k, int) or k < 0:
            raise PolynomialError(f"interval power must be a non-negative integer, got {k!r}")
        if k == 0:
            return Interval(1.0, 1.0)
        if k % 2 == 1:
            return Interval(self.lo**k, self.hi**k)
        lo_k, hi_k = abs(self.lo) ** k, abs(self.hi) ** k
        if self.lo <= 0.0 <= self.hi:
            return Interval(0.0, max(lo_k, hi_k))
        return Interval(min(lo_k, hi_k), max(lo_k, hi_k))


class Polynomial:
    """Canonical sparse polynomial: a map from monomials to nonzero coefficients.

    ``2*x[A]*x[B] + 3`` is stored as ``{Monomial(x_A*x_B): 2.0, Monomial(): 3.0}``.
    Like terms are always collected and exact-zero coefficients dropped, so
    structural equality coincides with semantic equality.  Instances are
    treated as immutable; every operation returns a new polynomial.
    """

    __slots__ = ("_terms",)

    def __init__(self, terms: Mapping[Monomial, float] | None = None):
        clean: dict[Monomial, float] = {}
        if terms:
            for m, c in terms.items():
                c = float(c)
                if not math.isfinite(c):
                    raise NonFiniteError(f"non-finite coefficient {c!r} on term {m}")
                if c != 0.0:
                    clean[m] = c
        self._terms = clean

    # -- construction -------------------------------------------------------

    @classmethod
    def zero(cls) -> "Polynomial":
        return cls()

    @classmethod
    def constant(cls, c) -> "Polynomial":
        c = _require_finite(c, "constant")
        return cls({_UNIT: c})

    @classmethod
    def variable(cls, v: VarId) -> "Polynomial":
        return cls({Monomial(((v, 1),)): 1.0})

    # -- inspection ----------------------------------------------------------

    def items(self) -> Iterator[tuple[Monomial, float]]:
        return iter(self._terms.items())

    def coefficient(self, m: Monomial) -> float:
        return self._terms.get(m, 0.0)

    @property
    def term_count(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def degree(self) -> int:
        return max((m.degree for m in self._terms), default=0)

    def degree_in(self, v: VarId) -> int:
        return max((m.degree_in(v) for m in self._terms), default=0)

    def variables(self) -> frozenset[VarId]:
        out: set[VarId] = set()
        for m in self._terms:
            out.update(m.variables())
        return frozenset(out)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        """Terms in graded-lexicographic order, highest first."""
        var_order = sorted(self.variables())
        index = {v: i for i, v in enumerate(var_order)}

        def key(item):
            m, _ = item
            vec = [0] * len(var_order)
            for v, e in m.powers:
                vec[index[v]] = e
            return (-m.degree, [-e for e in vec])

        return sorted(self._terms.items(), key=key)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other: "Polynomial") -> "Polynomial":
        if not isinstance(other, Polynomial):
            return NotImplemented
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(out)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self + (-other)

    def __neg__(self) -> "Polynomial":
        return Polynomial({m: -c for m, c in self._terms.items()})

    def scale(self, c) -> "Polynomial":
        c = _require_finite(c, "scale factor")
        return Polynomial({m: c * coeff for m, coeff in self._terms.items()})

    def mul(self, other: "Polynomial", term_limit: int = DEFAULT_TERM_LIMIT) -> "Polynomial":
        out: dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = m1 * m2
                out[m] = out.get(m, 0.0) + c1 * c2
            if len(out) > term_limit:
                raise TermLimitError(
                    f"product exceeds the term cap of {term_limit} terms"
                )
        return Polynomial(out)

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.mul(other)

    def power(self, k: int, term_limit: int = DEFAULT_TERM_LIMIT) -> "Polynomial":
        if not isinstance(k, int) or k < 0:
            raise PolynomialError(f"exponent must be a non-negative integer, got {k!r}")
        out = Polynomial.constant(1.0)
        base = self
        e = k
        while e:
            if e & 1:
                out = out.mul(base, term_limit=term_limit)
            e >>= 1
            if e:
                base = base.mul(base, term_limit=term_limit)
        return out

    def __pow__(self, k: int) -> "Polynomial":
        return self.power(k)

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, assignment: Mapping[VarId, float]) -> float:
        """Exact float evaluation; every variable must have an assigned value."""
        total = 0.0
        for m, c in self._terms.items():
            term = c
            for v, e in m.powers:
                if v not in assignment:
                    raise MissingVariableError(f"no value assigned for variable {v.label()}")
                term *= assignment[v] ** e
            total += term
        return total

    def partial(self, v: VarId) -> "Polynomial":
        """Formal partial derivative with respect to v."""
        out: dict[Monomial, float] = {}
        for m, c in self._terms.items():
            e = m.degree_in(v)
            if e == 0:
                continue
            dm = m.without_one(v)
            out[dm] = out.get(dm, 0.0) + c * e
        return Polynomial(out)

    def range_over(self, box: Mapping[VarId, Interval]) -> Interval:
        """Sound interval bound on the polynomial's range over the box.

        Each monomial uses the exact per-variable power rule, so single-term
        polynomials are bounded tightly; sums of terms may be conservative.
        """
        lo = hi = 0.0
        for m, c in self._terms.items():
            r = Interval.point(c)
            for v, e in m.powers:
                if v not in box:
                    raise MissingVariableError(f"no box entry for variable {v.label()}")
                r = r * box[v].power(e)
            lo += r.lo
            hi += r.hi
        return Interval(lo, hi)

    # -- equality and text ------------------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._terms == other._terms

    def __ne__(self, other) -> bool:
        eq = self.__eq__(other)
        return NotImplemented if eq is NotImplemented else not eq

    __hash__ = None  # mutable-ish container semantics; not usable as a dict key

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        chunks: list[str] = []
        for m, c in self.sorted_terms():
            mag = abs(c)
            if not m.powers:
                body = f"{mag:g}"
            elif mag == 1.0:
                body = str(m)
            else:
                body = f"{mag:g}*{m}"
            if not chunks:
                chunks.append(f"-{body}" if c < 0 else body)
            else:
                chunks.append(f"- {body}" if c < 0 else f"+ {body}")
        return " ".join(chunks)

    def __repr__(self) -> str:
        return f"Polynomial({self})"
