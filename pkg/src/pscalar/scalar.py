"""Private scalars: a polynomial query plus the per-entity inputs it ranges over."""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from typing import Iterable, Mapping, NewType

from .poly import (
    DEFAULT_TERM_LIMIT,
    Interval,
    Monomial,
    Polynomial,
    VarId,
    _require_finite,
)

# Opaque reference a remote session holds instead of the scalar itself.
ScalarHandle = NewType("ScalarHandle", str)


class MetadataConflictError(ValueError):
    """One entity variable carries two different (value, floor, ceiling) records."""


class UnsupportedOperationError(TypeError):
    """The requested operation would leave the polynomial closure."""


class UnknownEntityError(ValueError):
    """The named entity does not contribute to this scalar."""


def clip(value: float, floor: float, ceiling: float) -> float:
    """Project value onto [floor, ceiling]."""
    return min(max(value, floor), ceiling)


@dataclass(frozen=True)
class EntityInput:
    """One entity's contribution: the raw private value and its public bounds.

    ``value`` is owner-side only: it must never be serialized toward a
    data-scientist session.  ``floor`` and ``ceiling`` are public metadata.
    """

    value: float
    floor: float
    ceiling: float

    def __post_init__(self):
        object.__setattr__(self, "value", _require_finite(self.value, "value"))
        object.__setattr__(self, "floor", _require_finite(self.floor, "floor"))
        object.__setattr__(self, "ceiling", _require_finite(self.ceiling, "ceiling"))
        if self.floor > self.ceiling:
            raise ValueError(
                f"floor must not exceed ceiling, got [{self.floor}, {self.ceiling}]"
            )

    @property
    def clipped(self) -> float:
        return clip(self.value, self.floor, self.ceiling)

    @property
    def interval(self) -> Interval:
        return Interval(self.floor, self.ceiling)


class PrivateScalar:
    """A derived scalar held on the data owner's side.

    The scalar is a polynomial over entity variables together with the
    per-entity input records.  Inputs are clipped to their public bounds
    exactly once, at the leaves, when the value is evaluated.  Entities whose
    variables cancelled out of the polynomial stay in ``inputs`` so their
    (zero) contribution remains visible downstream.

    Instances are immutable by convention: operations return new scalars.
    """

    __slots__ = ("poly", "inputs")

    def __init__(self, poly: Polynomial, inputs: Mapping[VarId, EntityInput]):
        missing = [v for v in poly.variables() if v not in inputs]
        if missing:
            names = ", ".join(sorted(v.label() for v in missing))
            raise ValueError(f"polynomial variables without input records: {names}")
        for v, rec in inputs.items():
            if not isinstance(v, VarId) or not isinstance(rec, EntityInput):
                raise TypeError("inputs must map VarId to EntityInput")
        self.poly = poly
        self.inputs = dict(inputs)

    # -- construction ---------------------------------------------------------

    @classmethod
    def make_private(
        cls,
        entity: VarId | str,
        value: float,
        floor: float,
        ceiling: float,
        attribute: str = "",
    ) -> "PrivateScalar":
        """Root scalar for one entity's raw input with its public bounds."""
        v = entity if isinstance(entity, VarId) else VarId(str(entity), attribute)
        return cls(Polynomial.variable(v), {v: EntityInput(value, floor, ceiling)})

    @classmethod
    def from_public(cls, c: float) -> "PrivateScalar":
        """Constant scalar depending on no entity."""
        return cls(Polynomial.constant(c), {})

    # -- inspection -------------------------------------------------------------

    def entities(self) -> frozenset[VarId]:
        return frozenset(self.inputs)

    def input_for(self, v: VarId) -> EntityInput:
        try:
            return self.inputs[v]
        except KeyError:
            raise UnknownEntityError(f"entity {v.label()} does not contribute here") from None

    def box(self) -> dict[VarId, Interval]:
        """Public box: every entity variable's [floor, ceiling] interval."""
        return {v: rec.interval for v, rec in self.inputs.items()}

    def clipped_assignment(self) -> dict[VarId, float]:
        return {v: rec.clipped for v, rec in self.inputs.items()}

    def degree(self) -> int:
        return self.poly.degree()

    @property
    def term_count(self) -> int:
        return self.poly.term_count

    def value(self) -> float:
        """Owner-side evaluation: clip every input once, then evaluate the poly."""
        return self.poly.evaluate(self.clipped_assignment())

    # -- arithmetic ---------------------------------------------------------------

    def _merged_inputs(self, other: "PrivateScalar") -> dict[VarId, EntityInput]:
        out = dict(self.inputs)
        for v, rec in other.inputs.items():
            seen = out.get(v)
            if seen is not None and seen != rec:
                raise MetadataConflictError(
                    f"variable {v.label()} carries conflicting input records"
                )
            out[v] = rec
        return out

    def _binary(self, other, combine, term_limit: int) -> "PrivateScalar":
        if isinstance(other, PrivateScalar):
            return PrivateScalar(
                combine(self.poly, other.poly, term_limit), self._merged_inputs(other)
            )
        if isinstance(other, numbers.Real):
            const = Polynomial.constant(float(other))
            return PrivateScalar(combine(self.poly, const, term_limit), dict(self.inputs))
        return NotImplemented

    def __add__(self, other):
        return self._binary(other, lambda a, b, _: a + b, DEFAULT_TERM_LIMIT)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b, _: a - b, DEFAULT_TERM_LIMIT)

    def __rsub__(self, other):
        negated = -self
        return negated.__add__(other)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            return self.scale(float(other))
        return self._binary(other, lambda a, b, lim: a.mul(b, term_limit=lim), DEFAULT_TERM_LIMIT)

    __rmul__ = __mul__

    def __neg__(self) -> "PrivateScalar":
        return PrivateScalar(-self.poly, dict(self.inputs))

    def scale(self, c: float) -> "PrivateScalar":
        return PrivateScalar(self.poly.scale(c), dict(self.inputs))

    def shift(self, c: float) -> "PrivateScalar":
        return PrivateScalar(self.poly + Polynomial.constant(c), dict(self.inputs))

    def __pow__(self, k) -> "PrivateScalar":
        if not isinstance(k, int) or isinstance(k, bool) or k < 0:
            raise UnsupportedOperationError(
                f"only non-negative integer powers stay polynomial, got {k!r}"
            )
        return PrivateScalar(self.poly.power(k), dict(self.inputs))

    def __truediv__(self, other):
        raise UnsupportedOperationError(
            "division is not polynomial; rescale by a public constant instead"
        )

    __rtruediv__ = __truediv__

    def __repr__(self) -> str:
        ents = ",".join(sorted(v.label() for v in self.inputs))
        return f"PrivateScalar({self.poly} | entities: {ents or 'none'})"


def sum_scalars(scalars: Iterable[PrivateScalar]) -> PrivateScalar:
    """Fold a collection of scalars into their sum (empty sum is the public 0)."""
    total: PrivateScalar | None = None
    for s in scalars:
        total = s if total is None else total + s
    return PrivateScalar.from_public(0.0) if total is None else total
