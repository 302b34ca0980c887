"""Shared fixtures and converters between package objects and oracle data."""

from __future__ import annotations

import random

import pytest

from pscalar.poly import Polynomial, VarId
from pscalar.scalar import PrivateScalar


def to_terms(poly: Polynomial):
    """Convert a package polynomial to the oracle's plain term-list form."""
    out = []
    for mono, coeff in poly.sorted_terms():
        out.append((coeff, {v.label(): e for v, e in mono.powers}))
    return out


def to_box(scalar: PrivateScalar, *, include_origin: bool = False):
    """Oracle box (label -> (lo, hi)) for a scalar, optionally hulled with 0."""
    box = {}
    for v in scalar.entities():
        rec = scalar.input_for(v)
        lo, hi = rec.floor, rec.ceiling
        if include_origin:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        box[v.label()] = (lo, hi)
    return box


def random_scalar(
    rng: random.Random,
    *,
    max_vars: int = 4,
    max_terms: int = 8,
    max_power: int = 3,
    allow_negative_floor: bool = True,
) -> PrivateScalar:
    """A random private polynomial query over fresh entities with random bounds."""
    n_vars = rng.randint(1, max_vars)
    parts = []
    for k in range(n_vars):
        lo = rng.uniform(-5.0, 0.0) if (allow_negative_floor and rng.random() < 0.5) else rng.uniform(0.0, 3.0)
        hi = lo + rng.uniform(0.5, 6.0)
        value = rng.uniform(lo - 2.0, hi + 2.0)  # sometimes outside: exercises clipping
        parts.append(PrivateScalar.make_private(f"e{k}", value, lo, hi))
    acc = PrivateScalar.from_public(rng.uniform(-2.0, 2.0))
    for _ in range(rng.randint(1, max_terms)):
        term = PrivateScalar.from_public(rng.uniform(-3.0, 3.0))
        for var in rng.sample(parts, rng.randint(1, len(parts))):
            term = term * (var ** rng.randint(1, max_power))
        acc = acc + term
    return acc


@pytest.fixture
def rng():
    return random.Random(20260817)
