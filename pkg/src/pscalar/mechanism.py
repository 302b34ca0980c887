"""Gaussian output perturbation and the budget-gated release path."""

from __future__ import annotations

import datetime
import math
import threading
from dataclasses import dataclass

import numpy as np

from .accounting import (
    BudgetPolicy,
    FilterDecision,
    PrivacyLedger,
    RdpSpend,
    filter_check,
    spend_for_publish,
)
from .scalar import PrivateScalar
from .sensitivity import DEFAULT_VERTEX_CAP

#: How noise is produced, fixed for reproducibility guarantees.
NOISE_ALGORITHM = "numpy PCG64 bit generator, Generator.normal (ziggurat)"


class BudgetRejected(Exception):
    """Typed refusal: the release would push listed entities over their cap.

    Carries ``violations``: (entity identity, projected converted epsilon)
    pairs.  Nothing was recorded and no noise was drawn.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        names = ", ".join(f"{e} (eps {eps:.4g})" for e, eps in self.violations)
        super().__init__(f"release rejected, budget exceeded for: {names}")


class GaussianNoiseSource:
    """Seeded Gaussian sampler with a bit-exact stream per seed.

    Backed by numpy's PCG64 bit generator through ``Generator.normal``; the
    same 64-bit seed always reproduces the same draw sequence on a given
    installation.  Thread-safe: draws are serialized.
    """

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self.algorithm = NOISE_ALGORITHM
        self._gen = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def sample(self, sigma: float) -> float:
        if not (isinstance(sigma, (int, float)) and math.isfinite(sigma) and sigma > 0):
            raise ValueError(f"sigma must be a positive finite number, got {sigma!r}")
        with self._lock:
            return float(self._gen.normal(0.0, sigma))


@dataclass(frozen=True)
class PublishReceipt:
    """What a successful release produced and what it cost.

    ``spends`` carry the private clipped inputs; serializing a receipt toward
    a scientist session must go through the redacting wire form.
    """

    publish_id: str
    value: float
    sigma: float
    spends: tuple[RdpSpend, ...]
    timestamp: str


def _now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="microseconds")


def release(scalar: PrivateScalar, sigma: float, source: GaussianNoiseSource) -> float:
    """Raw noisy evaluation with no accounting; for harnesses and internals only."""
    return scalar.value() + source.sample(sigma)


def publish(
    scalar: PrivateScalar,
    sigma: float,
    ledger: PrivacyLedger,
    policy: BudgetPolicy,
    source: GaussianNoiseSource,
    *,
    vertex_cap: int = DEFAULT_VERTEX_CAP,
) -> PublishReceipt:
    """Budget-checked Gaussian release.

    Atomic per ledger: the filter check and the recording happen inside one
    ledger transaction, and the spends hit the journal before the noisy value
    exists.  On rejection nothing is recorded and no noise is drawn.
    """
    spends = spend_for_publish(scalar, sigma, vertex_cap=vertex_cap)
    with ledger.transaction():
        decision = filter_check(ledger, spends, policy)
        if not decision.ok:
            raise BudgetRejected(decision.violations)
        publish_id = ledger.next_publish_id()
        ledger.record(spends, publish_id)
    noisy = scalar.value() + source.sample(sigma)
    return PublishReceipt(publish_id, noisy, sigma, tuple(spends), _now_iso())


def simulate_publish(
    scalar: PrivateScalar,
    sigma: float,
    sim_ledger: PrivacyLedger,
    policy: BudgetPolicy,
    *,
    vertex_cap: int = DEFAULT_VERTEX_CAP,
) -> tuple[FilterDecision, list[RdpSpend]]:
    """The publish decision logic run against a simulated ledger.

    Advances the simulated ledger exactly as a real publish would (records on
    pass, records nothing on rejection) but draws no noise and returns no
    value, so real state and the noise stream are untouched.
    """
    if sim_ledger.mode != PrivacyLedger.SIMULATED:
        raise ValueError("simulate_publish requires a simulated ledger")
    spends = spend_for_publish(scalar, sigma, vertex_cap=vertex_cap)
    with sim_ledger.transaction():
        decision = filter_check(sim_ledger, spends, policy)
        if decision.ok:
            sim_ledger.record(spends, sim_ledger.next_publish_id())
    return decision, spends
