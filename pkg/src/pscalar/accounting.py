"""Per-entity privacy accounting: spends, budget conversion, ledger, calibration.

Budgets are tracked per entity identity as the alpha-linear coefficient of a
Renyi curve: one Gaussian release at noise sigma costs an entity
``rho = L^2 * x^2 / (2 sigma^2)`` where L is its sound Lipschitz bound and x
its clipped input, and the curve is ``eps(alpha) = rho * alpha``.  Curves add
across releases, so a single cumulative rho per entity suffices.
"""

from __future__ import annotations

import contextlib
import datetime
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .poly import VarId
from .scalar import PrivateScalar
from .sensitivity import DEFAULT_VERTEX_CAP, lipschitz_bound

# Fixed candidate grid for the conversion minimization, plus the analytic
# minimizer appended per call so the grid result never exceeds the closed form.
ALPHA_MIN = 1.0 + 1e-4
ALPHA_MAX = 1e6
ALPHA_POINTS = 2048
_ALPHAS = np.geomspace(ALPHA_MIN, ALPHA_MAX, ALPHA_POINTS)


class LedgerError(ValueError):
    """Misuse of a privacy ledger (bad mode, closed journal, bad record)."""


class CalibrationError(ValueError):
    """No noise level in range can satisfy the budget; lists blocked entities."""

    def __init__(self, message: str, blocked: list[str]):
        super().__init__(message)
        self.blocked = blocked


@dataclass(frozen=True)
class RdpSpend:
    """One entity's cost for one release.

    ``lipschitz`` and ``clipped_input`` feed receipts; ``clipped_input`` is
    private and must be redacted from anything sent to a scientist session.
    """

    entity: VarId
    rho: float
    lipschitz: float
    clipped_input: float

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho >= 0.0):
            raise ValueError(f"rho must be finite and non-negative, got {self.rho!r}")


@dataclass(frozen=True)
class BudgetPolicy:
    """Owner-set cap: per-entity converted epsilon at a fixed delta."""

    eps_cap: float
    delta: float

    def __post_init__(self):
        if not (math.isfinite(self.eps_cap) and self.eps_cap > 0):
            raise ValueError(f"eps_cap must be positive, got {self.eps_cap!r}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta!r}")


@dataclass(frozen=True)
class FilterDecision:
    """Outcome of a pre-release budget check; never mutates any state."""

    ok: bool
    violations: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class LedgerEntry:
    publish_id: str
    entity: str
    rho: float
    timestamp: str


def spend_for_publish(
    scalar: PrivateScalar, sigma: float, *, vertex_cap: int = DEFAULT_VERTEX_CAP
) -> list[RdpSpend]:
    """Per-entity Renyi cost of one Gaussian release of the scalar at sigma.

    Uses removal semantics: the Lipschitz bound for each entity is taken over
    its box widened through 0, the replacement value.
    """
    if not (isinstance(sigma, (int, float)) and math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be a positive finite number, got {sigma!r}")
    spends = []
    denom = 2.0 * sigma * sigma
    for v in sorted(scalar.entities()):
        lb = lipschitz_bound(scalar, v, include_origin=True, vertex_cap=vertex_cap)
        x = scalar.inputs[v].clipped
        rho = (lb.bound * lb.bound) * (x * x) / denom
        spends.append(RdpSpend(v, rho, lb.bound, x))
    return spends


def rdp_to_dp(rho: float, delta: float) -> float:
    """Tightest (eps, delta) conversion of the linear curve eps(alpha) = rho*alpha.

    Minimizes ``rho*alpha + ln(1/delta)/(alpha-1)`` over the fixed alpha grid
    plus the analytic minimizer, so the result never exceeds the closed form
    ``rho + 2*sqrt(rho*ln(1/delta))``.  A zero curve converts to eps = 0.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    if not (math.isfinite(rho) and rho >= 0.0):
        raise ValueError(f"rho must be finite and non-negative, got {rho!r}")
    if rho == 0.0:
        return 0.0
    log_inv = math.log(1.0 / delta)
    eps = float(np.min(rho * _ALPHAS + log_inv / (_ALPHAS - 1.0)))
    alpha_star = 1.0 + math.sqrt(log_inv / rho)
    eps = min(eps, rho * alpha_star + log_inv / (alpha_star - 1.0))
    return eps


def _now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="microseconds")


class PrivacyLedger:
    """Append-only per-entity cumulative rho, optionally journaled to disk.

    Journal format: one tab-separated record per line,
    ``publish_id<TAB>entity<TAB>rho<TAB>timestamp`` with rho printed to 17
    significant digits so replay reconstructs the exact float state.  Records
    are flushed to the journal before any caller can observe the new state,
    which keeps crash recovery conservative.
    """

    REAL = "real"
    SIMULATED = "simulated"

    def __init__(self, mode: str = REAL, journal_path: str | Path | None = None):
        if mode not in (self.REAL, self.SIMULATED):
            raise LedgerError(f"unknown ledger mode {mode!r}")
        if mode == self.SIMULATED and journal_path is not None:
            raise LedgerError("simulated ledgers never journal")
        self.mode = mode
        self.journal_path = Path(journal_path) if journal_path is not None else None
        self._cumulative: dict[str, float] = {}
        self._history: list[LedgerEntry] = []
        self._seq = 0
        self._lock = threading.RLock()
        self._journal = None
        if self.journal_path is not None:
            if self.journal_path.exists():
                self._replay_lines(self.journal_path.read_text(encoding="utf-8"))
            self.journal_path.parent.mkdir(parents=True, exist_ok=True)
            self._journal = open(self.journal_path, "a", encoding="utf-8")

    # -- replay -----------------------------------------------------------------

    def _replay_lines(self, text: str) -> None:
        seen_ids: dict[str, None] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise LedgerError(f"journal line {lineno}: expected 4 fields, got {len(parts)}")
            publish_id, entity, rho_text, ts = parts
            try:
                rho = float(rho_text)
            except ValueError:
                raise LedgerError(f"journal line {lineno}: bad rho {rho_text!r}") from None
            entry = LedgerEntry(publish_id, entity, rho, ts)
            self._cumulative[entity] = self._cumulative.get(entity, 0.0) + rho
            self._history.append(entry)
            seen_ids[publish_id] = None
        self._seq = len(seen_ids)

    @classmethod
    def replayed(cls, journal_path: str | Path) -> "PrivacyLedger":
        """Rebuild ledger state from a journal without taking an append handle."""
        ledger = cls(mode=cls.REAL)
        ledger._replay_lines(Path(journal_path).read_text(encoding="utf-8"))
        return ledger

    # -- state ---------------------------------------------------------------------

    @property
    def cumulative(self) -> dict[str, float]:
        with self._lock:
            return dict(self._cumulative)

    @property
    def history(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._history)

    def total(self, entity: str) -> float:
        with self._lock:
            return self._cumulative.get(entity, 0.0)

    def entities(self) -> frozenset[str]:
        with self._lock:
            return frozenset(self._cumulative)

    def snapshot_bytes(self) -> bytes:
        """Canonical byte form of the cumulative state, for exact comparisons."""
        with self._lock:
            lines = [f"{e}\t{self._cumulative[e]:.17g}" for e in sorted(self._cumulative)]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    # -- mutation --------------------------------------------------------------------

    @contextlib.contextmanager
    def transaction(self):
        """Serialize a check-and-record sequence against this ledger."""
        with self._lock:
            yield self

    def next_publish_id(self) -> str:
        with self._lock:
            self._seq += 1
            return f"p{self._seq:06d}"

    def record(self, spends: list[RdpSpend], publish_id: str, timestamp: str | None = None) -> None:
        """Append the spends of one release; journaled before returning."""
        ts = timestamp if timestamp is not None else _now_iso()
        with self._lock:
            lines = []
            for s in sorted(spends, key=lambda s: s.entity):
                entity = s.entity.entity
                self._cumulative[entity] = self._cumulative.get(entity, 0.0) + s.rho
                self._history.append(LedgerEntry(publish_id, entity, s.rho, ts))
                lines.append(f"{publish_id}\t{entity}\t{s.rho:.17g}\t{ts}\n")
            if self._journal is not None and lines:
                self._journal.write("".join(lines))
                self._journal.flush()

    def fork_simulated(self) -> "PrivacyLedger":
        """Independent deep copy for what-if exploration; never journals."""
        with self._lock:
            fork = PrivacyLedger(mode=self.SIMULATED)
            fork._cumulative = dict(self._cumulative)
            fork._history = list(self._history)
            fork._seq = self._seq
            return fork

    def close(self) -> None:
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None


def _aggregate_by_entity(spends: list[RdpSpend]) -> dict[str, float]:
    out: dict[str, float] = {}
    for s in spends:
        key = s.entity.entity
        out[key] = out.get(key, 0.0) + s.rho
    return out


def filter_check(ledger: PrivacyLedger, spends: list[RdpSpend], policy: BudgetPolicy) -> FilterDecision:
    """Would recording these spends keep every affected entity under the cap?

    Pure check: no state is touched, so a rejected request costs nothing.
    """
    violations = []
    proposed = _aggregate_by_entity(spends)
    for entity in sorted(proposed):
        projected = rdp_to_dp(ledger.total(entity) + proposed[entity], policy.delta)
        if projected > policy.eps_cap:
            violations.append((entity, projected))
    return FilterDecision(ok=not violations, violations=tuple(violations))


def remaining_budget(ledger: PrivacyLedger, entity: str, policy: BudgetPolicy) -> float:
    """Converted epsilon still available to one entity (floored at zero)."""
    return max(0.0, policy.eps_cap - rdp_to_dp(ledger.total(entity), policy.delta))


def calibrate_sigma(
    scalar: PrivateScalar,
    ledger: PrivacyLedger,
    policy: BudgetPolicy,
    *,
    lo: float = 1e-6,
    hi: float = 1e9,
    rel_tol: float = 1e-4,
    vertex_cap: int = DEFAULT_VERTEX_CAP,
) -> float:
    """Smallest sigma (within rel_tol) whose release passes the budget filter.

    Geometric bisection over [lo, hi]; spends scale as 1/sigma^2 so the
    pass/fail predicate is monotone in sigma.  Raises CalibrationError naming
    the blocked entities when even sigma = hi cannot pass.
    """
    unit_spends = spend_for_publish(scalar, 1.0, vertex_cap=vertex_cap)

    def decision(sigma: float) -> FilterDecision:
        scaled = [
            RdpSpend(s.entity, s.rho / (sigma * sigma), s.lipschitz, s.clipped_input)
            for s in unit_spends
        ]
        return filter_check(ledger, scaled, policy)

    top = decision(hi)
    if not top.ok:
        blocked = [e for e, _ in top.violations]
        raise CalibrationError(
            "no noise level in range can fit the budget; blocked entities: "
            + ", ".join(blocked),
            blocked,
        )
    if decision(lo).ok:
        return lo
    lo_fail, hi_pass = lo, hi
    while hi_pass > lo_fail * (1.0 + rel_tol):
        mid = math.sqrt(lo_fail * hi_pass)
        if decision(mid).ok:
            hi_pass = mid
        else:
            lo_fail = mid
    # Confirm through the real spend path; the bisection margin dwarfs any
    # floating-point disagreement between the scaled and direct spends.
    if not filter_check(ledger, spend_for_publish(scalar, hi_pass, vertex_cap=vertex_cap), policy).ok:
        hi_pass *= 1.0 + rel_tol  # pragma: no cover
    return hi_pass
