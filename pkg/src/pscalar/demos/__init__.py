"""Bundled demo datasets and scenario scripts.

``ages.csv``
    100 entities with one bounded attribute each (floor 0, ceiling 122).

``hospital1.csv`` / ``hospital2.csv``
    Two 25-row datasets whose entity sets overlap on p16..p25.  Loading
    both onto one node with a shared ledger demonstrates that releases by
    *different* analysts accumulate against the same per-entity budgets.

``demo_mean.script``
    Build the mean of ``ages`` and publish it once.

``demo_simulation.script``
    Rehearse releases on a simulated ledger fork, check the real budget is
    untouched, then perform the real release.

``demo_overlap.script``
    Two analyst sessions spend against overlapping entities on a
    shared-ledger node until the shared entities' budgets run out.  The
    second session's key comes from the environment variable
    ``PSCALAR_KEY_BOB``.
"""

from __future__ import annotations

import shutil
from importlib import resources
from pathlib import Path

_FILES = (
    "ages.csv",
    "hospital1.csv",
    "hospital2.csv",
    "demo_mean.script",
    "demo_simulation.script",
    "demo_overlap.script",
)


def names() -> tuple[str, ...]:
    """Names of all bundled demo files."""
    return _FILES


def path(name: str) -> Path:
    """Filesystem path of one bundled demo file."""
    if name not in _FILES:
        raise KeyError(f"unknown demo file {name!r}; have {', '.join(_FILES)}")
    candidate = resources.files(__package__) / name
    return Path(str(candidate))


def copy_all(out_dir) -> list[str]:
    """Copy every demo file into ``out_dir``; returns the copied names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in _FILES:
        shutil.copyfile(path(name), out / name)
    return list(_FILES)
