"""Data-owner node: dataset ingestion, remote handles, budget-gated publishing.

The node holds raw data and all derived private scalars.  Remote sessions
only ever see opaque handles, public metadata, spend totals, and noisy
released values; every outbound message is structurally scanned against
private-value leakage.
"""

from __future__ import annotations

import csv
import datetime
import itertools
import json
import re
import secrets
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import (
    BudgetPolicy,
    PrivacyLedger,
    remaining_budget,
)
from .mechanism import BudgetRejected, GaussianNoiseSource, publish, simulate_publish
from .poly import PolynomialError, TermLimitError, VarId
from .scalar import (
    EntityInput,
    MetadataConflictError,
    PrivateScalar,
    UnsupportedOperationError,
)
from .sensitivity import DEFAULT_VERTEX_CAP
from .wire import (
    assert_no_private_leakage,
    encode,
    receipt_wire,
    scalar_summary,
    spend_wire,
)

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

USERS_FILE = "users.json"
AUDIT_FILE = "audit.jsonl"
SHARED_LEDGER_FILE = "ledger-shared.log"


class IngestError(ValueError):
    """A dataset file could not be loaded; messages carry line numbers."""


class NodeError(Exception):
    """Request-level failure that maps to a wire error code."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class DatasetRow:
    entity: str
    value: float
    floor: float
    ceiling: float


@dataclass(frozen=True)
class Dataset:
    name: str
    rows: tuple[DatasetRow, ...]


@dataclass(frozen=True)
class NodeConfig:
    eps_cap: float
    delta: float
    shared_ledger: bool = False
    journal_dir: str | Path | None = None
    seed: int | None = None
    vertex_cap: int = DEFAULT_VERTEX_CAP


@dataclass
class UserAccount:
    name: str
    key: str
    policy: BudgetPolicy
    ledger: PrivacyLedger


@dataclass
class NodeSession:
    """Per-connection state: who is talking and their simulated fork."""

    peer: str = ""
    user: UserAccount | None = None
    sim: PrivacyLedger | None = None


@dataclass
class StoredObject:
    scalar: PrivateScalar
    owner: str | None  # None: dataset root, readable by any authenticated user


class ObjectStore:
    """Handle -> scalar map; handles are never reused within a node lifetime."""

    def __init__(self):
        self._objects: dict[str, StoredObject] = {}
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def add(self, scalar: PrivateScalar, owner: str | None) -> str:
        with self._lock:
            handle = f"h{next(self._counter)}"
            self._objects[handle] = StoredObject(scalar, owner)
            return handle

    def get(self, handle: str, user: str) -> PrivateScalar:
        with self._lock:
            obj = self._objects.get(handle)
        if obj is None:
            raise NodeError("unknown_handle", f"no such handle {handle!r}")
        if obj.owner is not None and obj.owner != user:
            raise NodeError("forbidden", f"handle {handle!r} belongs to another session")
        return obj.scalar

    def drop(self, handle: str, user: str) -> None:
        with self._lock:
            obj = self._objects.get(handle)
            if obj is None:
                raise NodeError("unknown_handle", f"no such handle {handle!r}")
            if obj.owner is None:
                raise NodeError("forbidden", "dataset roots cannot be dropped")
            if obj.owner != user:
                raise NodeError("forbidden", f"handle {handle!r} belongs to another session")
            del self._objects[handle]


def read_dataset_csv(path: str | Path, name: str | None = None) -> Dataset:
    """Load one dataset column from a CSV with header entity,value,floor,ceiling."""
    path = Path(path)
    name = name if name is not None else path.stem
    if not _NAME_RE.match(name):
        raise IngestError(f"bad dataset name {name!r}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    rows: list[DatasetRow] = []
    seen: dict[str, int] = {}
    header = None
    for lineno, record in enumerate(reader, start=1):
        if not record or all(not cell.strip() for cell in record):
            continue
        if header is None:
            header = [cell.strip().lower() for cell in record]
            if header != ["entity", "value", "floor", "ceiling"]:
                raise IngestError(
                    f"{path}:{lineno}: header must be entity,value,floor,ceiling"
                )
            continue
        if len(record) != 4:
            raise IngestError(f"{path}:{lineno}: expected 4 fields, got {len(record)}")
        entity = record[0].strip()
        if not entity or "\t" in entity or "\n" in entity:
            raise IngestError(f"{path}:{lineno}: bad entity identifier {record[0]!r}")
        if entity in seen:
            raise IngestError(
                f"{path}:{lineno}: duplicate entity {entity!r} (first at line {seen[entity]})"
            )
        seen[entity] = lineno
        try:
            value, floor, ceiling = (float(record[i]) for i in (1, 2, 3))
        except ValueError:
            raise IngestError(f"{path}:{lineno}: non-numeric value/floor/ceiling") from None
        try:
            EntityInput(value, floor, ceiling)
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: {exc}") from None
        rows.append(DatasetRow(entity, value, floor, ceiling))
    if header is None:
        raise IngestError(f"{path}: empty file")
    if not rows:
        raise IngestError(f"{path}: no data rows")
    return Dataset(name, tuple(rows))


# -- user registry persistence ----------------------------------------------------


def load_users_file(journal_dir: str | Path) -> list[dict]:
    path = Path(journal_dir) / USERS_FILE
    if not path.exists():
        return []
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON list")
    return data


def save_users_file(journal_dir: str | Path, users: list[dict]) -> None:
    path = Path(journal_dir) / USERS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(users, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def users_add(journal_dir: str | Path, name: str) -> str:
    """Register a user offline and return the fresh api key."""
    if not _NAME_RE.match(name):
        raise ValueError(f"bad user name {name!r}")
    users = load_users_file(journal_dir)
    if any(u.get("name") == name for u in users):
        raise ValueError(f"user {name!r} already exists")
    key = secrets.token_hex(16)
    users.append({"name": name, "key": key})
    save_users_file(journal_dir, users)
    return key


def _now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="microseconds")


class Node:
    """All owner-side state plus the request dispatcher."""

    def __init__(self, config: NodeConfig):
        self.config = config
        self.policy = BudgetPolicy(config.eps_cap, config.delta)
        self.journal_dir = Path(config.journal_dir) if config.journal_dir else None
        if self.journal_dir is not None:
            self.journal_dir.mkdir(parents=True, exist_ok=True)
        self.store = ObjectStore()
        self.noise = GaussianNoiseSource(config.seed)
        self.datasets: dict[str, Dataset] = {}
        self._roots: dict[str, list[str]] = {}
        self._users_by_key: dict[str, UserAccount] = {}
        self._users_by_name: dict[str, UserAccount] = {}
        self._users_lock = threading.Lock()
        self._audit: list[dict] = []
        self._audit_lock = threading.Lock()
        self._audit_file = None
        if self.journal_dir is not None:
            self._audit_file = open(self.journal_dir / AUDIT_FILE, "a", encoding="utf-8")
        self.shared_ledger: PrivacyLedger | None = None
        if config.shared_ledger:
            path = self.journal_dir / SHARED_LEDGER_FILE if self.journal_dir else None
            self.shared_ledger = PrivacyLedger(journal_path=path)
        if self.journal_dir is not None:
            for record in load_users_file(self.journal_dir):
                self.add_user(str(record["name"]), key=str(record["key"]), persist=False)

    # -- administration -----------------------------------------------------------

    def _ledger_path(self, name: str) -> Path | None:
        if self.journal_dir is None or self.config.shared_ledger:
            return None
        return self.journal_dir / f"ledger-user-{name}.log"

    def add_user(self, name: str, key: str | None = None, persist: bool = True) -> str:
        """Register a user; returns the api key (freshly minted unless given)."""
        if not _NAME_RE.match(name):
            raise ValueError(f"bad user name {name!r}")
        with self._users_lock:
            if name in self._users_by_name:
                raise ValueError(f"user {name!r} already exists")
            key = key if key is not None else secrets.token_hex(16)
            if self.config.shared_ledger:
                ledger = self.shared_ledger
            else:
                ledger = PrivacyLedger(journal_path=self._ledger_path(name))
            account = UserAccount(name, key, self.policy, ledger)
            self._users_by_name[name] = account
            self._users_by_key[key] = account
        if persist and self.journal_dir is not None:
            users = load_users_file(self.journal_dir)
            users.append({"name": name, "key": key})
            save_users_file(self.journal_dir, users)
        return key

    def user_names(self) -> list[str]:
        with self._users_lock:
            return sorted(self._users_by_name)

    def ingest(self, path: str | Path, name: str | None = None) -> str:
        """Load a dataset column and mint one root scalar per row."""
        ds = read_dataset_csv(path, name)
        if ds.name in self.datasets:
            raise IngestError(f"dataset {ds.name!r} already loaded")
        handles = []
        for row in ds.rows:
            var = VarId(row.entity, ds.name)
            scalar = PrivateScalar.make_private(var, row.value, row.floor, row.ceiling)
            handles.append(self.store.add(scalar, owner=None))
        self.datasets[ds.name] = ds
        self._roots[ds.name] = handles
        return ds.name

    def known_entities(self) -> set[str]:
        out: set[str] = set()
        for ds in self.datasets.values():
            out.update(row.entity for row in ds.rows)
        return out

    def ledger_for(self, user: UserAccount) -> PrivacyLedger:
        return self.shared_ledger if self.config.shared_ledger else user.ledger

    # -- audit ---------------------------------------------------------------------

    def _audit_event(self, event: dict) -> None:
        with self._audit_lock:
            self._audit.append(event)
            if self._audit_file is not None:
                self._audit_file.write(json.dumps(event, separators=(",", ":")) + "\n")
                self._audit_file.flush()

    def audit_dump(self) -> dict:
        """Owner-side view: full request history and per-entity cumulative rho."""
        with self._audit_lock:
            events = list(self._audit)
        if self.config.shared_ledger:
            cumulative = {"shared": self.shared_ledger.cumulative}
        else:
            with self._users_lock:
                cumulative = {
                    name: acct.ledger.cumulative
                    for name, acct in sorted(self._users_by_name.items())
                }
        return {
            "eps_cap": self.policy.eps_cap,
            "delta": self.policy.delta,
            "shared_ledger": self.config.shared_ledger,
            "users": self.user_names(),
            "datasets": sorted(self.datasets),
            "events": events,
            "cumulative": cumulative,
        }

    def close(self) -> None:
        if self._audit_file is not None:
            self._audit_file.close()
            self._audit_file = None
        if self.shared_ledger is not None:
            self.shared_ledger.close()
        with self._users_lock:
            for acct in self._users_by_name.values():
                acct.ledger.close()

    # -- request dispatch -------------------------------------------------------------

    def handle_request(self, session: NodeSession, msg: dict) -> dict:
        rid = msg.get("id")
        rid = rid if isinstance(rid, int) and not isinstance(rid, bool) else None
        op = msg.get("op")
        try:
            if rid is None:
                raise NodeError("bad_request", "request id must be an integer")
            if not isinstance(op, str):
                raise NodeError("bad_request", "missing op")
            if op == "auth":
                payload = self._op_auth(session, msg)
            else:
                if session.user is None:
                    raise NodeError("auth_required", "authenticate first")
                handler = self._OPS.get(op)
                if handler is None:
                    raise NodeError("unknown_op", f"unsupported op {op!r}")
                payload = handler(self, session, msg)
            resp = {"id": rid, "ok": True, **payload}
        except BudgetRejected as exc:
            resp = {
                "id": rid,
                "ok": False,
                "error": {"code": "budget_rejected", "detail": str(exc)},
                "rejection": {
                    "entities": [e for e, _ in exc.violations],
                    "projected_eps": [eps for _, eps in exc.violations],
                },
            }
        except NodeError as exc:
            resp = {"id": rid, "ok": False, "error": {"code": exc.code, "detail": exc.detail}}
        except TermLimitError as exc:
            resp = {"id": rid, "ok": False, "error": {"code": "term_limit", "detail": str(exc)}}
        except UnsupportedOperationError as exc:
            resp = {"id": rid, "ok": False, "error": {"code": "unsupported", "detail": str(exc)}}
        except MetadataConflictError as exc:
            resp = {"id": rid, "ok": False, "error": {"code": "conflict", "detail": str(exc)}}
        except (PolynomialError, ValueError) as exc:
            resp = {"id": rid, "ok": False, "error": {"code": "bad_request", "detail": str(exc)}}
        except Exception as exc:  # pragma: no cover - defensive
            resp = {"id": rid, "ok": False, "error": {"code": "internal", "detail": str(exc)}}
        assert_no_private_leakage(resp)
        self._audit_event(
            {
                "ts": _now_iso(),
                "peer": session.peer,
                "user": session.user.name if session.user else None,
                "op": op if isinstance(op, str) else None,
                "ok": resp["ok"],
                **({"code": resp["error"]["code"]} if not resp["ok"] else {}),
                **(
                    {"publish_id": resp["publish_id"], "sigma": resp["sigma"]}
                    if resp.get("publish_id")
                    else {}
                ),
                **(
                    {"rejected_entities": resp["rejection"]["entities"]}
                    if resp.get("rejection")
                    else {}
                ),
            }
        )
        return resp

    # -- param helpers ------------------------------------------------------------------

    @staticmethod
    def _want_str(msg: dict, key: str) -> str:
        val = msg.get(key)
        if not isinstance(val, str):
            raise NodeError("bad_request", f"field {key!r} must be a string")
        return val

    @staticmethod
    def _want_number(msg: dict, key: str) -> float:
        val = msg.get(key)
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise NodeError("bad_request", f"field {key!r} must be a number")
        return float(val)

    @staticmethod
    def _want_int(msg: dict, key: str) -> int:
        val = msg.get(key)
        if isinstance(val, bool) or not isinstance(val, int):
            raise NodeError("bad_request", f"field {key!r} must be an integer")
        return val

    def _scalar(self, session: NodeSession, handle: str) -> PrivateScalar:
        return self.store.get(handle, session.user.name)

    @staticmethod
    def _meta(scalar: PrivateScalar) -> dict:
        return {
            "degree": scalar.degree(),
            "terms": scalar.term_count,
            "entities": len(scalar.inputs),
        }

    # -- op handlers ---------------------------------------------------------------------

    def _op_auth(self, session: NodeSession, msg: dict) -> dict:
        key = self._want_str(msg, "key")
        account = self._users_by_key.get(key)
        if account is None:
            raise NodeError("auth_failed", "invalid api key")
        session.user = account
        return {
            "user": account.name,
            "datasets": [
                {"name": name, "rows": len(ds.rows)}
                for name, ds in sorted(self.datasets.items())
            ],
        }

    def _op_list_datasets(self, session: NodeSession, msg: dict) -> dict:
        return {
            "datasets": [
                {"name": name, "rows": len(ds.rows)}
                for name, ds in sorted(self.datasets.items())
            ]
        }

    def _op_get_roots(self, session: NodeSession, msg: dict) -> dict:
        name = self._want_str(msg, "dataset")
        if name not in self.datasets:
            raise NodeError("unknown_dataset", f"no dataset named {name!r}")
        ds = self.datasets[name]
        roots = [
            {
                "handle": handle,
                "entity": row.entity,
                "floor": row.floor,
                "ceiling": row.ceiling,
            }
            for handle, row in zip(self._roots[name], ds.rows)
        ]
        return {"dataset": name, "roots": roots}

    def _op_binop(self, session: NodeSession, msg: dict) -> dict:
        kind = self._want_str(msg, "kind")
        a = self._scalar(session, self._want_str(msg, "a"))
        b = self._scalar(session, self._want_str(msg, "b"))
        if kind == "add":
            result = a + b
        elif kind == "sub":
            result = a - b
        elif kind == "mul":
            result = a * b
        else:
            raise NodeError("bad_request", f"unknown binop kind {kind!r}")
        handle = self.store.add(result, owner=session.user.name)
        return {"handle": handle, "meta": self._meta(result)}

    def _op_unop(self, session: NodeSession, msg: dict) -> dict:
        kind = self._want_str(msg, "kind")
        a = self._scalar(session, self._want_str(msg, "handle"))
        if kind == "neg":
            result = -a
        elif kind == "scale":
            result = a.scale(self._want_number(msg, "c"))
        elif kind == "shift":
            result = a.shift(self._want_number(msg, "c"))
        elif kind == "pow":
            result = a ** self._want_int(msg, "k")
        else:
            raise NodeError("bad_request", f"unknown unop kind {kind!r}")
        handle = self.store.add(result, owner=session.user.name)
        return {"handle": handle, "meta": self._meta(result)}

    def _op_describe(self, session: NodeSession, msg: dict) -> dict:
        scalar = self._scalar(session, self._want_str(msg, "handle"))
        return {"scalar": scalar_summary(scalar)}

    def _op_publish(self, session: NodeSession, msg: dict) -> dict:
        scalar = self._scalar(session, self._want_str(msg, "handle"))
        sigma = self._want_number(msg, "sigma")
        ledger = self.ledger_for(session.user)
        receipt = publish(
            scalar, sigma, ledger, session.user.policy, self.noise,
            vertex_cap=self.config.vertex_cap,
        )
        return receipt_wire(receipt, redact=True)

    def _op_simulate(self, session: NodeSession, msg: dict) -> dict:
        scalar = self._scalar(session, self._want_str(msg, "handle"))
        sigma = self._want_number(msg, "sigma")
        if session.sim is None:
            session.sim = self.ledger_for(session.user).fork_simulated()
        decision, spends = simulate_publish(
            scalar, sigma, session.sim, session.user.policy,
            vertex_cap=self.config.vertex_cap,
        )
        payload = {
            "passed": decision.ok,
            "spends": [spend_wire(s, redact=True) for s in spends],
            "rejection": None,
        }
        if not decision.ok:
            payload["rejection"] = {
                "entities": [e for e, _ in decision.violations],
                "projected_eps": [eps for _, eps in decision.violations],
            }
        return payload

    def _op_fork_sim(self, session: NodeSession, msg: dict) -> dict:
        session.sim = self.ledger_for(session.user).fork_simulated()
        return {"forked": True}

    def _op_remaining_budget(self, session: NodeSession, msg: dict) -> dict:
        entity = self._want_str(msg, "entity")
        ledger = self.ledger_for(session.user)
        policy = session.user.policy
        known = self.known_entities() | set(ledger.entities())
        if entity == "*":
            return {"remaining": {e: remaining_budget(ledger, e, policy) for e in sorted(known)}}
        if entity == "min":
            if not known:
                return {"eps": policy.eps_cap, "entity": None}
            values = {e: remaining_budget(ledger, e, policy) for e in known}
            worst = min(sorted(values), key=lambda e: values[e])
            return {"eps": values[worst], "entity": worst}
        if entity not in known:
            raise NodeError("unknown_entity", f"no entity named {entity!r}")
        return {"eps": remaining_budget(ledger, entity, policy), "entity": entity}

    def _op_drop(self, session: NodeSession, msg: dict) -> dict:
        self.store.drop(self._want_str(msg, "handle"), session.user.name)
        return {"dropped": True}

    _OPS = {
        "list_datasets": _op_list_datasets,
        "get_roots": _op_get_roots,
        "binop": _op_binop,
        "unop": _op_unop,
        "describe": _op_describe,
        "publish": _op_publish,
        "simulate_publish": _op_simulate,
        "fork_sim": _op_fork_sim,
        "remaining_budget": _op_remaining_budget,
        "drop": _op_drop,
    }


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):  # pragma: no cover - exercised via live-server tests
        host, port = self.client_address[:2]
        session = NodeSession(peer=f"{host}:{port}")
        node = self.server.node
        while True:
            line = self.rfile.readline()
            if not line:
                break
            if not line.strip():
                continue
            try:
                msg = json.loads(line)
                if not isinstance(msg, dict):
                    raise ValueError("not an object")
            except ValueError:
                resp = {
                    "id": None,
                    "ok": False,
                    "error": {"code": "bad_request", "detail": "invalid JSON request"},
                }
            else:
                resp = node.handle_request(session, msg)
            try:
                self.wfile.write(encode(resp))
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                break


class NodeTCPServer(socketserver.ThreadingTCPServer):
    """Newline-delimited JSON over TCP, one thread per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _LineHandler)
        self.node = node

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]


def start_server(node: Node, host: str = "127.0.0.1", port: int = 0) -> NodeTCPServer:
    """Start serving in a daemon thread; returns the bound server."""
    server = NodeTCPServer(node, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server
