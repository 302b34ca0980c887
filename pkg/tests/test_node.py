"""Node: ingest, auth, handle isolation, protocol errors, confinement, persistence."""

from __future__ import annotations

import json
import socket

import pytest

from oracles import rho_cap
from pscalar.node import (
    AUDIT_FILE,
    IngestError,
    Node,
    NodeConfig,
    NodeSession,
    load_users_file,
    read_dataset_csv,
    start_server,
    users_add,
)
from pscalar.poly import VarId
from pscalar.scalar import PrivateScalar
from pscalar.wire import (
    WireLeakError,
    assert_no_private_leakage,
    decode,
    encode,
    receipt_wire,
    spend_wire,
)
from pscalar.accounting import RdpSpend
from pscalar.mechanism import PublishReceipt


# -- wire primitives --------------------------------------------------------------------


def test_encode_decode_roundtrip():
    msg = {"id": 3, "op": "auth", "key": "k", "x": [1, 2.5, None, "s"]}
    line = encode(msg)
    assert line.endswith(b"\n")
    assert decode(line[:-1]) == msg


def test_encode_rejects_nan():
    with pytest.raises(ValueError):
        encode({"x": float("nan")})


def test_decode_rejects_non_objects():
    with pytest.raises(ValueError):
        decode(b"[1, 2]")
    with pytest.raises(ValueError):
        decode(b"not json")


def test_leak_scanner_forbidden_keys():
    assert_no_private_leakage({"ok": True, "value": 3.0})  # bare noisy value: fine
    with pytest.raises(WireLeakError):
        assert_no_private_leakage({"nested": [{"clipped_input": 5.0}]})
    with pytest.raises(WireLeakError):
        assert_no_private_leakage({"deep": {"a": {"raw_value": 1.0}}})
    # a dict that carries bounds AND a value looks like an entity record: refuse
    with pytest.raises(WireLeakError):
        assert_no_private_leakage({"entity": "A", "floor": 0.0, "ceiling": 1.0, "value": 0.7})
    assert_no_private_leakage({"entity": "A", "floor": 0.0, "ceiling": 1.0})


def test_spend_wire_redaction():
    spend = RdpSpend(VarId("A", "age"), 0.125, 0.5, 70.0)
    redacted = spend_wire(spend, redact=True)
    assert redacted == {"entity": "A", "attribute": "age", "lipschitz": 0.5, "rho": 0.125}
    full = spend_wire(spend, redact=False)
    assert full["clipped_input"] == 70.0


def test_receipt_wire_redaction():
    spend = RdpSpend(VarId("A"), 0.125, 0.5, 70.0)
    receipt = PublishReceipt("p000001", 12.5, 3.0, (spend,), "2026-01-01T00:00:00+00:00")
    wired = receipt_wire(receipt, redact=True)
    assert wired["value"] == 12.5 and wired["publish_id"] == "p000001"
    assert_no_private_leakage(wired)
    assert "clipped_input" not in json.dumps(wired)


# -- ingest ------------------------------------------------------------------------------


def good_csv(tmp_path, body, name="data.csv"):
    path = tmp_path / name
    path.write_text(body, encoding="utf-8")
    return path


def test_ingest_happy_path(tmp_path):
    path = good_csv(tmp_path, "entity,value,floor,ceiling\nA,5.5,0,10\nB,-2,0,10\n")
    ds = read_dataset_csv(path)
    assert ds.name == "data"
    assert [r.entity for r in ds.rows] == ["A", "B"]
    assert ds.rows[0].value == 5.5
    assert ds.rows[1].floor == 0.0
    named = read_dataset_csv(path, name="override")
    assert named.name == "override"


def test_ingest_header_must_match(tmp_path):
    path = good_csv(tmp_path, "entity,value,lo,hi\nA,1,0,2\n")
    with pytest.raises(IngestError) as err:
        read_dataset_csv(path)
    assert "header" in str(err.value)


def test_ingest_errors_carry_line_numbers(tmp_path):
    cases = [
        ("entity,value,floor,ceiling\nA,1,0\n", ":2:"),              # missing field
        ("entity,value,floor,ceiling\nA,1,0,2\nA,2,0,2\n", ":3:"),   # duplicate
        ("entity,value,floor,ceiling\nA,x,0,2\n", ":2:"),            # non-numeric
        ("entity,value,floor,ceiling\nA,1,5,2\n", ":2:"),            # floor>ceiling
        ("entity,value,floor,ceiling\n,1,0,2\n", ":2:"),             # empty entity
    ]
    for body, needle in cases:
        with pytest.raises(IngestError) as err:
            read_dataset_csv(good_csv(tmp_path, body))
        assert needle in str(err.value), body


def test_ingest_duplicate_mentions_first_occurrence(tmp_path):
    body = "entity,value,floor,ceiling\nA,1,0,2\nB,1,0,2\nA,2,0,2\n"
    with pytest.raises(IngestError) as err:
        read_dataset_csv(good_csv(tmp_path, body))
    assert ":4:" in str(err.value) and "line 2" in str(err.value)


def test_ingest_empty_and_headerless(tmp_path):
    with pytest.raises(IngestError):
        read_dataset_csv(good_csv(tmp_path, ""))
    with pytest.raises(IngestError):
        read_dataset_csv(good_csv(tmp_path, "entity,value,floor,ceiling\n"))


def test_node_rejects_duplicate_dataset(tmp_path):
    path = good_csv(tmp_path, "entity,value,floor,ceiling\nA,1,0,2\n")
    node = make_node(tmp_path)
    node.ingest(path)
    with pytest.raises(IngestError):
        node.ingest(path)
    node.close()


# -- node helpers ------------------------------------------------------------------------


def make_node(tmp_path, *, eps=6.0, shared=False, seed=1, subdir="state") -> Node:
    node = Node(
        NodeConfig(
            eps_cap=eps, delta=1e-6, shared_ledger=shared,
            journal_dir=tmp_path / subdir, seed=seed,
        )
    )
    return node


def serve_csv(tmp_path, node: Node, body=None, name="people.csv"):
    body = body or (
        "entity,value,floor,ceiling\n"
        "A,77.2512345678,0,122\n"
        "B,40,0,122\n"
        "C,130,0,122\n"
    )
    node.ingest(good_csv(tmp_path, body, name))


def authed_session(node: Node, key="k1") -> NodeSession:
    session = NodeSession(peer="test")
    resp = node.handle_request(session, {"id": 1, "op": "auth", "key": key})
    assert resp["ok"], resp
    return session


def call(node: Node, session: NodeSession, op: str, rid=99, **params) -> dict:
    return node.handle_request(session, {"id": rid, "op": op, **params})


# -- auth and sessions --------------------------------------------------------------------


def test_auth_flow(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    session = NodeSession(peer="t")
    # ops before auth are refused
    resp = node.handle_request(session, {"id": 1, "op": "list_datasets"})
    assert not resp["ok"] and resp["error"]["code"] == "auth_required"
    # wrong key
    resp = node.handle_request(session, {"id": 2, "op": "auth", "key": "nope"})
    assert not resp["ok"] and resp["error"]["code"] == "auth_failed"
    # right key reports datasets
    resp = node.handle_request(session, {"id": 3, "op": "auth", "key": "k1"})
    assert resp["ok"] and resp["user"] == "u1"
    assert resp["datasets"] == [{"name": "people", "rows": 3}]
    node.close()


def test_request_envelope_validation(tmp_path):
    node = make_node(tmp_path)
    node.add_user("u1", key="k1", persist=False)
    session = authed_session(node)
    for bad in ({"op": "list_datasets"},                      # no id
                {"id": True, "op": "list_datasets"},          # bool id
                {"id": 4.5, "op": "list_datasets"},           # non-integer id
                {"id": 5}):                                   # no op
        resp = node.handle_request(session, bad)
        assert not resp["ok"] and resp["error"]["code"] == "bad_request", bad
    resp = node.handle_request(session, {"id": 6, "op": "no_such_op"})
    assert resp["error"]["code"] == "unknown_op"
    node.close()


def test_handle_isolation_between_users(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    node.add_user("u2", key="k2", persist=False)
    s1, s2 = authed_session(node, "k1"), authed_session(node, "k2")
    roots = call(node, s1, "get_roots", dataset="people")["roots"]
    # both users may read dataset roots
    assert call(node, s2, "get_roots", dataset="people")["ok"]
    derived = call(node, s1, "binop", kind="add", a=roots[0]["handle"], b=roots[1]["handle"])
    assert derived["ok"]
    # u2 cannot touch u1's derived handle
    stolen = call(node, s2, "describe", handle=derived["handle"])
    assert not stolen["ok"] and stolen["error"]["code"] == "forbidden"
    # unknown handle
    missing = call(node, s1, "describe", handle="h99999")
    assert not missing["ok"] and missing["error"]["code"] == "unknown_handle"
    # roots may not be dropped; derived handles may
    assert not call(node, s1, "drop", handle=roots[0]["handle"])["ok"]
    assert call(node, s1, "drop", handle=derived["handle"])["ok"]
    gone = call(node, s1, "describe", handle=derived["handle"])
    assert gone["error"]["code"] == "unknown_handle"
    node.close()


def test_describe_exposes_only_public_data(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    roots = call(node, s, "get_roots", dataset="people")["roots"]
    sq = call(node, s, "unop", kind="pow", handle=roots[0]["handle"], k=2)
    desc = call(node, s, "describe", handle=sq["handle"])["scalar"]
    assert desc["degree"] == 2
    assert desc["entities"] == [
        {"entity": "A", "attribute": "people", "floor": 0.0, "ceiling": 122.0}
    ]
    assert "value" not in json.dumps(desc)
    node.close()


# -- confinement: no private value ever leaves on the wire --------------------------------


def test_every_response_is_leak_scanned(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    secret_fragments = ("77.2512345678", "77.25123", '"value": 40', '"value": 130')
    frames = []

    def run(op, **params):
        resp = call(node, s, op, **params)
        frames.append(encode(resp).decode())
        return resp

    roots = run("get_roots", dataset="people")["roots"]
    h = {r["entity"]: r["handle"] for r in roots}
    total = run("binop", kind="add", a=h["A"], b=h["B"])["handle"]
    total = run("binop", kind="add", a=total, b=h["C"])["handle"]
    prod = run("binop", kind="mul", a=h["A"], b=h["B"])["handle"]
    run("unop", kind="pow", handle=h["A"], k=3)
    run("unop", kind="scale", handle=total, c=1.0 / 3.0)
    run("describe", handle=prod)
    run("simulate_publish", handle=total, sigma=500.0)
    run("publish", handle=total, sigma=500.0)
    run("publish", handle=total, sigma=0.0001)         # rejected: payload still clean
    run("remaining_budget", entity="*")
    run("remaining_budget", entity="min")
    run("remaining_budget", entity="A")
    run("fork_sim")
    run("drop", handle=prod)
    for frame in frames:
        payload = json.loads(frame)
        assert_no_private_leakage(payload)
        for fragment in secret_fragments:
            assert fragment not in frame, frame
    node.close()


def test_budget_rejection_payload_shape(tmp_path):
    node = make_node(tmp_path, eps=1.0)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    roots = call(node, s, "get_roots", dataset="people")["roots"]
    resp = call(node, s, "publish", handle=roots[0]["handle"], sigma=1.0)
    assert not resp["ok"]
    assert resp["error"]["code"] == "budget_rejected"
    assert resp["rejection"]["entities"] == ["A"]
    (projected,) = resp["rejection"]["projected_eps"]
    assert projected > 1.0
    node.close()


def test_publish_response_shape(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    roots = call(node, s, "get_roots", dataset="people")["roots"]
    resp = call(node, s, "publish", handle=roots[1]["handle"], sigma=300.0)
    assert resp["ok"]
    assert resp["publish_id"] == "p000001"
    assert resp["sigma"] == 300.0
    assert isinstance(resp["value"], float)
    (spend,) = resp["spends"]
    assert spend == {
        "entity": "B", "attribute": "people",
        "lipschitz": 1.0, "rho": 40.0**2 / (2 * 300.0**2),
    }
    node.close()


def test_remaining_budget_shapes(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    roots = call(node, s, "get_roots", dataset="people")["roots"]
    call(node, s, "publish", handle=roots[2]["handle"], sigma=300.0)  # charge C
    star = call(node, s, "remaining_budget", entity="*")["remaining"]
    assert set(star) == {"A", "B", "C"}
    assert star["A"] == 6.0 and star["C"] < 6.0
    m = call(node, s, "remaining_budget", entity="min")
    assert m["entity"] == "C" and m["eps"] == star["C"]
    one = call(node, s, "remaining_budget", entity="B")
    assert one["eps"] == 6.0
    bad = call(node, s, "remaining_budget", entity="nobody")
    assert bad["error"]["code"] == "unknown_entity"
    node.close()


def test_min_budget_tie_breaks_deterministically(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node, body="entity,value,floor,ceiling\nzz,1,0,2\naa,1,0,2\n")
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    m = call(node, s, "remaining_budget", entity="min")
    assert m["entity"] == "aa"  # untouched budgets tie; lexicographic winner
    node.close()


# -- ledger scope and persistence ----------------------------------------------------------


def drain(node, session, handle, sigma):
    """Publish until refused; count successes."""
    n = 0
    while True:
        resp = call(node, session, "publish", handle=handle, sigma=sigma)
        if not resp["ok"]:
            assert resp["error"]["code"] == "budget_rejected"
            return n
        n += 1


def test_shared_ledger_pools_users(tmp_path):
    node = make_node(tmp_path, eps=3.0, shared=True)
    serve_csv(tmp_path, node, body="entity,value,floor,ceiling\nA,50,0,122\n")
    node.add_user("u1", key="k1", persist=False)
    node.add_user("u2", key="k2", persist=False)
    s1, s2 = authed_session(node, "k1"), authed_session(node, "k2")
    h1 = call(node, s1, "get_roots", dataset="people")["roots"][0]["handle"]
    h2 = call(node, s2, "get_roots", dataset="people")["roots"][0]["handle"]
    cap = rho_cap(3.0, 1e-6)
    per = 50.0**2 / (2 * 200.0**2)
    fits = int(cap / per)
    used_by_u1 = drain(node, s1, h1, 200.0)
    assert used_by_u1 == fits
    # the pool is exhausted for u2 as well
    assert drain(node, s2, h2, 200.0) == 0
    node.close()


def test_per_user_ledgers_are_independent(tmp_path):
    node = make_node(tmp_path, eps=3.0, shared=False)
    serve_csv(tmp_path, node, body="entity,value,floor,ceiling\nA,50,0,122\n")
    node.add_user("u1", key="k1", persist=False)
    node.add_user("u2", key="k2", persist=False)
    s1, s2 = authed_session(node, "k1"), authed_session(node, "k2")
    h1 = call(node, s1, "get_roots", dataset="people")["roots"][0]["handle"]
    h2 = call(node, s2, "get_roots", dataset="people")["roots"][0]["handle"]
    cap = rho_cap(3.0, 1e-6)
    fits = int(cap / (50.0**2 / (2 * 200.0**2)))
    assert drain(node, s1, h1, 200.0) == fits
    assert drain(node, s2, h2, 200.0) == fits  # u2 has a fresh ledger
    node.close()


def test_restart_preserves_budgets(tmp_path):
    path = good_csv(tmp_path, "entity,value,floor,ceiling\nA,50,0,122\n", name="people.csv")

    def boot():
        node = make_node(tmp_path, eps=3.0, subdir="persist")
        node.ingest(path)
        node.add_user("u1", key="k1", persist=False)
        return node

    node = boot()
    s = authed_session(node)
    h = call(node, s, "get_roots", dataset="people")["roots"][0]["handle"]
    fits = drain(node, s, h, 200.0)
    assert fits > 0
    before = call(node, s, "remaining_budget", entity="A")["eps"]
    # crash without close(); journals must already be on disk
    del node

    node2 = boot()
    s2 = authed_session(node2)
    h2 = call(node2, s2, "get_roots", dataset="people")["roots"][0]["handle"]
    assert call(node2, s2, "remaining_budget", entity="A")["eps"] == before
    # still refused after restart: nothing was forgotten
    resp = call(node2, s2, "publish", handle=h2, sigma=200.0)
    assert resp["error"]["code"] == "budget_rejected"
    node2.close()


def test_user_registry_persistence(tmp_path):
    journal = tmp_path / "reg"
    key1 = users_add(journal, "alice")
    key2 = users_add(journal, "bob")
    assert key1 != key2 and len(key1) == 32
    with pytest.raises(ValueError):
        users_add(journal, "alice")  # duplicate
    with pytest.raises(ValueError):
        users_add(journal, "bad name!")  # invalid characters
    records = load_users_file(journal)
    assert [r["name"] for r in records] == ["alice", "bob"]
    # a node booted on that directory accepts the minted keys
    node = Node(NodeConfig(eps_cap=1.0, delta=1e-6, journal_dir=journal))
    session = NodeSession(peer="t")
    resp = node.handle_request(session, {"id": 1, "op": "auth", "key": key1})
    assert resp["ok"] and resp["user"] == "alice"
    node.close()


def test_audit_trail_records_publishes(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    s = authed_session(node)
    roots = call(node, s, "get_roots", dataset="people")["roots"]
    call(node, s, "publish", handle=roots[1]["handle"], sigma=300.0)
    call(node, s, "publish", handle=roots[1]["handle"], sigma=0.0001)
    dump = node.audit_dump()
    ops = [(e["op"], e["ok"]) for e in dump["events"]]
    assert ("auth", True) in ops and ("publish", True) in ops and ("publish", False) in ops
    published = [e for e in dump["events"] if e["op"] == "publish" and e["ok"]]
    assert published[0]["publish_id"] == "p000001" and published[0]["sigma"] == 300.0
    rejected = [e for e in dump["events"] if e["op"] == "publish" and not e["ok"]]
    assert rejected[0]["rejected_entities"] == ["B"]
    # the audit file mirrors the in-memory trail
    audit_path = tmp_path / "state" / AUDIT_FILE
    assert len(audit_path.read_text().splitlines()) == len(dump["events"])
    node.close()


# -- raw TCP framing ------------------------------------------------------------------------


def test_tcp_malformed_and_auth_frames(tmp_path):
    node = make_node(tmp_path)
    serve_csv(tmp_path, node)
    node.add_user("u1", key="k1", persist=False)
    server = start_server(node)
    host, port = server.address
    try:
        with socket.create_connection((host, port), timeout=5) as sock:
            f = sock.makefile("rwb")

            def send(raw: bytes) -> dict:
                f.write(raw + b"\n")
                f.flush()
                return json.loads(f.readline())

            bad = send(b"this is not json")
            assert bad["ok"] is False and bad["id"] is None
            assert bad["error"]["code"] == "bad_request"
            ok = send(json.dumps({"id": 1, "op": "auth", "key": "k1"}).encode())
            assert ok["ok"] and ok["id"] == 1
            # ids echo back on every frame
            resp = send(json.dumps({"id": 42, "op": "list_datasets"}).encode())
            assert resp["id"] == 42 and resp["datasets"][0]["name"] == "people"
    finally:
        server.shutdown()
        node.close()


def test_user_name_validation(tmp_path):
    node = make_node(tmp_path)
    with pytest.raises(ValueError):
        node.add_user("spaces are bad", key="x", persist=False)
    node.add_user("ok-name_1.2", key="x", persist=False)
    with pytest.raises(ValueError):
        node.add_user("ok-name_1.2", key="y", persist=False)  # duplicate
    node.close()
