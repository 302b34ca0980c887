"""Wire formats for the client-node protocol, with value redaction built in.

Transport is newline-delimited UTF-8 JSON.  Requests look like
``{"id": 7, "op": "publish", ...}``; responses echo the id with either
``"ok": true`` and a payload or ``"ok": false`` and an ``error`` object
(plus a ``rejection`` object for budget refusals).

Everything leaving the node toward a data-scientist session is built from
the redacting serializers below and then structurally scanned: no raw or
clipped entity input value may ever appear on the wire.
"""

from __future__ import annotations

import json
from typing import Any

from .accounting import RdpSpend
from .mechanism import PublishReceipt
from .poly import VarId
from .scalar import PrivateScalar

#: Keys that carry private per-entity data in owner-side structures.  They are
#: forbidden anywhere in an outbound message.
PRIVATE_KEYS = frozenset({"clipped_input", "raw_value"})


class WireLeakError(AssertionError):
    """An outbound message was about to carry private entity data."""


def encode(msg: dict) -> bytes:
    """One protocol message as a single JSON line."""
    return (json.dumps(msg, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def decode(line: bytes | str) -> dict:
    msg = json.loads(line)
    if not isinstance(msg, dict):
        raise ValueError("protocol messages must be JSON objects")
    return msg


def varid_wire(v: VarId) -> dict:
    return {"entity": v.entity, "attribute": v.attribute}


def varid_from_wire(obj: dict) -> VarId:
    return VarId(str(obj["entity"]), str(obj.get("attribute", "")))


def spend_wire(spend: RdpSpend, redact: bool = True) -> dict:
    """Spend record for the wire; the clipped input only survives owner-side."""
    out = {
        "entity": spend.entity.entity,
        "attribute": spend.entity.attribute,
        "lipschitz": spend.lipschitz,
        "rho": spend.rho,
    }
    if not redact:
        out["clipped_input"] = spend.clipped_input
    return out


def receipt_wire(receipt: PublishReceipt, redact: bool = True) -> dict:
    return {
        "publish_id": receipt.publish_id,
        "value": receipt.value,
        "sigma": receipt.sigma,
        "timestamp": receipt.timestamp,
        "spends": [spend_wire(s, redact=redact) for s in receipt.spends],
    }


def scalar_summary(scalar: PrivateScalar) -> dict:
    """Shareable description of a scalar: structure and public bounds only."""
    entities = []
    for v in sorted(scalar.inputs):
        rec = scalar.inputs[v]
        entities.append(
            {
                "entity": v.entity,
                "attribute": v.attribute,
                "floor": rec.floor,
                "ceiling": rec.ceiling,
            }
        )
    return {
        "poly": str(scalar.poly),
        "degree": scalar.degree(),
        "terms": scalar.term_count,
        "entities": entities,
    }


def assert_no_private_leakage(obj: Any) -> None:
    """Structural scan of an outbound payload.

    Rejects any dict carrying a private key, and any serialized entity-input
    record (a dict with both ``floor`` and ``ceiling``) that also carries a
    ``value`` field.
    """
    if isinstance(obj, dict):
        keys = obj.keys()
        bad = PRIVATE_KEYS.intersection(keys)
        if bad:
            raise WireLeakError(f"private key(s) {sorted(bad)} in outbound message")
        if "floor" in keys and "ceiling" in keys and "value" in keys:
            raise WireLeakError("entity input serialized with its raw value")
        for v in obj.values():
            assert_no_private_leakage(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            assert_no_private_leakage(v)
