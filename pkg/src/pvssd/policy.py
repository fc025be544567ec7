"""In-device policy store and append-only file registry."""

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .channel import verify
from .errors import DuplicatePolicy, ParseError, UnknownPolicy
from .ftl import P_BC, P_RT, P_STATUS, ST_ACTIVE, ST_TOMBSTONE
from .simtime import SECOND


class PolicyOp(IntEnum):
    CREATE = 1
    CHANGE = 2
    DELETE = 3


@dataclass(frozen=True)
class Policy:
    id: int
    rt: int | None
    bc: int | None
    rule: str
    created_at: int

    def __post_init__(self):
        if self.rt is None and self.bc is None:
            raise ValueError("a policy needs RT, BC or both")
        if not self.rule:
            raise ValueError("empty file rule")


class _Marker:
    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name


TOMBSTONE = _Marker("TOMBSTONE")
UNKNOWN = _Marker("UNKNOWN")


_REQ = struct.Struct("<BIQQH")


@dataclass(frozen=True)
class PolicyRequest:
    """Plaintext policy-management request; RT/BC in ticks, ``None`` when unset."""

    op: PolicyOp
    policy_id: int = 0
    rt: int | None = None
    bc: int | None = None
    rule: str = ""

    def encode(self):
        rule = self.rule.encode("utf-8")
        rt = (self.rt or 0) // SECOND
        bc = (self.bc or 0) // SECOND
        return _REQ.pack(int(self.op), self.policy_id, rt, bc, len(rule)) + rule

    @classmethod
    def decode(cls, payload):
        payload = bytes(payload)
        if len(payload) < _REQ.size:
            raise ParseError("policy request too short")
        op, pid, rt, bc, n = _REQ.unpack_from(payload)
        if len(payload) != _REQ.size + n:
            raise ParseError("policy request rule length mismatch")
        try:
            op = PolicyOp(op)
        except ValueError as exc:
            raise ParseError(f"unknown policy op {op}") from exc
        rule = payload[_REQ.size:].decode("utf-8")
        return cls(op, pid, rt * SECOND or None, bc * SECOND or None, rule)


@dataclass(frozen=True)
class PolicyResult:
    op: PolicyOp
    policy_id: int
    policy: Policy | None


@dataclass(frozen=True)
class FileRegistryEntry:
    file_id: int
    policy_id: int
    name_digest: bytes
    registered_at: int


class PolicyStore:
    """Policies, tombstones and the file registry held by the device.

    ``table`` mirrors the policies as an int64 ``(rt, bc, status)`` array
    indexed by policy id, which is what the GC kernels read.
    """

    def __init__(self, key):
        self.key = bytes(key)
        self.last_counter = 0
        self.policies = {}
        self.tombstones = set()
        self.registry = []
        self._registered = set()
        self.next_id = 1
        self.table = np.zeros((8, 3), dtype=np.int64)

    # -- requests

    def apply_policy_request(self, sealed, now):
        payload = verify(sealed, self.key, self.last_counter)
        self.last_counter = sealed.counter
        return self.apply(PolicyRequest.decode(payload), now)

    def apply(self, req, now):
        """Apply an already-authenticated request."""
        if req.op == PolicyOp.CREATE:
            if any(p.rule == req.rule for p in self.policies.values()):
                raise DuplicatePolicy(f"a live policy already covers {req.rule!r}")
            pid = self.next_id
            pol = Policy(pid, req.rt, req.bc, req.rule, now)
            self.next_id += 1
            self.policies[pid] = pol
            self._sync(pid)
            return PolicyResult(req.op, pid, pol)
        pid = req.policy_id
        if pid not in self.policies:
            raise UnknownPolicy(f"no live policy {pid}")
        if req.op == PolicyOp.CHANGE:
            old = self.policies[pid]
            pol = Policy(pid, req.rt, req.bc, old.rule, old.created_at)
            self.policies[pid] = pol
            self._sync(pid)
            return PolicyResult(req.op, pid, pol)
        del self.policies[pid]
        self.tombstones.add(pid)
        self._sync(pid)
        return PolicyResult(req.op, pid, None)

    def _sync(self, pid):
        if pid >= self.table.shape[0]:
            grown = np.zeros((max(2 * self.table.shape[0], pid + 1), 3), dtype=np.int64)
            grown[: self.table.shape[0]] = self.table
            self.table = grown
        row = self.table[pid]
        pol = self.policies.get(pid)
        if pol is None:
            row[:] = (0, 0, ST_TOMBSTONE)
        else:
            row[P_RT] = pol.rt or 0
            row[P_BC] = pol.bc or 0
            row[P_STATUS] = ST_ACTIVE

    # -- registry

    def register_file(self, policy_id, file_id, name_digest, now):
        if policy_id not in self.policies:
            raise UnknownPolicy(f"no live policy {policy_id}")
        if (policy_id, file_id) in self._registered:
            return
        self._registered.add((policy_id, file_id))
        self.registry.append(FileRegistryEntry(file_id, policy_id, bytes(name_digest), now))

    # -- lookups

    def lookup_policy(self, policy_id):
        if policy_id in self.policies:
            return self.policies[policy_id]
        if policy_id in self.tombstones:
            return TOMBSTONE
        return UNKNOWN

    def export_metadata(self):
        return sorted(self.policies.values(), key=lambda p: p.id), list(self.registry)

    # -- persistence

    def to_json(self):
        return {
            "last_counter": self.last_counter,
            "next_id": self.next_id,
            "policies": [[p.id, p.rt, p.bc, p.rule, p.created_at] for p in self.policies.values()],
            "tombstones": sorted(self.tombstones),
            "registry": [[e.file_id, e.policy_id, e.name_digest.hex(), e.registered_at]
                         for e in self.registry],
        }

    @classmethod
    def from_json(cls, key, obj):
        store = cls(key)
        store.last_counter = obj["last_counter"]
        store.next_id = obj["next_id"]
        for pid, rt, bc, rule, created in obj["policies"]:
            store.policies[pid] = Policy(pid, rt, bc, rule, created)
            store._sync(pid)
        for pid in obj["tombstones"]:
            store.tombstones.add(pid)
            store._sync(pid)
        for fid, pid, digest, at in obj["registry"]:
            store.registry.append(FileRegistryEntry(fid, pid, bytes.fromhex(digest), at))
            store._registered.add((pid, fid))
        return store
