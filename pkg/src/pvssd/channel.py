"""Authenticated SPM-to-device request channel (HMAC-SHA256 with anti-replay counter)."""

import hashlib
import hmac
import struct
from dataclasses import dataclass

from .errors import AuthFailed, CounterReuse, ReplayDetected

TAG_LEN = 32
DOMAIN_POLICY = b"\x50"  # domain separation for policy-management requests
_HEAD = struct.Struct("<QI")


def mac(key, payload, counter, domain=DOMAIN_POLICY):
    msg = domain + bytes(payload) + struct.pack("<Q", counter)
    return hmac.new(bytes(key), msg, hashlib.sha256).digest()


@dataclass(frozen=True)
class SealedRequest:
    payload: bytes
    counter: int
    tag: bytes

    def to_wire(self):
        return _HEAD.pack(self.counter, len(self.payload)) + self.payload + self.tag

    @classmethod
    def from_wire(cls, blob):
        blob = bytes(blob)
        if len(blob) < _HEAD.size + TAG_LEN:
            raise AuthFailed("sealed request truncated")
        counter, n = _HEAD.unpack_from(blob)
        if len(blob) != _HEAD.size + n + TAG_LEN:
            raise AuthFailed("sealed request length mismatch")
        body = blob[_HEAD.size: _HEAD.size + n]
        return cls(body, counter, blob[_HEAD.size + n:])


def seal(payload, key, counter):
    if counter < 1 or counter >= 1 << 64:
        raise CounterReuse(f"counter {counter} outside 1..2^64-1")
    payload = bytes(payload)
    return SealedRequest(payload, counter, mac(key, payload, counter))


def verify(sealed, key, last_counter):
    """Return the payload if the tag checks out and the counter is fresh."""
    expect = mac(key, sealed.payload, sealed.counter)
    if not hmac.compare_digest(expect, bytes(sealed.tag)):
        raise AuthFailed("request tag does not verify")
    if sealed.counter <= last_counter:
        raise ReplayDetected(f"counter {sealed.counter} <= last accepted {last_counter}")
    return sealed.payload


class Sealer:
    """Host-side sealer that never reuses a counter."""

    def __init__(self, key, last_counter=0):
        self.key = bytes(key)
        self.last_counter = last_counter

    def seal(self, payload, counter=None):
        if counter is None:
            counter = self.last_counter + 1
        if counter <= self.last_counter:
            raise CounterReuse(f"counter {counter} already used (last {self.last_counter})")
        sealed = seal(payload, self.key, counter)
        self.last_counter = counter
        return sealed
