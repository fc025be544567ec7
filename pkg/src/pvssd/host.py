"""Host stack emulation: secure policy manager front-end, rule matching,
piggybacked pMeta on writes, and a flat file table standing in for a file system."""

import hashlib
import heapq
import re
from dataclasses import dataclass, field
from fnmatch import fnmatchcase

import numpy as np

from .channel import Sealer
from .errors import (
    CapacityExceeded, DeviceUnreachable, ParseError, UnknownFile, UnknownPolicy, UnmappedLpa,
)
from .pmeta import PMeta, encode_trailer, entries_per_page
from .policy import PolicyOp, PolicyRequest
from .simtime import parse_duration


def name_digest(name):
    return hashlib.sha256(name.encode("utf-8")).digest()


# ------------------------------------------------------------------ SPM text

_CMD_RE = re.compile(r"^\s*\$?\s*(PolicyCreate|PolicyChange|PolicyDelete)\b(.*)$", re.S)
_ARG_RE = re.compile(r"\s*\{\s*(\w+)\s*=\s*([^{}]*?)\s*\}")
_ALLOWED = {
    PolicyOp.CREATE: ({"FileRule"}, {"RT", "BC"}),
    PolicyOp.CHANGE: ({"Id"}, {"RT", "BC"}),
    PolicyOp.DELETE: ({"Id"}, set()),
}


def parse_spm(text):
    """Parse ``PolicyCreate {FileRule=*.pdf} {RT=1year} {BC=1day}`` and friends."""
    m = _CMD_RE.match(text)
    if not m:
        raise ParseError(f"unknown SPM command: {text!r}")
    op = {"PolicyCreate": PolicyOp.CREATE, "PolicyChange": PolicyOp.CHANGE,
          "PolicyDelete": PolicyOp.DELETE}[m.group(1)]
    rest = m.group(2)
    args = {}
    pos = 0
    for a in _ARG_RE.finditer(rest):
        if a.start() != pos:
            raise ParseError(f"unexpected text {rest[pos:a.start()]!r}")
        key = a.group(1)
        if key in args:
            raise ParseError(f"{key} given twice")
        args[key] = a.group(2)
        pos = a.end()
    if rest[pos:].strip():
        raise ParseError(f"unexpected text {rest[pos:]!r}")
    required, optional = _ALLOWED[op]
    unknown = set(args) - required - optional
    if unknown:
        raise ParseError(f"{m.group(1)} does not take {sorted(unknown)}")
    missing = required - set(args)
    if missing:
        raise ParseError(f"{m.group(1)} needs {sorted(missing)}")
    if op != PolicyOp.DELETE and not ({"RT", "BC"} & set(args)):
        raise ParseError("at least one of RT and BC is required")

    def dur(key):
        if key not in args:
            return None
        try:
            v = parse_duration(args[key])
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}") from exc
        if v <= 0:
            raise ParseError(f"{key} must be positive")
        return v

    pid = 0
    if "Id" in args:
        if not args["Id"].isdigit():
            raise ParseError(f"bad policy id {args['Id']!r}")
        pid = int(args["Id"])
    rule = args.get("FileRule", "")
    if op == PolicyOp.CREATE and not rule:
        raise ParseError("empty FileRule")
    return PolicyRequest(op, pid, dur("RT"), dur("BC"), rule)


# -------------------------------------------------------------- file system


@dataclass
class FileEntry:
    name: str
    file_id: int | None = None
    lbas: list = field(default_factory=list)
    size: int = 0


class LbaAllocator:
    """Lowest-freed-first reuse, then a bump cursor."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.cursor = 0
        self.free = []

    def take(self, n):
        out = []
        while self.free and len(out) < n:
            out.append(heapq.heappop(self.free))
        need = n - len(out)
        if self.cursor + need > self.capacity:
            for lba in out:
                heapq.heappush(self.free, lba)
            raise CapacityExceeded(f"no room for {n} more logical pages")
        out.extend(range(self.cursor, self.cursor + need))
        self.cursor += need
        return out

    def release(self, lbas):
        for lba in lbas:
            heapq.heappush(self.free, lba)


class FileTable:
    def __init__(self):
        self.files = {}

    def get(self, name):
        try:
            return self.files[name]
        except KeyError:
            raise UnknownFile(name) from None

    def ensure(self, name):
        return self.files.setdefault(name, FileEntry(name))

    def lba_list(self, name):
        return list(self.get(name).lbas)

    def names(self):
        return sorted(self.files)


@dataclass
class OpenHandle:
    name: str
    ids: tuple | None
    closed: bool = False


class PolicyManager:
    """Host-side cache of device policies plus the name-to-file-id assignment."""

    def __init__(self, device):
        self.device = device
        self.policies = []
        self.file_ids = {}
        self.next_file_id = 1
        self.refresh()

    def refresh(self):
        self.policies, _ = self.device.export_metadata()

    def file_id_for(self, name):
        fid = self.file_ids.get(name)
        if fid is None:
            fid = self.next_file_id
            self.next_file_id += 1
            self.file_ids[name] = fid
        return fid

    def pm_match(self, name):
        for pol in self.policies:
            if fnmatchcase(name, pol.rule):
                fid = self.file_id_for(name)
                try:
                    self.device.register_file(pol.id, fid, name_digest(name))
                except UnknownPolicy as exc:
                    self.refresh()
                    raise DeviceUnreachable(f"registration of {name!r} refused: {exc}") from exc
                return pol.id, fid
        return None


class HostShim:
    """Drives a :class:`~pvssd.device.Device` the way the host stack would.

    ``piggyback=False`` never attaches pMeta, i.e. the piggyback module is
    compiled out.
    """

    def __init__(self, device, key=None, piggyback=True, spm_latency=0):
        self.device = device
        self.ps = device.geometry.page_size_bytes
        self.sealer = Sealer(device.key if key is None else key)
        self.piggyback = piggyback
        self.spm_latency = spm_latency
        self.table = FileTable()
        self.alloc = LbaAllocator(device.logical_pages)
        self.pm = PolicyManager(device)
        self.trace = None

    # -- policy management

    def spm_submit(self, command):
        req = parse_spm(command) if isinstance(command, str) else command
        if self.spm_latency:
            self.device.advance(self.spm_latency)
        sealed = self.sealer.seal(req.encode())
        if self.trace is not None:
            text = command if isinstance(command, str) else req.encode().hex()
            self.trace({"t": self.device.now(), "op": "POLICY", "cmd": text})
        result = self.device.apply_policy_request(sealed)
        self.pm.refresh()
        return result

    # -- files

    def open(self, name):
        entry = self.table.ensure(name)
        ids = self.pm.pm_match(name) if self.piggyback else None
        if ids is not None:
            entry.file_id = ids[1]
        return OpenHandle(name, ids)

    def close(self, handle):
        handle.ids = None
        handle.closed = True

    def _check(self, handle):
        if handle.closed:
            raise ValueError(f"handle for {handle.name!r} is closed")
        return self.table.get(handle.name)

    def _grow(self, entry, npages):
        if npages > len(entry.lbas):
            entry.lbas.extend(self.alloc.take(npages - len(entry.lbas)))

    def _send(self, handle, first_page, lpas, pages):
        """Issue WRITE requests, each small enough for one trailer page."""
        per = entries_per_page(self.ps)
        for s in range(0, len(lpas), per):
            chunk = lpas[s: s + per]
            if self.device.keep_data:
                payload = b"".join(pages[s: s + per])
            else:
                payload = np.asarray(pages[s: s + per], dtype=np.int64)
            trailer = None
            if handle.ids is not None:
                pid, fid = handle.ids
                metas = [PMeta(pid, fid, (first_page + s + i) * self.ps) for i in range(len(chunk))]
                trailer = encode_trailer(chunk, metas, self.ps)
            self.device.write_request(chunk, payload, trailer)

    def _page(self, lba):
        try:
            return self.device.host_read(lba)
        except UnmappedLpa:
            return bytes(self.ps)

    def write(self, handle, offset, data):
        entry = self._check(handle)
        data = bytes(data)
        if not data:
            return 0
        ps = self.ps
        end = offset + len(data)
        first = offset // ps
        last = (end - 1) // ps
        start = min(first, len(entry.lbas))
        pages = []
        for k in range(start, last + 1):
            lo = k * ps
            partial = lo < offset or lo + ps > end
            if partial and k < len(entry.lbas) and lo < entry.size:
                cur = bytearray(self._page(entry.lbas[k]))
            else:
                cur = bytearray(ps)
            a, b = max(offset, lo), min(end, lo + ps)
            if b > a:
                cur[a - lo: b - lo] = data[a - offset: b - offset]
            pages.append(bytes(cur))
        self._grow(entry, last + 1)
        entry.size = max(entry.size, end)
        if self.trace is not None:
            self.trace({"t": self.device.now(), "op": "WRITE", "file": handle.name,
                        "offset": offset, "len": len(data)})
        self._send(handle, start, entry.lbas[start: last + 1], pages)
        return len(data)

    def write_tokens(self, handle, first_page, tokens):
        """Token-mode write of whole pages starting at page ``first_page``."""
        entry = self._check(handle)
        tokens = [int(t) for t in tokens]
        if first_page > len(entry.lbas):
            tokens = [0] * (first_page - len(entry.lbas)) + tokens
            first_page = len(entry.lbas)
        last = first_page + len(tokens)
        self._grow(entry, last)
        entry.size = max(entry.size, last * self.ps)
        self._send(handle, first_page, entry.lbas[first_page:last], tokens)

    def read(self, handle, offset, length):
        entry = self._check(handle)
        end = min(offset + length, entry.size)
        out = bytearray()
        ps = self.ps
        pos = offset
        while pos < end:
            k = pos // ps
            try:
                page = self.device.host_read(entry.lbas[k])
            except UnmappedLpa:
                break
            lo = k * ps
            out += page[pos - lo: min(end, lo + ps) - lo]
            pos = lo + ps
        return bytes(out)

    def read_tokens(self, name):
        return [self.device.host_read(l) for l in self.table.get(name).lbas]

    def delete(self, name):
        entry = self.table.get(name)
        self.alloc.release(entry.lbas)
        del self.table.files[name]

    def adopt(self, name):
        """Rewrite a file so that all of its pages carry the policy it now matches."""
        entry = self.table.get(name)
        h = self.open(name)
        ids = h.ids
        if self.device.keep_data:
            content = self.read(OpenHandle(name, None), 0, entry.size)
            self.write(h, 0, content)
        else:
            self.write_tokens(h, 0, self.read_tokens(name))
        self.close(h)
        return ids

    def lba_list(self, name):
        return self.table.lba_list(name)

    def ls(self):
        rows = []
        for name in self.table.names():
            e = self.table.files[name]
            rows.append((name, self.pm.file_ids.get(name), e.size, len(e.lbas)))
        return rows

    # -- convenience

    def write_file(self, name, data, offset=0):
        h = self.open(name)
        try:
            return self.write(h, offset, data)
        finally:
            self.close(h)

    def read_file(self, name, offset=0, length=None):
        entry = self.table.get(name)
        h = OpenHandle(name, None)
        return self.read(h, offset, entry.size - offset if length is None else length)

    # -- persistence (CLI sidecar)

    def to_json(self):
        return {
            "files": [[e.name, e.lbas, e.size] for e in self.table.files.values()],
            "file_ids": self.pm.file_ids,
            "next_file_id": self.pm.next_file_id,
            "cursor": self.alloc.cursor,
            "free": sorted(self.alloc.free),
            "counter": self.sealer.last_counter,
            "piggyback": self.piggyback,
        }

    @classmethod
    def from_json(cls, device, obj, key=None):
        shim = cls(device, key=key, piggyback=obj.get("piggyback", True))
        for name, lbas, size in obj["files"]:
            shim.table.files[name] = FileEntry(name, obj["file_ids"].get(name), list(lbas), size)
        shim.pm.file_ids = dict(obj["file_ids"])
        shim.pm.next_file_id = obj["next_file_id"]
        shim.alloc.cursor = obj["cursor"]
        shim.alloc.free = list(obj["free"])
        heapq.heapify(shim.alloc.free)
        shim.sealer.last_counter = max(obj["counter"], device.policies.last_counter)
        return shim

