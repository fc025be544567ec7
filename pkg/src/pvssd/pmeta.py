"""Piggybacked policy hints (pMeta) and the ``PGBK`` trailer page that carries them."""

from dataclasses import dataclass

import numpy as np

from .errors import BadLength

MAGIC = b"PGBK"
ENTRY = np.dtype([("lpa", "<u8"), ("policy_id", "<u4"), ("file_id", "<u8"), ("file_offset", "<u8")])
_HEADER = 8  # magic + u32 count


@dataclass(frozen=True)
class PMeta:
    policy_id: int
    file_id: int
    file_offset: int


def entries_per_page(page_size):
    return (page_size - _HEADER) // ENTRY.itemsize


def encode_trailer(lpas, pmetas, page_size):
    """One metadata page listing the pMeta of every tagged page in a request."""
    rows = [(lpa, m.policy_id, m.file_id, m.file_offset)
            for lpa, m in zip(lpas, pmetas) if m is not None]
    if len(rows) > entries_per_page(page_size):
        raise BadLength(f"{len(rows)} entries do not fit one {page_size}-byte trailer")
    arr = np.array(rows, dtype=ENTRY)
    page = bytearray(page_size)
    page[:4] = MAGIC
    page[4:8] = len(rows).to_bytes(4, "little")
    body = arr.tobytes()
    page[_HEADER: _HEADER + len(body)] = body
    return bytes(page)


def decode_trailer(page):
    """Return the structured entry array held in a trailer page."""
    page = bytes(page)
    if page[:4] != MAGIC:
        raise BadLength("trailer page lacks PGBK magic")
    n = int.from_bytes(page[4:8], "little")
    if _HEADER + n * ENTRY.itemsize > len(page):
        raise BadLength("trailer entry count overruns the page")
    return np.frombuffer(page, dtype=ENTRY, count=n, offset=_HEADER)


def trailer_columns(lpas, trailer):
    """Per-page (policy, file, offset) columns for ``lpas``; -1 where untagged."""
    lpas = np.asarray(lpas, dtype=np.int64)
    n = lpas.size
    pol = np.full(n, -1, dtype=np.int64)
    fid = np.full(n, -1, dtype=np.int64)
    foff = np.full(n, -1, dtype=np.int64)
    if trailer is None:
        return pol, fid, foff
    ent = decode_trailer(trailer)
    pos = {}
    for i, lpa in enumerate(lpas.tolist()):
        pos.setdefault(lpa, []).append(i)
    for e in ent:
        for i in pos.get(int(e["lpa"]), ()):
            pol[i] = e["policy_id"]
            fid[i] = e["file_id"]
            foff[i] = e["file_offset"]
    return pol, fid, foff
