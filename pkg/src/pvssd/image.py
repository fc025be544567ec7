"""Binary device image (``SGXSSDIM``).

Layout, all little-endian::

    magic "SGXSSDIM" | u16 version | geometry record
    per page: u8 state | 8 x i64 OOB/index fields | payload (non-Free pages only)
    i64 block table | i64 FTL | i64 register file
    u32 length | JSON (policy store, settings)

The payload is the stored page bytes (compressed OV pages keep their
compressed form) or the 8-byte content token in token mode.
"""

import json
import struct

import numpy as np

from ._jit import kernel
from .device import Device
from .nand import C_GC_THRESHOLD, N_OOB, NandCosts, NandGeometry
from .policy import PolicyStore

MAGIC = b"SGXSSDIM"
VERSION = 1
_GEOM = struct.Struct("<IIIIQQQQBBI")
_FIXED = 1 + 8 * N_OOB
_CHUNK = 1 << 15


def _fixed_dtype():
    return np.dtype([("state", "u1"), ("oob", "<i8", (N_OOB,))])


def _payload_view(dev):
    n = dev.nand
    if dev.keep_data:
        return n.data
    return n.tok.astype("<i8").view(np.uint8).reshape(-1, 8)


def dump_image(dev):
    g = dev.geometry
    c = dev.costs
    flags = (1 if dev.keep_data else 0) | (2 if dev.versioning else 0)
    out = [MAGIC, struct.pack("<H", VERSION),
           _GEOM.pack(g.page_size_bytes, g.pages_per_block, g.blocks_total, g.ov_zone_blocks,
                      dev.logical_pages, c.read, c.program, c.erase, flags, 0,
                      int(dev.ctl[C_GC_THRESHOLD]))]
    pst = dev.nand.pst
    oob = dev.nand.oob
    payload = _payload_view(dev)
    fdt = _fixed_dtype()
    for s in range(0, pst.size, _CHUNK):
        e = min(s + _CHUNK, pst.size)
        fixed = np.empty(e - s, dtype=fdt)
        fixed["state"] = pst[s:e]
        fixed["oob"] = oob[s:e]
        rows = np.concatenate([fixed.view(np.uint8).reshape(e - s, _FIXED), payload[s:e]], axis=1)
        mask = np.ones(rows.shape, dtype=bool)
        mask[pst[s:e] == 0, _FIXED:] = False
        out.append(rows[mask].tobytes())
    for arr in (dev.nand.blk, dev.ftl, dev.ctl):
        out.append(arr.astype("<i8").tobytes())
    meta = json.dumps({"policies": dev.policies.to_json()}, sort_keys=True,
                      separators=(",", ":")).encode()
    out.append(struct.pack("<I", len(meta)))
    out.append(meta)
    return b"".join(out)


@kernel
def record_offsets(buf, start, n, fixed, psz):
    offs = np.empty(n, dtype=np.int64)
    o = start
    for p in range(n):
        if o >= buf.shape[0]:
            return offs, -1
        offs[p] = o
        o += fixed
        if buf[offs[p]] != 0:
            o += psz
    return offs, o


def load_image(blob, key=None):
    buf = np.frombuffer(blob, dtype=np.uint8)
    if bytes(blob[:8]) != MAGIC:
        raise ValueError("not a device image")
    (version,) = struct.unpack_from("<H", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported image version {version}")
    ps, ppb, nb, ov, nlog, cr, cp, ce, flags, _, thr = _GEOM.unpack_from(blob, 10)
    g = NandGeometry(ps, ppb, nb, ov)
    kw = {} if key is None else {"key": key}
    dev = Device(g, NandCosts(cr, cp, ce), keep_data=bool(flags & 1), versioning=bool(flags & 2),
                 gc_threshold=thr, logical_pages=nlog, **kw)
    n = g.total_pages
    psz = ps if dev.keep_data else 8
    offs, end = record_offsets(buf, 10 + _GEOM.size, n, _FIXED, psz)
    if end < 0:
        raise ValueError("image truncated in page records")
    fdt = _fixed_dtype()
    nand = dev.nand
    tok_bytes = np.zeros((n, 8), dtype=np.uint8)
    for s in range(0, n, _CHUNK):
        e = min(s + _CHUNK, n)
        o = offs[s:e]
        fixed = buf[o[:, None] + np.arange(_FIXED)].copy().view(fdt).reshape(-1)
        nand.pst[s:e] = fixed["state"]
        nand.oob[s:e] = fixed["oob"]
        live = np.flatnonzero(fixed["state"] != 0)
        if live.size:
            rows = buf[(o[live] + _FIXED)[:, None] + np.arange(psz)]
            if dev.keep_data:
                nand.data[s + live] = rows
            else:
                tok_bytes[s + live] = rows
    if not dev.keep_data:
        nand.tok[:] = tok_bytes.view("<i8").reshape(-1)
    o = end
    for arr in (nand.blk, dev.ftl, nand.ctl):
        size = arr.size * 8
        arr.reshape(-1)[:] = np.frombuffer(blob, dtype="<i8", count=arr.size, offset=o)
        o += size
    (mlen,) = struct.unpack_from("<I", blob, o)
    meta = json.loads(bytes(blob[o + 4: o + 4 + mlen]))
    dev.policies = PolicyStore.from_json(dev.key, meta["policies"])
    return dev


def save(dev, path):
    with open(path, "wb") as f:
        f.write(dump_image(dev))


def load(path, key=None):
    with open(path, "rb") as f:
        return load_image(f.read(), key)

