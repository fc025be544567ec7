"""Point-in-time file recovery: chain-walk (fast) and full-scan (robust)."""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NothingAtTime, OverlappingOffsets, UnmappedLpa
from .nand import C_CLOCK, C_READS, FREE, O_FID, O_FOFF, O_POL, O_WT, Zone


class RecoveryGapWarning(UserWarning):
    """A page-sized hole was zero-filled during reconstruction."""


@dataclass(frozen=True)
class RecoveredPage:
    file_offset: int
    data: bytes
    wt: int
    source: Zone


def _zone(dev, ppa):
    g = dev.geometry
    return Zone.VALID if ppa // g.pages_per_block < g.valid_zone_blocks else Zone.OV


def _charge_reads(dev, n):
    dev.ctl[C_CLOCK] += int(dev.costs.read) * n
    dev.ctl[C_READS] += n


def fast_recover(dev, file_id, t, lbas):
    """Per LBA, the version of ``file_id`` that was live at ``t`` (wt <= t < dead_at)."""
    found = {}
    for lba in lbas:
        try:
            chain = dev.chain_walk(int(lba))
        except UnmappedLpa:
            continue
        _charge_reads(dev, len(chain))
        for e in chain:
            if e.oob.file_id == file_id and e.wt <= t < e.dead_at:
                off = e.oob.file_offset
                if off not in found or found[off][0].wt < e.wt:
                    found[off] = (e, dev.page_payload(e.ppa, charge=False))
                break
    if not found:
        raise NothingAtTime(f"file {file_id} has no version live at {t}")
    return [RecoveredPage(off, data, e.wt, e.zone)
            for off, (e, data) in sorted(found.items())]


def robust_recover(dev, file_id, t):
    """Scan every programmed page; per offset keep the newest version written by ``t``.

    Needs neither the file table nor the FTL.
    """
    nand = dev.nand
    live = np.flatnonzero(nand.pst != FREE)
    _charge_reads(dev, live.size)
    oob = nand.oob[live]
    sel = (oob[:, O_FID] == file_id) & (oob[:, O_POL] >= 0) & (oob[:, O_WT] <= t)
    ppas = live[sel]
    if ppas.size == 0:
        raise NothingAtTime(f"file {file_id} has no version written by {t}")
    offs = nand.oob[ppas, O_FOFF]
    wts = nand.oob[ppas, O_WT]
    order = np.lexsort((-wts, offs))
    ppas, offs, wts = ppas[order], offs[order], wts[order]
    first = np.ones(ppas.size, dtype=bool)
    first[1:] = offs[1:] != offs[:-1]
    out = []
    for p, o, w in zip(ppas[first].tolist(), offs[first].tolist(), wts[first].tolist()):
        out.append(RecoveredPage(o, dev.page_payload(p, charge=False), w, _zone(dev, p)))
    return out


def reconstruct_with_holes(pages, page_size, size_hint=None):
    """Return ``(content, holes)`` where holes lists zero-filled page offsets."""
    offs = [p.file_offset for p in pages]
    if len(set(offs)) != len(offs):
        raise OverlappingOffsets("two recovered pages claim the same offset")
    for o in offs:
        if o % page_size:
            raise OverlappingOffsets(f"offset {o} is not page aligned")
    end = max((o + page_size for o in offs), default=0)
    if size_hint is not None:
        end = max(end, size_hint)
    buf = bytearray(end)
    have = set()
    for p in pages:
        buf[p.file_offset: p.file_offset + page_size] = p.data
        have.add(p.file_offset)
    holes = [o for o in range(0, end, page_size) if o not in have]
    if size_hint is not None:
        del buf[size_hint:]
        holes = [o for o in holes if o < size_hint]
    return bytes(buf), holes


def reconstruct(pages, page_size, size_hint=None):
    data, holes = reconstruct_with_holes(pages, page_size, size_hint)
    for o in holes:
        warnings.warn(f"no version for offset {o}; zero-filled", RecoveryGapWarning, stacklevel=2)
    return data
