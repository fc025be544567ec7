"""The simulated SSD: NAND array, versioning FTL, policy store and command surface."""

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ftl as K
from .compress import decompress
from .errors import (
    BadLength, BrokenChain, CapacityExceeded, ClockRegression, NoVictim, OvZoneFullStop,
    ReadFreePage, UnmappedLpa,
)
from .nand import (
    B_NINVALID, B_NOV, B_WP, C_BYTES_IN, C_BYTES_OUT, C_CLOCK, C_COST_READ, C_DECLOG_N,
    C_ERASES, C_FRONTIER, C_GC_COPIES, C_GC_DROPPED, C_GC_RUNS, C_GCLOG_N, C_HALTED,
    C_HOST_READS, C_HOST_WRITES, C_NFREE, C_NFREE_OV, C_OV_DISCARDED, C_OV_PRESERVED,
    C_PROGRAMS, C_READS, C_RECLAIMED, C_UNKNOWN_POLICY, ERR_BROKEN_CHAIN, ERR_LOG_FULL,
    ERR_NO_VICTIM, ERR_OV_FULL, ERR_ZONE_FULL, FREE, INVALID, O_CLEN, O_LPA, O_WT, OK, OLD,
    VALID, Nand, NandCosts, NandGeometry, OobRecord, Zone, new_ctl,
)
from .pmeta import trailer_columns
from .policy import TOMBSTONE, UNKNOWN, PolicyStore
from .simtime import INF

DEFAULT_KEY = bytes.fromhex("6b6465762d73696d2d64656d6f2d6b65792d303030303030303030303030303031")
LOGICAL_FRACTION = 0.9


class Decision(Enum):
    PRESERVE = "preserve"
    DISCARD = "discard"


@dataclass(frozen=True)
class VersionChainEntry:
    ppa: int
    wt: int
    dead_at: int
    oob: OobRecord
    zone: Zone


@dataclass(frozen=True)
class GcReport:
    victim_block: int
    valid_copied: int
    invalid_dropped: int
    ov_preserved: int
    ov_discarded: int
    bytes_compressed_in: int
    bytes_compressed_out: int
    elapsed_sim_time: int
    seq: int = 0
    started_at: int = 0

    @property
    def pages_examined(self):
        return self.valid_copied + self.invalid_dropped + self.ov_preserved + self.ov_discarded


@dataclass(frozen=True)
class GcDecision:
    """One PV decision taken during GC, as logged by the kernel."""

    gc_seq: int
    ppa: int
    lpa: int
    wt: int
    dead_at: int
    policy_id: int
    preserve: bool
    bucket: int
    at: int


def pv_decide(entry, policy, cur_time):
    """Preserve/Discard for a chain entry under ``policy`` (a Policy, TOMBSTONE or UNKNOWN)."""
    if policy is TOMBSTONE or policy is UNKNOWN or policy is None:
        return Decision.DISCARD
    keep = K.pv_keep(int(entry.wt), int(entry.dead_at), int(policy.rt or 0), int(policy.bc or 0),
                     K.ST_ACTIVE, int(cur_time))
    return Decision.PRESERVE if keep else Decision.DISCARD


class Device:
    """Versioning SSD.

    ``keep_data=False`` keeps a 64-bit content token per page instead of the
    bytes (used by the large benchmark partition).  ``versioning=False`` turns
    the device into a plain page-mapped FTL that ignores pMeta.
    """

    def __init__(self, geometry=None, costs=None, *, key=DEFAULT_KEY, keep_data=True,
                 versioning=True, gc_threshold=2, logical_pages=None, start_time=0,
                 history=True, log_capacity=4096):
        geometry = geometry or NandGeometry()
        costs = costs or NandCosts()
        valid_pages = geometry.valid_zone_blocks * geometry.pages_per_block
        if logical_pages is None:
            logical_pages = int(valid_pages * LOGICAL_FRACTION)
        if logical_pages > valid_pages - (gc_threshold + 1) * geometry.pages_per_block:
            raise ValueError("logical capacity leaves no GC headroom")
        ctl = new_ctl(geometry, costs, logical_pages, gc_threshold, versioning, keep_data)
        ctl[C_CLOCK] = start_time
        self.nand = Nand(geometry, costs, keep_data, ctl)
        self.geometry = geometry
        self.costs = costs
        self.key = bytes(key)
        self.keep_data = keep_data
        self.versioning = versioning
        self.logical_pages = logical_pages
        self.ftl = np.full(logical_pages, -1, dtype=np.int64)
        self.policies = PolicyStore(self.key)
        self.history = history
        self.gclog = np.zeros((log_capacity, K.N_GCLOG), dtype=np.int64)
        self.declog = np.zeros((max(log_capacity, 4 * geometry.pages_per_block), K.N_DECLOG),
                               dtype=np.int64)
        self.gc_reports = []
        self.decisions = []
        self.gc_listeners = []
        self.command_log = None

    # ------------------------------------------------------------- plumbing

    @property
    def ctl(self):
        return self.nand.ctl

    def _state(self):
        n = self.nand
        return (n.pst, n.oob, n.tok, n.data, n.blk, self.ftl, n.ctl, self.policies.table,
                self.gclog, self.declog)

    def _drain(self):
        ctl = self.ctl
        ng = int(ctl[C_GCLOG_N])
        nd = int(ctl[C_DECLOG_N])
        reports = []
        if ng:
            for row in self.gclog[:ng].tolist():
                reports.append(GcReport(row[K.G_VICTIM], row[K.G_VALID], row[K.G_INVALID],
                                        row[K.G_PRESERVED], row[K.G_DISCARDED], row[K.G_BYTES_IN],
                                        row[K.G_BYTES_OUT], row[K.G_T1] - row[K.G_T0],
                                        row[K.G_SEQ], row[K.G_T0]))
        decisions = []
        if nd:
            for r in self.declog[:nd].tolist():
                decisions.append(GcDecision(r[K.D_SEQ], r[K.D_PPA], r[K.D_LPA], r[K.D_WT],
                                            r[K.D_DEAD], r[K.D_POL], bool(r[K.D_KEEP]),
                                            r[K.D_BUCKET], r[K.D_TIME]))
        ctl[C_GCLOG_N] = 0
        ctl[C_DECLOG_N] = 0
        if self.history:
            self.gc_reports.extend(reports)
            self.decisions.extend(decisions)
        for fn in self.gc_listeners:
            fn(reports, decisions)
        return reports

    def _raise_for(self, code, what):
        if code == ERR_OV_FULL:
            raise OvZoneFullStop(f"{what}: OV zone cannot hold the pages that must be preserved")
        if code in (ERR_NO_VICTIM, ERR_ZONE_FULL):
            raise CapacityExceeded(f"{what}: no reclaimable ValidZone space")
        if code == ERR_BROKEN_CHAIN:
            raise BrokenChain(f"{what}: old version not linked from its chain")
        raise RuntimeError(f"{what}: kernel status {code}")

    # ----------------------------------------------------------------- time

    def now(self):
        return int(self.ctl[C_CLOCK])

    def set_time(self, t):
        t = int(t)
        if t < self.now():
            raise ClockRegression(f"cannot move clock back from {self.now()} to {t}")
        self.ctl[C_CLOCK] = t

    def advance(self, dt):
        self.set_time(self.now() + int(dt))

    @property
    def halted(self):
        return bool(self.ctl[C_HALTED])

    # ---------------------------------------------------------------- writes

    def write_request(self, lpas, payload, trailer=None):
        """WRITE command: ``len(lpas)`` pages of ``payload`` plus an optional PGBK trailer page.

        In token mode ``payload`` is a sequence of integer content tokens.
        """
        lpas = np.asarray(lpas, dtype=np.int64).reshape(-1)
        if self.command_log is not None:
            self.command_log.append(("WRITE", lpas.tobytes(), _payload_bytes(payload),
                                     b"" if trailer is None else bytes(trailer)))
        pol, fid, foff = trailer_columns(lpas, trailer)
        self._write(lpas, payload, pol, fid, foff)

    def host_write(self, lpa, data, pmeta=None):
        """Single-page write with an optional :class:`PMeta`."""
        pol = np.array([-1 if pmeta is None else pmeta.policy_id], dtype=np.int64)
        fid = np.array([-1 if pmeta is None else pmeta.file_id], dtype=np.int64)
        foff = np.array([-1 if pmeta is None else pmeta.file_offset], dtype=np.int64)
        payload = [data] if not self.keep_data else bytes(data)
        self._write(np.array([lpa], dtype=np.int64), payload, pol, fid, foff)

    def _write(self, lpas, payload, pol, fid, foff):
        n = lpas.size
        if n and (lpas.min() < 0 or lpas.max() >= self.logical_pages):
            raise CapacityExceeded(f"LPA outside exported capacity {self.logical_pages}")
        ps = self.geometry.page_size_bytes
        if self.keep_data:
            buf = np.frombuffer(bytes(payload), dtype=np.uint8)
            if buf.size != n * ps:
                raise BadLength(f"payload of {buf.size} bytes for {n} pages")
            rows = buf.reshape(n, ps)
            toks = np.zeros(n, dtype=np.int64)
        else:
            rows = np.zeros((n, 0), dtype=np.uint8)
            toks = np.asarray(payload, dtype=np.int64).reshape(-1)
            if toks.size != n:
                raise BadLength(f"{toks.size} tokens for {n} pages")
        S = self._state()
        start = 0
        while True:
            code, start = K.k_write(S, lpas, rows, toks, pol, fid, foff, start)
            if code == ERR_LOG_FULL:
                self._drain()
                continue
            self._drain()
            if code == OK:
                return
            self._raise_for(code, f"write of page {start} of {n}")

    # ----------------------------------------------------------------- reads

    def page_payload(self, ppa, charge=True):
        """Stored content of a physical page, decompressed."""
        n = self.nand
        if n.pst[ppa] == FREE:
            raise ReadFreePage(f"page {ppa:#x} is free")
        if charge:
            self.ctl[C_CLOCK] += self.ctl[C_COST_READ]
            self.ctl[C_READS] += 1
        if not self.keep_data:
            return int(n.tok[ppa])
        clen = int(n.oob[ppa, O_CLEN])
        if clen < 0:
            return n.data[ppa].tobytes()
        return decompress(n.data[ppa, :clen].tobytes(), self.geometry.page_size_bytes)

    def host_read(self, lpa):
        if not 0 <= lpa < self.logical_pages or self.ftl[lpa] < 0:
            raise UnmappedLpa(f"LPA {lpa} is not mapped")
        self.ctl[C_HOST_READS] += 1
        return self.page_payload(int(self.ftl[lpa]))

    def read_request(self, lpas):
        """READ command over several LPAs."""
        return [self.host_read(int(l)) for l in lpas]

    # ---------------------------------------------------------------- chains

    def chain_ppas(self, lpa):
        if not 0 <= lpa < self.logical_pages or self.ftl[lpa] < 0:
            raise UnmappedLpa(f"LPA {lpa} is not mapped")
        n = self.nand
        out = np.empty(64, dtype=np.int64)
        while True:
            got = K.k_chain(n.pst, n.oob, self.ftl, lpa, out)
            if got == -2:
                out = np.empty(out.size * 4, dtype=np.int64)
                continue
            if got < 0:
                raise BrokenChain(f"chain of LPA {lpa} reaches a free or foreign page")
            return out[:got]

    def chain_walk(self, lpa):
        """Version chain of ``lpa`` newest first; dead_at is the next-newer entry's wt."""
        n = self.nand
        ppb = self.geometry.pages_per_block
        nvb = self.geometry.valid_zone_blocks
        entries = []
        dead = INF
        for ppa in self.chain_ppas(lpa).tolist():
            row = n.oob[ppa]
            wt = int(row[O_WT])
            zone = Zone.VALID if ppa // ppb < nvb else Zone.OV
            entries.append(VersionChainEntry(ppa, wt, dead, OobRecord.from_row(row), zone))
            dead = wt
        return entries

    def keep_now(self, ppa, cur_time=None):
        """The firmware's own preservation verdict for a stored old version."""
        cur = self.now() if cur_time is None else int(cur_time)
        return bool(K.page_keep(self.nand.oob, self.policies.table, int(ppa), cur))

    # -------------------------------------------------------------------- GC

    def gc_run(self, victim=None):
        code = K.k_gc(self._state(), -1 if victim is None else int(victim))
        if code == ERR_LOG_FULL:
            self._drain()
            code = K.k_gc(self._state(), -1 if victim is None else int(victim))
        reports = self._drain()
        if code == ERR_NO_VICTIM:
            raise NoVictim("no ValidZone block has reclaimable pages")
        if code != OK:
            self._raise_for(code, "gc")
        return reports[-1]

    def ov_reclaim(self, cur_time=None):
        cur = self.now() if cur_time is None else int(cur_time)
        return int(K.k_reclaim(self._state(), cur))

    def settle(self):
        """Idle-time cleanup: collect every ValidZone block holding old versions, then reclaim."""
        blk = self.nand.blk
        nvb = self.geometry.valid_zone_blocks
        for b in np.flatnonzero(blk[:nvb, B_NOV] > 0).tolist():
            if blk[b, B_NOV] > 0:
                self.gc_run(b)
        return self.ov_reclaim()

    # -------------------------------------------------------------- policies

    def apply_policy_request(self, sealed):
        if self.command_log is not None:
            self.command_log.append(("POLICY_REQ", sealed.to_wire()))
        return self.policies.apply_policy_request(sealed, self.now())

    def register_file(self, policy_id, file_id, name_digest):
        if self.command_log is not None:
            self.command_log.append(("FILE_REGISTER", policy_id, file_id, bytes(name_digest)))
        self.policies.register_file(policy_id, file_id, name_digest, self.now())

    def lookup_policy(self, policy_id):
        return self.policies.lookup_policy(policy_id)

    def export_metadata(self):
        return self.policies.export_metadata()

    # ------------------------------------------------------------ bulk setup

    def precondition_invalid(self, free_blocks=None):
        """Fill the ValidZone with Invalid pages, leaving ``free_blocks`` erased blocks.

        Mirrors a drive whose every page has been written and trimmed.  Only
        allowed on an empty device.
        """
        n = self.nand
        g = self.geometry
        if (n.pst != FREE).any():
            raise ValueError("precondition needs an empty device")
        keep_free = int(self.ctl[K.C_GC_THRESHOLD]) if free_blocks is None else free_blocks
        nblk = g.valid_zone_blocks - keep_free
        npg = nblk * g.pages_per_block
        now = self.now()
        n.pst[:npg] = INVALID
        n.oob[:npg, O_LPA] = -1
        n.oob[:npg, O_WT] = now
        n.blk[:nblk, B_WP] = g.pages_per_block
        n.blk[:nblk, B_NINVALID] = g.pages_per_block
        self.ctl[C_NFREE] = keep_free
        self.ctl[C_PROGRAMS] += npg

    # ----------------------------------------------------------------- stats

    def ov_page_count(self):
        return int(np.count_nonzero(self.nand.pst == OLD))

    def stats(self):
        c = self.ctl
        counts = np.bincount(self.nand.pst, minlength=4)
        bi, bo = int(c[C_BYTES_IN]), int(c[C_BYTES_OUT])
        return {
            "now": int(c[C_CLOCK]),
            "free_pages": int(counts[FREE]),
            "valid_pages": int(counts[VALID]),
            "invalid_pages": int(counts[INVALID]),
            "ov_pages": int(counts[OLD]),
            "free_valid_blocks": int(c[C_NFREE]),
            "free_ov_blocks": int(c[C_NFREE_OV]),
            "frontier": int(c[C_FRONTIER]),
            "reads": int(c[C_READS]),
            "programs": int(c[C_PROGRAMS]),
            "erases": int(c[C_ERASES]),
            "host_writes": int(c[C_HOST_WRITES]),
            "host_reads": int(c[C_HOST_READS]),
            "gc_runs": int(c[C_GC_RUNS]),
            "gc_copies": int(c[C_GC_COPIES]),
            "gc_dropped": int(c[C_GC_DROPPED]),
            "ov_preserved": int(c[C_OV_PRESERVED]),
            "ov_discarded": int(c[C_OV_DISCARDED]),
            "ov_blocks_reclaimed": int(c[C_RECLAIMED]),
            "unknown_policy_writes": int(c[C_UNKNOWN_POLICY]),
            "compression_ratio": (bo / bi) if bi else None,
            "halted": bool(c[C_HALTED]),
            "policies": len(self.policies.policies),
            "registry": len(self.policies.registry),
        }

    def state_digest(self):
        """SHA-256 of the canonical image; stale bytes in Free pages do not count."""
        from .image import dump_image

        return hashlib.sha256(dump_image(self)).hexdigest()

def _payload_bytes(payload):
    if isinstance(payload, (bytes, bytearray, memoryview)):
        return bytes(payload)
    return np.asarray(payload, dtype=np.int64).tobytes()

