"""NAND flash model: geometry, pages with OOB records, program/read/erase.

All device state lives in flat numpy arrays so the hot paths can run as
compiled kernels (see ``_jit``).  The layout constants below index those
arrays; the ``Nand`` class is the Python-facing wrapper.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ._jit import kernel, pick
from .errors import BadLength, ProgramOnNonFreePage, ReadFreePage, ZoneFull
from .simtime import INF, MS, US

# page states
FREE = 0
VALID = 1
INVALID = 2
OLD = 3

# OOB columns; DEAD and CLEN belong to the firmware's version index, not the
# host-visible OOB record, but live alongside it per page
O_LPA = 0
O_WT = 1
O_BP = 2
O_POL = 3
O_FID = 4
O_FOFF = 5
O_DEAD = 6
O_CLEN = 7
N_OOB = 8

# block columns
B_WP = 0
B_NVALID = 1
B_NINVALID = 2
B_NOV = 3
B_ERASES = 4
B_BUCKET = 5
N_BLK = 6

# register file (ctl)
C_CLOCK = 0
C_COST_READ = 1
C_COST_PROG = 2
C_COST_ERASE = 3
C_PPB = 4
C_PS = 5
C_NB = 6
C_NVB = 7          # ValidZone blocks (block ids [0, NVB))
C_NLOG = 8         # exported logical pages
C_FRONTIER = 9     # open ValidZone block or -1
C_NFREE = 10       # erased ValidZone blocks, frontier excluded
C_NFREE_OV = 11    # erased, unlabeled OvZone blocks
C_GC_THRESHOLD = 12
C_VERSIONING = 13
C_HALTED = 14
C_KEEP_DATA = 15
C_OV_HINT = 16     # last OvZone block allocated from
C_READS = 17
C_PROGRAMS = 18
C_ERASES = 19
C_HOST_WRITES = 20
C_HOST_READS = 21
C_GC_RUNS = 22
C_GC_COPIES = 23
C_GC_DROPPED = 24
C_OV_PRESERVED = 25
C_OV_DISCARDED = 26
C_BYTES_IN = 27
C_BYTES_OUT = 28
C_RECLAIMED = 29
C_UNKNOWN_POLICY = 30
C_GCLOG_N = 31
C_DECLOG_N = 32
C_GC_SEQ = 33
N_CTL = 40

OK = 0
ERR_PROGRAM_NONFREE = 1
ERR_ZONE_FULL = 2
ERR_OV_FULL = 3
ERR_NO_VICTIM = 4
ERR_LOG_FULL = 5
ERR_BROKEN_CHAIN = 6


class PageState(IntEnum):
    FREE = FREE
    VALID = VALID
    INVALID = INVALID
    OLD_VERSION = OLD


class Zone(IntEnum):
    VALID = 0
    OV = 1


@dataclass(frozen=True)
class NandGeometry:
    page_size_bytes: int = 4096
    pages_per_block: int = 128
    blocks_total: int = 2048
    ov_zone_blocks: int = 512

    def __post_init__(self):
        for name in ("page_size_bytes", "pages_per_block", "blocks_total", "ov_zone_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ov_zone_blocks >= self.blocks_total:
            raise ValueError("ov_zone_blocks must be smaller than blocks_total")
        ps = self.page_size_bytes
        if ps & (ps - 1):
            raise ValueError("page_size_bytes must be a power of two")

    @property
    def valid_zone_blocks(self):
        return self.blocks_total - self.ov_zone_blocks

    @property
    def total_pages(self):
        return self.blocks_total * self.pages_per_block


@dataclass(frozen=True)
class NandCosts:
    read: int = 50 * US
    program: int = 200 * US
    erase: int = 2 * MS


@dataclass(frozen=True)
class OobRecord:
    lpa: int
    wt: int
    bp: int | None = None
    policy_id: int | None = None
    file_id: int | None = None
    file_offset: int | None = None

    def __post_init__(self):
        tagged = [self.policy_id is None, self.file_id is None, self.file_offset is None]
        if any(tagged) and not all(tagged):
            raise ValueError("policy_id, file_id and file_offset are all set or all None")

    @property
    def versioned(self):
        return self.policy_id is not None

    @classmethod
    def from_row(cls, row):
        def opt(v):
            return None if v < 0 else int(v)

        return cls(int(row[O_LPA]), int(row[O_WT]), opt(row[O_BP]),
                   opt(row[O_POL]), opt(row[O_FID]), opt(row[O_FOFF]))


@dataclass(frozen=True)
class BlockInfo:
    block_id: int
    zone: Zone
    write_pointer: int
    states: tuple
    erase_count: int
    bucket: int | None


# ---------------------------------------------------------------- kernels


@kernel
def count_state(blk, b, state, delta):
    if state == VALID:
        blk[b, B_NVALID] += delta
    elif state == INVALID:
        blk[b, B_NINVALID] += delta
    elif state == OLD:
        blk[b, B_NOV] += delta


@kernel
def k_program(pst, oob, blk, ctl, ppa, state, lpa, wt, bp, pol, fid, foff, dead, clen):
    if pst[ppa] != FREE:
        return ERR_PROGRAM_NONFREE
    ppb = ctl[C_PPB]
    b = ppa // ppb
    off = ppa - b * ppb
    if blk[b, B_WP] == 0 and b < ctl[C_NVB] and b != ctl[C_FRONTIER]:
        ctl[C_NFREE] -= 1
    if blk[b, B_WP] == 0 and b >= ctl[C_NVB] and blk[b, B_BUCKET] < 0:
        ctl[C_NFREE_OV] -= 1
    if off + 1 > blk[b, B_WP]:
        blk[b, B_WP] = off + 1
    oob[ppa, O_LPA] = lpa
    oob[ppa, O_WT] = wt
    oob[ppa, O_BP] = bp
    oob[ppa, O_POL] = pol
    oob[ppa, O_FID] = fid
    oob[ppa, O_FOFF] = foff
    oob[ppa, O_DEAD] = dead
    oob[ppa, O_CLEN] = clen
    pst[ppa] = state
    count_state(blk, b, state, 1)
    ctl[C_CLOCK] += ctl[C_COST_PROG]
    ctl[C_PROGRAMS] += 1
    return OK


@kernel
def k_set_state(pst, blk, ctl, ppa, state):
    b = ppa // ctl[C_PPB]
    count_state(blk, b, pst[ppa], -1)
    pst[ppa] = state
    count_state(blk, b, state, 1)


@kernel
def k_erase(pst, oob, blk, ctl, b):
    ppb = ctl[C_PPB]
    was_free_valid = b < ctl[C_NVB] and blk[b, B_WP] == 0 and b != ctl[C_FRONTIER]
    was_free_ov = b >= ctl[C_NVB] and blk[b, B_WP] == 0 and blk[b, B_BUCKET] < 0
    base = b * ppb
    for i in range(ppb):
        pst[base + i] = FREE
        for j in range(N_OOB):
            oob[base + i, j] = -1
    blk[b, B_WP] = 0
    blk[b, B_NVALID] = 0
    blk[b, B_NINVALID] = 0
    blk[b, B_NOV] = 0
    blk[b, B_BUCKET] = -1
    blk[b, B_ERASES] += 1
    if b < ctl[C_NVB]:
        if b != ctl[C_FRONTIER] and not was_free_valid:
            ctl[C_NFREE] += 1
    elif not was_free_ov:
        ctl[C_NFREE_OV] += 1
    ctl[C_CLOCK] += ctl[C_COST_ERASE]
    ctl[C_ERASES] += 1


def _lowest_free_valid_loop(blk, ctl):
    f = ctl[C_FRONTIER]
    for b in range(ctl[C_NVB]):
        if blk[b, B_WP] == 0 and b != f:
            return b
    return -1


def _lowest_free_valid_np(blk, ctl):
    cand = np.flatnonzero(blk[: ctl[C_NVB], B_WP] == 0)
    cand = cand[cand != ctl[C_FRONTIER]]
    return int(cand[0]) if cand.size else -1


lowest_free_valid = pick(kernel(_lowest_free_valid_loop), _lowest_free_valid_np)


def _lowest_free_ov_loop(blk, ctl):
    for b in range(ctl[C_NVB], ctl[C_NB]):
        if blk[b, B_WP] == 0 and blk[b, B_BUCKET] < 0:
            return b
    return -1


def _lowest_free_ov_np(blk, ctl):
    nvb = ctl[C_NVB]
    cand = np.flatnonzero((blk[nvb:, B_WP] == 0) & (blk[nvb:, B_BUCKET] < 0))
    return int(cand[0]) + nvb if cand.size else -1


lowest_free_ov = pick(kernel(_lowest_free_ov_loop), _lowest_free_ov_np)


def _open_ov_block_loop(blk, ctl, bucket):
    ppb = ctl[C_PPB]
    h = ctl[C_OV_HINT]
    if h >= 0 and blk[h, B_BUCKET] == bucket and blk[h, B_WP] < ppb:
        return h
    for b in range(ctl[C_NVB], ctl[C_NB]):
        if blk[b, B_BUCKET] == bucket and blk[b, B_WP] < ppb:
            return b
    return -1


def _open_ov_block_np(blk, ctl, bucket):
    ppb = ctl[C_PPB]
    h = ctl[C_OV_HINT]
    if h >= 0 and blk[h, B_BUCKET] == bucket and blk[h, B_WP] < ppb:
        return h
    nvb = ctl[C_NVB]
    cand = np.flatnonzero((blk[nvb:, B_BUCKET] == bucket) & (blk[nvb:, B_WP] < ppb))
    return int(cand[0]) + nvb if cand.size else -1


open_ov_block = pick(kernel(_open_ov_block_loop), _open_ov_block_np)


@kernel
def k_alloc_valid(blk, ctl):
    """Next sequential page of the ValidZone frontier; -1 when the zone is full."""
    ppb = ctl[C_PPB]
    f = ctl[C_FRONTIER]
    if f < 0 or blk[f, B_WP] >= ppb:
        nb = lowest_free_valid(blk, ctl)
        if nb < 0:
            return -1
        ctl[C_FRONTIER] = nb
        ctl[C_NFREE] -= 1
        f = nb
    return f * ppb + blk[f, B_WP]


@kernel
def k_alloc_ov(blk, ctl, bucket):
    """Next page of the OvZone block collecting ``bucket``; -1 when none can be opened."""
    ppb = ctl[C_PPB]
    b = open_ov_block(blk, ctl, bucket)
    if b < 0:
        b = lowest_free_ov(blk, ctl)
        if b < 0:
            return -1
        blk[b, B_BUCKET] = bucket
        ctl[C_NFREE_OV] -= 1
    ctl[C_OV_HINT] = b
    return b * ppb + blk[b, B_WP]


@kernel
def k_close_frontier(blk, ctl):
    f = ctl[C_FRONTIER]
    if f >= 0:
        ctl[C_FRONTIER] = -1
        if blk[f, B_WP] == 0:
            ctl[C_NFREE] += 1


# ---------------------------------------------------------------- wrapper


def new_ctl(geometry, costs, logical_pages, gc_threshold, versioning, keep_data):
    ctl = np.zeros(N_CTL, dtype=np.int64)
    ctl[C_COST_READ] = costs.read
    ctl[C_COST_PROG] = costs.program
    ctl[C_COST_ERASE] = costs.erase
    ctl[C_PPB] = geometry.pages_per_block
    ctl[C_PS] = geometry.page_size_bytes
    ctl[C_NB] = geometry.blocks_total
    ctl[C_NVB] = geometry.valid_zone_blocks
    ctl[C_NLOG] = logical_pages
    ctl[C_FRONTIER] = -1
    ctl[C_NFREE] = geometry.valid_zone_blocks
    ctl[C_NFREE_OV] = geometry.ov_zone_blocks
    ctl[C_GC_THRESHOLD] = gc_threshold
    ctl[C_VERSIONING] = 1 if versioning else 0
    ctl[C_KEEP_DATA] = 1 if keep_data else 0
    ctl[C_OV_HINT] = -1
    return ctl


class Nand:
    """NAND array with page-granular program/read and block-granular erase.

    ``keep_data=False`` stores a 64-bit content token per page instead of the
    page bytes; large benchmark partitions use it to stay within memory.
    """

    def __init__(self, geometry=None, costs=None, keep_data=True, ctl=None):
        self.geometry = geometry or NandGeometry()
        self.costs = costs or NandCosts()
        g = self.geometry
        n = g.total_pages
        self.keep_data = keep_data
        self.pst = np.zeros(n, dtype=np.uint8)
        self.oob = np.full((n, N_OOB), -1, dtype=np.int64)
        self.tok = np.zeros(n, dtype=np.int64)
        rows = n if keep_data else 0
        self.data = np.zeros((rows, g.page_size_bytes), dtype=np.uint8)
        self.blk = np.zeros((g.blocks_total, N_BLK), dtype=np.int64)
        self.blk[:, B_BUCKET] = -1
        if ctl is None:
            ctl = new_ctl(g, self.costs, 0, 2, True, keep_data)
        self.ctl = ctl

    # -- helpers

    @property
    def now(self):
        return int(self.ctl[C_CLOCK])

    def zone_of(self, block_id):
        return Zone.VALID if block_id < self.geometry.valid_zone_blocks else Zone.OV

    def _check_ppa(self, ppa):
        if not 0 <= ppa < self.geometry.total_pages:
            raise IndexError(f"ppa {ppa} out of range")

    def page_state(self, ppa):
        self._check_ppa(ppa)
        return PageState(int(self.pst[ppa]))

    def oob_record(self, ppa):
        if self.pst[ppa] == FREE:
            raise ReadFreePage(f"page {ppa:#x} is free")
        return OobRecord.from_row(self.oob[ppa])

    def state_counts(self):
        counts = np.bincount(self.pst, minlength=4)
        return {s: int(counts[s]) for s in PageState}

    def block_info(self, block_id):
        g = self.geometry
        base = block_id * g.pages_per_block
        row = self.blk[block_id]
        states = tuple(PageState(int(s)) for s in self.pst[base: base + g.pages_per_block])
        bucket = int(row[B_BUCKET])
        return BlockInfo(block_id, self.zone_of(block_id), int(row[B_WP]), states,
                         int(row[B_ERASES]), None if bucket < 0 else bucket)

    # -- operations

    def program_page(self, ppa, data, oob):
        """Program a Free page.  OvZone pages are programmed as OldVersion."""
        self._check_ppa(ppa)
        g = self.geometry
        if self.keep_data:
            buf = np.frombuffer(bytes(data), dtype=np.uint8)
            if buf.size != g.page_size_bytes:
                raise BadLength(f"expected {g.page_size_bytes} bytes, got {buf.size}")
        elif not isinstance(data, (int, np.integer)):
            raise BadLength("token-mode NAND takes an integer content token")
        if self.pst[ppa] != FREE:
            raise ProgramOnNonFreePage(f"page {ppa:#x} already programmed")
        state = OLD if self.zone_of(ppa // g.pages_per_block) == Zone.OV else VALID

        def nz(v):
            return -1 if v is None else int(v)

        bp = nz(oob.bp)
        code = k_program(self.pst, self.oob, self.blk, self.ctl, ppa, state, int(oob.lpa), int(oob.wt),
                         bp, nz(oob.policy_id), nz(oob.file_id), nz(oob.file_offset), INF, -1)
        assert code == 0
        if self.keep_data:
            self.data[ppa] = buf
        else:
            self.tok[ppa] = int(data)

    def read_page(self, ppa):
        """Return ``(data, OobRecord)``; token-mode pages return the token."""
        self._check_ppa(ppa)
        if self.pst[ppa] == FREE:
            raise ReadFreePage(f"page {ppa:#x} is free")
        self.ctl[C_CLOCK] += self.ctl[C_COST_READ]
        self.ctl[C_READS] += 1
        payload = self.data[ppa].tobytes() if self.keep_data else int(self.tok[ppa])
        return payload, OobRecord.from_row(self.oob[ppa])

    def erase_block(self, block_id):
        if not 0 <= block_id < self.geometry.blocks_total:
            raise IndexError(f"block {block_id} out of range")
        k_erase(self.pst, self.oob, self.blk, self.ctl, block_id)

    def allocate_free_page(self, zone, bucket=None):
        zone = Zone(zone)
        if zone == Zone.VALID:
            ppa = k_alloc_valid(self.blk, self.ctl)
        else:
            if bucket is None:
                raise ValueError("OvZone allocation needs an expiration bucket")
            ppa = k_alloc_ov(self.blk, self.ctl, int(bucket))
        if ppa < 0:
            raise ZoneFull(f"{zone.name} zone has no free page")
        return int(ppa)
