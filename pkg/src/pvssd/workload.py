"""Synthetic workloads, the delayed-attack scenario, trace replay and CSV reports."""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .device import Device
from .errors import NothingAtTime, OvZoneFullStop, TraceParseError
from .host import HostShim
from .nand import (
    C_CLOCK, C_GC_COPIES, C_GC_RUNS, C_HOST_WRITES, C_OV_PRESERVED, O_LPA, OLD, NandGeometry,
)
from .recovery import fast_recover, reconstruct
from .simtime import DAY, HOUR, at, parse_duration

GIB = 1 << 30
PAGE = 4096
PPB = 128
BASE_TIME = at(2024, 3, 1)
VERSIONED_RULE = "/v/*"

FILE_PAGES = {"big": (20 << 20) // PAGE, "small": (32 << 10) // PAGE, "smallmany": 1}
CSV_HEADER = ["capacity_ratio", "versioning_ratio", "workload", "mb_per_s", "write_amp",
              "gc_runs", "ov_pages"]


def desk_geometry(partition_pages=GIB // PAGE, rounds=1, page_size=PAGE, ppb=PPB):
    """Geometry whose exported capacity covers the partition, with an OV zone
    large enough for ``rounds`` full overwrites of it."""
    valid_blocks = math.ceil(partition_pages / 0.9 / ppb)
    # tiny partitions also need room for the GC reserve beyond the exported 90%
    while (int(valid_blocks * ppb * 0.9) < partition_pages
           or int(valid_blocks * ppb * 0.9) > (valid_blocks - 3) * ppb):
        valid_blocks += 1
    ov_blocks = max(1, math.ceil(rounds * partition_pages / ppb))
    return NandGeometry(page_size, ppb, valid_blocks + ov_blocks, ov_blocks)


def pattern_tokens(seed, n):
    """Deterministic non-zero 62-bit content tokens (splitmix64 over ``seed + i``)."""
    x = (np.uint64(seed) + np.arange(1, n + 1, dtype=np.uint64)) * np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(2)).astype(np.int64) | 1


def pattern_bytes(seed, length):
    return np.random.default_rng(seed).bytes(length)


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "big"
    capacity_ratio: float = 0.5
    versioning_ratio: float = 0.0
    rt: int = 3 * DAY
    rounds: int = 1
    seed: int = 0
    partition_pages: int = GIB // PAGE

    def __post_init__(self):
        if self.kind not in FILE_PAGES:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        for name in ("capacity_ratio", "versioning_ratio"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ThroughputReport:
    workload: str = ""
    capacity_ratio: float = 0.0
    versioning_ratio: float = 0.0
    bytes_written: int = 0
    elapsed: int = 0
    host_pages: int = 0
    gc_runs: int = 0
    gc_copies: int = 0
    ov_copies: int = 0
    ov_pages_live: int = 0
    stopped_early: bool = False

    @property
    def mb_per_s(self):
        if self.elapsed <= 0:
            return 0.0
        return self.bytes_written / 1e6 / (self.elapsed / 1e6)

    @property
    def write_amplification(self):
        if self.host_pages == 0:
            return 1.0
        return (self.host_pages + self.gc_copies + self.ov_copies) / self.host_pages


class _Mark:
    def __init__(self, dev):
        c = dev.ctl
        self.host = int(c[C_HOST_WRITES])
        self.gc = int(c[C_GC_RUNS])
        self.copies = int(c[C_GC_COPIES])
        self.ov = int(c[C_OV_PRESERVED])
        self.clock = int(c[C_CLOCK])


def _report_since(dev, mark, base, stopped=False):
    m = _Mark(dev)
    host = m.host - mark.host
    return ThroughputReport(
        workload=base.get("workload", ""),
        capacity_ratio=base.get("capacity_ratio", 0.0),
        versioning_ratio=base.get("versioning_ratio", 0.0),
        bytes_written=host * dev.geometry.page_size_bytes,
        elapsed=m.clock - mark.clock,
        host_pages=host,
        gc_runs=m.gc - mark.gc,
        gc_copies=m.copies - mark.copies,
        ov_copies=m.ov - mark.ov,
        ov_pages_live=int(np.count_nonzero(dev.nand.pst == OLD)),
        stopped_early=stopped,
    )


class TraceWriter:
    """Line-delimited JSON trace sink."""

    def __init__(self, fp):
        self.fp = fp

    def __call__(self, rec):
        self.fp.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def _device_record(dev):
    g = dev.geometry
    return {"t": dev.now(), "op": "DEVICE", "page_size": g.page_size_bytes,
            "pages_per_block": g.pages_per_block, "blocks": g.blocks_total,
            "ov_blocks": g.ov_zone_blocks, "logical_pages": dev.logical_pages,
            "keep_data": dev.keep_data, "versioning": dev.versioning}


def make_workload_device(spec, versioning=True, history=False):
    geom = desk_geometry(spec.partition_pages, spec.rounds)
    return Device(geom, keep_data=False, versioning=versioning, start_time=BASE_TIME,
                  history=history)


def run_workload(spec, device=None, versioning=True, trace=None):
    """Prefill ``capacity_ratio`` of the partition, then overwrite every file ``rounds`` times.

    The report covers the overwrite phase only.
    """
    dev = device or make_workload_device(spec, versioning)
    emit = trace or (lambda rec: None)
    emit(_device_record(dev))
    shim = HostShim(dev)
    dev.precondition_invalid()
    emit({"t": dev.now(), "op": "PRECONDITION"})
    cmd = f"PolicyCreate {{FileRule={VERSIONED_RULE}}} {{RT={spec.rt // 1_000_000}s}}"
    emit({"t": dev.now(), "op": "POLICY", "cmd": cmd})
    shim.spm_submit(cmd)

    fpages = FILE_PAGES[spec.kind]
    nfiles = int(spec.capacity_ratio * spec.partition_pages) // fpages
    rng = np.random.default_rng(spec.seed)
    versioned = np.zeros(nfiles, dtype=bool)
    versioned[rng.permutation(nfiles)[: int(round(spec.versioning_ratio * nfiles))]] = True
    names = [f"/{'v' if v else 'u'}/f{i:06d}" for i, v in enumerate(versioned.tolist())]
    base = {"workload": spec.kind, "capacity_ratio": spec.capacity_ratio,
            "versioning_ratio": spec.versioning_ratio}
    nbytes = fpages * dev.geometry.page_size_bytes

    def write(name, seed):
        emit({"t": dev.now(), "op": "WRITE", "file": name, "offset": 0, "len": nbytes,
              "seed": seed})
        h = shim.open(name)
        shim.write_tokens(h, 0, pattern_tokens(seed, fpages))
        shim.close(h)

    seeds = rng.integers(0, 1 << 62, size=(spec.rounds + 1, nfiles))
    for i, name in enumerate(names):
        write(name, int(seeds[0, i]))
    emit({"t": dev.now(), "op": "MARK"})
    mark = _Mark(dev)
    try:
        for r in range(spec.rounds):
            for i in rng.permutation(nfiles).tolist():
                write(names[i], int(seeds[r + 1, i]))
    except OvZoneFullStop:
        return _report_since(dev, mark, base, stopped=True)
    return _report_since(dev, mark, base)


# ------------------------------------------------------------ trace replay


def parse_trace(lines):
    recs = []
    last_t = None
    for no, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"bad JSON: {exc.msg}", no) from None
        if not isinstance(rec, dict) or "op" not in rec:
            raise TraceParseError("record without op", no)
        t = rec.get("t")
        if t is not None:
            if not isinstance(t, int):
                raise TraceParseError("t must be an integer tick count", no)
            if last_t is not None and t < last_t:
                raise TraceParseError(f"timestamp {t} precedes {last_t}", no)
            last_t = t
        if rec["op"] == "WRITE":
            for k in ("file", "offset", "len", "seed"):
                if k not in rec:
                    raise TraceParseError(f"WRITE record lacks {k!r}", no)
        rec["_line"] = no
        recs.append(rec)
    return recs


def replay_trace(path, device=None):
    """Execute a JSONL trace; the report starts at the MARK record if there is one."""
    with open(path) as f:
        recs = parse_trace(f)
    dev = device
    shim = None
    mark = None
    base = {}
    stopped = False
    for rec in recs:
        op = rec["op"]
        if op == "DEVICE":
            if dev is None:
                geom = NandGeometry(rec["page_size"], rec["pages_per_block"], rec["blocks"],
                                    rec["ov_blocks"])
                dev = Device(geom, keep_data=rec["keep_data"], versioning=rec["versioning"],
                             logical_pages=rec["logical_pages"], start_time=rec["t"],
                             history=False)
            continue
        if dev is None:
            dev = Device(desk_geometry(), keep_data=False, start_time=rec.get("t", 0) or 0,
                         history=False)
        if shim is None:
            shim = HostShim(dev)
        if "t" in rec and rec["t"] > dev.now():
            dev.set_time(rec["t"])
        try:
            if op == "TIME_SET":
                pass
            elif op == "PRECONDITION":
                dev.precondition_invalid()
            elif op == "POLICY":
                shim.spm_submit(rec["cmd"])
            elif op == "MARK":
                mark = _Mark(dev)
            elif op == "WRITE":
                h = shim.open(rec["file"])
                ps = dev.geometry.page_size_bytes
                if dev.keep_data:
                    shim.write(h, rec["offset"], pattern_bytes(rec["seed"], rec["len"]))
                else:
                    if rec["offset"] % ps or rec["len"] % ps:
                        raise TraceParseError("token-mode writes must be page aligned",
                                              rec["_line"])
                    shim.write_tokens(h, rec["offset"] // ps,
                                      pattern_tokens(rec["seed"], rec["len"] // ps))
                shim.close(h)
            elif op == "DELETE":
                shim.delete(rec["file"])
            else:
                raise TraceParseError(f"unknown op {op!r}", rec["_line"])
        except OvZoneFullStop:
            stopped = True
            break
    if dev is None:
        return ThroughputReport()
    return _report_since(dev, mark or _ZERO, base, stopped)


class _ZeroMark:
    host = gc = copies = ov = clock = 0


_ZERO = _ZeroMark()


# ------------------------------------------------------------------ reports


def report_rows(reports):
    rows = []
    for r in reports:
        rows.append([f"{r.capacity_ratio:g}", f"{r.versioning_ratio:g}", r.workload,
                     f"{r.mb_per_s:.6f}", f"{r.write_amplification:.6f}", str(r.gc_runs),
                     str(r.ov_pages_live)])
    return rows


def emit_report(reports, path):
    if isinstance(reports, ThroughputReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report_rows(reports))
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def sweep(kinds=("big", "small"), capacities=(0.25, 0.5, 0.75),
          versionings=(0.0, 0.25, 0.5, 0.75, 1.0), seeds=(0, 1, 2), partition_pages=GIB // PAGE,
          progress=None):
    out = []
    for kind in kinds:
        for cap in capacities:
            for ver in versionings:
                for seed in seeds:
                    spec = WorkloadSpec(kind, cap, ver, seed=seed, partition_pages=partition_pages)
                    rep = run_workload(spec)
                    out.append((spec, rep))
                    if progress:
                        progress(spec, rep)
    return out


# ------------------------------------------------------------------ scenario


@dataclass
class ScenarioReport:
    mode: str
    rt_secure: int
    dwell: int
    recovered: dict = field(default_factory=dict)
    ov_at_attack: dict = field(default_factory=dict)
    ov_at_detection: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def _ov_count(dev, shim, name):
    lbas = set(shim.lba_list(name))
    old = np.flatnonzero(dev.nand.pst == OLD)
    return int(sum(1 for p in old.tolist() if int(dev.nand.oob[p, O_LPA]) in lbas))


def scenario_delayed_attack(rt_secure=5 * DAY, dwell=4 * DAY, mode="policy", seed=7,
                            geometry=None):
    """Two one-page files, a versioned ``secure.txt`` and an unversioned ``temp.txt``.

    Day 1 create, day 2 update, day 4 the malware encrypts both, detection after
    ``dwell``; then recovery to day 3 is attempted for both files.  ``mode="full"``
    versions every file with a uniform three-day retention instead.
    """
    if isinstance(rt_secure, str):
        rt_secure = parse_duration(rt_secure)
    if isinstance(dwell, str):
        dwell = parse_duration(dwell)
    geom = geometry or NandGeometry(PAGE, 16, 64, 16)
    dev = Device(geom, start_time=BASE_TIME + 9 * HOUR)
    shim = HostShim(dev)
    if mode == "full":
        shim.spm_submit("PolicyCreate {FileRule=*} {RT=3days}")
    elif mode == "policy":
        if rt_secure > 0:
            shim.spm_submit(f"PolicyCreate {{FileRule=secure.txt}} {{RT={rt_secure // 1_000_000}s}}")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    files = ("secure.txt", "temp.txt")
    ps = geom.page_size_bytes
    versions = {f: [] for f in files}

    def put(tag):
        for k, name in enumerate(files):
            data = pattern_bytes(seed * 1000 + tag * 10 + k, ps)
            versions[name].append(data)
            shim.write_file(name, data)

    day = BASE_TIME + 9 * HOUR
    put(1)
    dev.set_time(day + 1 * DAY)
    put(2)
    attack = day + 3 * DAY
    dev.set_time(attack)
    put(3)
    rep = ScenarioReport(mode, rt_secure, dwell)
    rep.ov_at_attack = {f: _ov_count(dev, shim, f) for f in files}
    dev.set_time(attack + dwell)
    dev.settle()
    rep.ov_at_detection = {f: _ov_count(dev, shim, f) for f in files}
    target = day + 2 * DAY
    for name in files:
        fid = shim.pm.file_ids.get(name)
        ok = False
        if fid is not None:
            try:
                pages = fast_recover(dev, fid, target, shim.lba_list(name))
                ok = reconstruct(pages, ps, ps) == versions[name][1]
            except NothingAtTime:
                ok = False
        rep.recovered[name] = ok
    return rep
