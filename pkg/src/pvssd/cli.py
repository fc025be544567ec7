"""``sim`` command line.

Device state persists in an image file (``--image`` or ``$SIM_IMAGE``) with
the host-side file table kept in a ``<image>.host.json`` sidecar.
"""

import argparse
import json
import os
import sys
import warnings

from . import image
from .device import DEFAULT_KEY, Device
from .errors import NothingAtTime, SimError
from .host import HostShim
from .nand import NandGeometry
from .policy import PolicyOp, PolicyRequest
from .recovery import RecoveryGapWarning, fast_recover, reconstruct_with_holes, robust_recover
from .simtime import fmt, parse_duration, parse_timestamp
from .workload import (
    BASE_TIME, GIB, PAGE, TraceWriter, WorkloadSpec, desk_geometry, emit_report, pattern_bytes,
    replay_trace, run_workload, scenario_delayed_attack,
)

GEOMETRIES = {
    "default": NandGeometry(),
    "small": NandGeometry(4096, 16, 64, 16),
    "desk": desk_geometry(),
}


def _key():
    hexkey = os.environ.get("SIM_KEY")
    return bytes.fromhex(hexkey) if hexkey else DEFAULT_KEY


def _host_key():
    # the SPM side may hold a different key than the device, e.g. to demo rejection
    hexkey = os.environ.get("SIM_HOST_KEY")
    return bytes.fromhex(hexkey) if hexkey else _key()


def _image_path(args):
    path = args.image or os.environ.get("SIM_IMAGE")
    if not path:
        raise SystemExit("no device image: pass --image or set SIM_IMAGE")
    return path


def _load(args):
    path = _image_path(args)
    dev = image.load(path, key=_key())
    side = path + ".host.json"
    if os.path.exists(side):
        with open(side) as f:
            shim = HostShim.from_json(dev, json.load(f), key=_host_key())
    else:
        shim = HostShim(dev, key=_host_key())
    return path, dev, shim


def _save(path, dev, shim):
    image.save(dev, path)
    with open(path + ".host.json", "w") as f:
        json.dump(shim.to_json(), f, sort_keys=True)


def _geometry(text):
    if text in GEOMETRIES:
        return GEOMETRIES[text]
    try:
        ps, ppb, nb, ov = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"geometry is a preset or PS,PPB,BLOCKS,OV: {text!r}")
    return NandGeometry(ps, ppb, nb, ov)


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _ints(text):
    return tuple(int(x) for x in text.split(","))


# ------------------------------------------------------------------ commands


def cmd_init(args):
    path = _image_path(args)
    start = parse_timestamp(args.start) if args.start else BASE_TIME
    dev = Device(args.geometry, key=_key(), keep_data=not args.token,
                 versioning=not args.plain, start_time=start)
    _save(path, dev, HostShim(dev, key=_host_key()))
    g = dev.geometry
    print(f"initialized {path}: {g.blocks_total} blocks x {g.pages_per_block} pages x "
          f"{g.page_size_bytes} B, {g.ov_zone_blocks} OV blocks, "
          f"{dev.logical_pages} logical pages")


def cmd_policy(args):
    path, dev, shim = _load(args)
    if args.action == "list":
        policies, registry = dev.export_metadata()
        for p in policies:
            rt = "-" if p.rt is None else f"{p.rt // 1_000_000}s"
            bc = "-" if p.bc is None else f"{p.bc // 1_000_000}s"
            print(f"{p.id}\t{p.rule}\tRT={rt}\tBC={bc}")
        print(f"{len(registry)} registered file(s)")
        return 0
    if args.action == "submit":
        req = args.text
    elif args.action == "create":
        req = PolicyRequest(PolicyOp.CREATE, 0, _dur(args.rt), _dur(args.bc), args.rule)
    elif args.action == "change":
        req = PolicyRequest(PolicyOp.CHANGE, args.id, _dur(args.rt), _dur(args.bc))
    else:
        req = PolicyRequest(PolicyOp.DELETE, args.id)
    res = shim.spm_submit(req)
    _save(path, dev, shim)
    print(f"{res.op.name.lower()} policy {res.policy_id}")
    return 0


def _dur(text):
    return None if text is None else parse_duration(text)


def cmd_fs(args):
    path, dev, shim = _load(args)
    if args.action == "ls":
        for name, fid, size, npages in shim.ls():
            print(f"{name}\t{'-' if fid is None else fid}\t{size}\t{npages}")
        return 0
    if args.action == "write":
        data = pattern_bytes(args.pattern, args.len)
        h = shim.open(args.file)
        shim.write(h, args.offset, data)
        shim.close(h)
    elif args.action == "read":
        data = shim.read_file(args.file, args.offset, args.len)
        if args.out:
            with open(args.out, "wb") as f:
                f.write(data)
        else:
            sys.stdout.write(data.hex() + "\n")
    elif args.action == "adopt":
        ids = shim.adopt(args.file)
        print(f"{args.file}: {'unversioned' if ids is None else f'policy {ids[0]} file {ids[1]}'}")
    elif args.action == "rm":
        shim.delete(args.file)
    _save(path, dev, shim)
    return 0


def cmd_time(args):
    path, dev, shim = _load(args)
    if args.action == "set":
        dev.set_time(parse_timestamp(args.value))
    elif args.action == "advance":
        dev.advance(parse_duration(args.value))
    print(fmt(dev.now()))
    if args.action != "show":
        _save(path, dev, shim)
    return 0


def cmd_stats(args):
    _, dev, _ = _load(args)
    print(json.dumps(dev.stats(), indent=2, sort_keys=True))
    return 0


def cmd_dump_image(args):
    _, dev, _ = _load(args)
    blob = image.dump_image(dev)
    if args.out:
        with open(args.out, "wb") as f:
            f.write(blob)
    else:
        sys.stdout.buffer.write(blob)
    return 0


def cmd_recover(args):
    path, dev, shim = _load(args)
    t = parse_timestamp(args.at)
    if args.file.isdigit():
        fid = int(args.file)
        name = next((n for n, i in shim.pm.file_ids.items() if i == fid), None)
    else:
        name = args.file
        fid = shim.pm.file_ids.get(name)
    try:
        if fid is None:
            raise NothingAtTime(f"{args.file} was never versioned")
        if args.robust:
            pages = robust_recover(dev, fid, t)
        else:
            if name is None:
                raise SystemExit("fast recovery needs a file name known to the file table")
            pages = fast_recover(dev, fid, t, shim.lba_list(name))
    except NothingAtTime as exc:
        print(f"nothing to recover: {exc}", file=sys.stderr)
        _save(path, dev, shim)
        return 3
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RecoveryGapWarning)
        data, holes = reconstruct_with_holes(pages, dev.geometry.page_size_bytes)
    with open(args.out, "wb") as f:
        f.write(data)
    _save(path, dev, shim)
    print(f"recovered {len(pages)} page(s) of file {fid} as of {fmt(t)} into {args.out}")
    if holes:
        print(f"zero-filled holes at offsets {holes}", file=sys.stderr)
        return 2
    return 0


def cmd_bench(args):
    partition = args.partition_mib * (1 << 20) // PAGE
    rows = []
    trace_fp = open(args.trace, "w") if args.trace else None
    try:
        for kind in args.kind.split(","):
            for cap in args.cap:
                for ver in args.ver:
                    for seed in args.seed:
                        spec = WorkloadSpec(kind, cap, ver, rounds=args.rounds, seed=seed,
                                            partition_pages=partition)
                        trace = TraceWriter(trace_fp) if trace_fp else None
                        rep = run_workload(spec, versioning=not args.plain, trace=trace)
                        rows.append(rep)
                        flag = " (stopped: OV zone full)" if rep.stopped_early else ""
                        print(f"{kind:9s} cap={cap:<5g} ver={ver:<5g} seed={seed} "
                              f"WA={rep.write_amplification:.4f} MB/s={rep.mb_per_s:.2f} "
                              f"gc={rep.gc_runs} ov={rep.ov_pages_live}{flag}", flush=True)
    finally:
        if trace_fp:
            trace_fp.close()
    if args.csv:
        emit_report(rows, args.csv)
    return 0


def cmd_scenario(args):
    rep = scenario_delayed_attack(parse_duration(args.rt_secure), parse_duration(args.dwell),
                                  mode=args.mode, seed=args.seed)
    if args.json:
        print(json.dumps(rep.to_json(), sort_keys=True))
        return 0
    print(f"mode={rep.mode} rt_secure={args.rt_secure} dwell={args.dwell}")
    for name in rep.recovered:
        print(f"  {name:11s} recovered={'yes' if rep.recovered[name] else 'no':3s} "
              f"ov@attack={rep.ov_at_attack[name]} ov@detection={rep.ov_at_detection[name]}")
    return 0


def cmd_replay(args):
    rep = replay_trace(args.trace)
    print(f"host_pages={rep.host_pages} WA={rep.write_amplification:.4f} "
          f"MB/s={rep.mb_per_s:.2f} gc={rep.gc_runs} ov={rep.ov_pages_live}")
    if args.csv:
        emit_report(rep, args.csv)
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="sim", description="Policy-based versioning SSD simulator")
    p.add_argument("--image", help="device image path (default $SIM_IMAGE)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create a fresh device image")
    s.add_argument("--geometry", type=_geometry, default=GEOMETRIES["small"],
                   help="default | small | desk | PS,PPB,BLOCKS,OV (default: small)")
    s.add_argument("--start", help="initial clock (ISO-8601 or epoch seconds)")
    s.add_argument("--token", action="store_true", help="store content tokens, not page bytes")
    s.add_argument("--plain", action="store_true", help="plain FTL, versioning disabled")
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("policy", help="authenticated policy management")
    ps = s.add_subparsers(dest="action", required=True)
    c = ps.add_parser("create")
    c.add_argument("--rule", required=True)
    c.add_argument("--rt")
    c.add_argument("--bc")
    c = ps.add_parser("change")
    c.add_argument("--id", type=int, required=True)
    c.add_argument("--rt")
    c.add_argument("--bc")
    c = ps.add_parser("delete")
    c.add_argument("--id", type=int, required=True)
    c = ps.add_parser("submit", help="raw SPM text, e.g. 'PolicyCreate {FileRule=*.pdf} {RT=1year}'")
    c.add_argument("text")
    ps.add_parser("list")
    s.set_defaults(fn=cmd_policy)

    s = sub.add_parser("fs", help="host file operations")
    fs = s.add_subparsers(dest="action", required=True)
    c = fs.add_parser("write")
    c.add_argument("file")
    c.add_argument("offset", type=int)
    c.add_argument("len", type=int)
    c.add_argument("--pattern", type=int, default=0, help="content seed")
    c = fs.add_parser("read")
    c.add_argument("file")
    c.add_argument("offset", type=int, nargs="?", default=0)
    c.add_argument("len", type=int, nargs="?")
    c.add_argument("--out")
    fs.add_parser("ls")
    c = fs.add_parser("adopt", help="rewrite a file so it picks up its matching policy")
    c.add_argument("file")
    c = fs.add_parser("rm")
    c.add_argument("file")
    s.set_defaults(fn=cmd_fs)

    s = sub.add_parser("time", help="simulated clock")
    ts = s.add_subparsers(dest="action", required=True)
    ts.add_parser("show")
    c = ts.add_parser("set")
    c.add_argument("value")
    c = ts.add_parser("advance")
    c.add_argument("value")
    s.set_defaults(fn=cmd_time)

    s = sub.add_parser("recover", help="point-in-time file recovery")
    s.add_argument("--file", required=True, help="file name or file id")
    s.add_argument("--at", required=True, help="target time (ISO-8601 or epoch seconds)")
    s.add_argument("--robust", action="store_true", help="full physical scan")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_recover)

    s = sub.add_parser("stats")
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("dump-image", help="write the canonical device image")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_dump_image)

    s = sub.add_parser("bench", help="write-amplification sweep on the desk partition")
    s.add_argument("--kind", default="big,small")
    s.add_argument("--cap", type=_floats, default=(0.25, 0.5, 0.75))
    s.add_argument("--ver", type=_floats, default=(0.0, 0.25, 0.5, 0.75, 1.0))
    s.add_argument("--seed", type=_ints, default=(0,))
    s.add_argument("--rounds", type=int, default=1)
    s.add_argument("--partition-mib", type=int, default=GIB >> 20)
    s.add_argument("--plain", action="store_true", help="run on a plain FTL")
    s.add_argument("--csv")
    s.add_argument("--trace", help="write a JSONL trace of every run")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("scenario", help="delayed-attack scenario")
    s.add_argument("name", choices=["delayed-attack"])
    s.add_argument("--rt-secure", default="5d")
    s.add_argument("--dwell", default="4d")
    s.add_argument("--mode", choices=["policy", "full"], default="policy")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_scenario)

    s = sub.add_parser("replay", help="replay a JSONL trace")
    s.add_argument("trace")
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_replay)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args) or 0
    except (SimError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
