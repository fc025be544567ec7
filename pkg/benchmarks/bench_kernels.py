"""Time the compiled kernels against the numba-free fallback.

Each path runs in its own interpreter because the switch is read at import.

    python3 benchmarks/bench_kernels.py [--partition-mib 64] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from pvssd import _jit
from pvssd.compress import compress
from pvssd.workload import WorkloadSpec, make_workload_device, run_workload

mib, repeat = int(sys.argv[1]), int(sys.argv[2])
out = {"numba": _jit.NUMBA_ENABLED}

def best(fn):
    fn()  # warm-up covers compilation or the on-disk cache load
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)

spec = WorkloadSpec("small", 0.75, 0.5, seed=0, partition_pages=mib * 256)
out["workload_s"] = best(lambda: run_workload(spec, make_workload_device(spec)))
page = np.repeat(np.arange(64, dtype=np.uint8), 64).tobytes()
out["compress_4k_us"] = best(lambda: [compress(page) for _ in range(1000)]) * 1e3
print(json.dumps(out))
"""


def run(disable, mib, repeat):
    env = dict(os.environ)
    env.pop("PVSSD_DISABLE_NUMBA", None)
    if disable:
        env["PVSSD_DISABLE_NUMBA"] = "1"
    res = subprocess.run([sys.executable, "-c", CHILD, str(mib), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--partition-mib", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    fast = run(False, args.partition_mib, args.repeat)
    slow = run(True, args.partition_mib, args.repeat)
    print(f"{'metric':<18}{'numba':>12}{'fallback':>12}{'speedup':>10}")
    for key in ("workload_s", "compress_4k_us"):
        print(f"{key:<18}{fast[key]:>12.4f}{slow[key]:>12.4f}{slow[key] / fast[key]:>9.1f}x")


if __name__ == "__main__":
    main()
