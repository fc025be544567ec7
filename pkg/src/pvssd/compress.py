"""Run-length codec for pages copied into the OV zone.

PackBits framing: a header byte ``h`` < 128 introduces ``h + 1`` literal
bytes, ``h`` > 128 repeats the next byte ``257 - h`` times.
"""

import numpy as np

from ._jit import kernel


@kernel
def rle_encode(src, dst):
    """Encode ``src`` into ``dst``; returns the encoded length, or -1 if it does not fit."""
    n = src.shape[0]
    cap = dst.shape[0]
    i = 0
    o = 0
    while i < n:
        run = 1
        while i + run < n and run < 128 and src[i + run] == src[i]:
            run += 1
        if run >= 3:
            if o + 2 > cap:
                return -1
            dst[o] = 257 - run
            dst[o + 1] = src[i]
            o += 2
            i += run
            continue
        # literal stretch up to the next run of three
        start = i
        lit = 0
        while i < n and lit < 128:
            if i + 2 < n and src[i] == src[i + 1] and src[i] == src[i + 2]:
                break
            i += 1
            lit += 1
        if o + 1 + lit > cap:
            return -1
        dst[o] = lit - 1
        o += 1
        for k in range(lit):
            dst[o + k] = src[start + k]
        o += lit
    return o


@kernel
def rle_decode(src, n, dst):
    """Decode ``n`` bytes of ``src`` into ``dst``; returns bytes produced."""
    i = 0
    o = 0
    while i < n:
        h = np.int64(src[i])
        i += 1
        if h < 128:
            cnt = h + 1
            for k in range(cnt):
                dst[o + k] = src[i + k]
            i += cnt
            o += cnt
        elif h > 128:
            cnt = 257 - h
            v = src[i]
            i += 1
            for k in range(cnt):
                dst[o + k] = v
            o += cnt
    return o


def compress(page):
    """Bytes-in, bytes-out convenience wrapper; ``None`` when incompressible."""
    src = np.frombuffer(bytes(page), dtype=np.uint8)
    dst = np.empty(max(src.size - 1, 0), dtype=np.uint8)
    n = rle_encode(src, dst)
    return None if n < 0 else dst[:n].tobytes()


def decompress(blob, size):
    src = np.frombuffer(bytes(blob), dtype=np.uint8)
    dst = np.empty(size, dtype=np.uint8)
    got = rle_decode(src, src.size, dst)
    if got != size:
        raise ValueError(f"decoded {got} bytes, expected {size}")
    return dst.tobytes()
