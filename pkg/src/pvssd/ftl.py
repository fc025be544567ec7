"""Versioning FTL kernels: write path, greedy GC with page preservation,
OV-zone reclamation, and version-chain walks.

Every kernel takes the device state tuple ``S`` built by
:class:`pvssd.device.Device`::

    (pst, oob, tok, data, blk, ftl, ctl, pol, gclog, declog)

Kernels never raise; they return status codes from :mod:`pvssd.nand`.
"""

import numpy as np

from ._jit import kernel, pick
from .compress import rle_encode
from .nand import (
    B_BUCKET, B_NOV, B_NVALID, B_WP, C_BYTES_IN, C_BYTES_OUT, C_CLOCK, C_COST_READ, C_DECLOG_N,
    C_FRONTIER, C_GC_COPIES, C_GC_DROPPED, C_GC_RUNS, C_GC_SEQ, C_GC_THRESHOLD, C_GCLOG_N,
    C_HALTED, C_HOST_WRITES, C_KEEP_DATA, C_NB, C_NFREE, C_NFREE_OV, C_NVB, C_OV_DISCARDED,
    C_OV_PRESERVED, C_PPB, C_PS, C_READS, C_RECLAIMED, C_UNKNOWN_POLICY, C_VERSIONING,
    ERR_BROKEN_CHAIN, ERR_LOG_FULL, ERR_NO_VICTIM, ERR_OV_FULL, ERR_ZONE_FULL, FREE, INVALID,
    O_BP, O_DEAD, O_FID, O_FOFF, O_LPA, O_POL, O_WT, OK, OLD, VALID,
    k_alloc_ov, k_alloc_valid, k_close_frontier, k_erase, k_program, k_set_state, open_ov_block,
)
from .simtime import DAY, INF

# policy table columns / status
P_RT = 0
P_BC = 1
P_STATUS = 2
ST_UNKNOWN = 0
ST_ACTIVE = 1
ST_TOMBSTONE = 2

# gc log columns
G_SEQ = 0
G_VICTIM = 1
G_VALID = 2
G_INVALID = 3
G_PRESERVED = 4
G_DISCARDED = 5
G_BYTES_IN = 6
G_BYTES_OUT = 7
G_T0 = 8
G_T1 = 9
N_GCLOG = 10

# decision log columns
D_SEQ = 0
D_PPA = 1
D_LPA = 2
D_WT = 3
D_DEAD = 4
D_POL = 5
D_KEEP = 6
D_BUCKET = 7
D_TIME = 8
N_DECLOG = 9


# ------------------------------------------------------------ page preservation


@kernel
def bc_covered(wt, dead, bc):
    """True if some backup instant k*bc (epoch-anchored) lies in [wt, dead]."""
    k = -((-wt) // bc)
    return k * bc <= dead


@kernel
def pv_keep(wt, dead, rt, bc, status, cur):
    if status != ST_ACTIVE:
        return False
    if dead >= INF:
        return True
    if rt > 0 and dead + rt > cur:
        return True
    if bc > 0 and bc_covered(wt, dead, bc):
        return True
    return False


@kernel
def expiry(wt, dead, rt, bc):
    """Expiration instant used to pick the OV-zone bucket of a preserved page."""
    if bc > 0 and bc_covered(wt, dead, bc):
        if rt > 0:
            return dead + max(rt, bc)
        return (dead // bc) * bc + bc
    return dead + rt


@kernel
def policy_row(pol, pid):
    """(rt, bc, status) for a policy id; unknown ids yield status ST_UNKNOWN."""
    if pid < 0 or pid >= pol.shape[0]:
        return 0, 0, ST_UNKNOWN
    return pol[pid, P_RT], pol[pid, P_BC], pol[pid, P_STATUS]


@kernel
def page_keep(oob, pol, p, cur):
    rt, bc, st = policy_row(pol, oob[p, O_POL])
    return pv_keep(oob[p, O_WT], oob[p, O_DEAD], rt, bc, st, cur)


# ------------------------------------------------------------------ chains


@kernel
def k_chain(pst, oob, ftl, lpa, out):
    """Fill ``out`` with the chain of ``lpa`` newest first.  Returns the length,
    -1 on a broken link, -2 if ``out`` is too short."""
    p = ftl[lpa]
    n = 0
    prev_wt = INF
    while p >= 0:
        if n >= out.shape[0]:
            return -2
        if pst[p] == FREE or oob[p, O_LPA] != lpa or oob[p, O_WT] >= prev_wt:
            return -1
        out[n] = p
        n += 1
        prev_wt = oob[p, O_WT]
        p = oob[p, O_BP]
    return n


@kernel
def find_successor(oob, ftl, lpa, target):
    """Page whose back pointer is ``target``; -2 if target is the head, -1 if unlinked."""
    p = ftl[lpa]
    if p == target:
        return -2
    steps = 0
    limit = oob.shape[0]
    while p >= 0 and steps < limit:
        nxt = oob[p, O_BP]
        if nxt == target:
            return p
        p = nxt
        steps += 1
    return -1


# --------------------------------------------------------------- victims


def _select_victim_loop(blk, ctl):
    # cheapest per freed ValidZone page: every Valid and Old page in the block
    # costs one program, every page not re-programmed as Valid is freed.
    # Ties go to fewer Valid pages, then the lowest id.
    ppb = ctl[C_PPB]
    f = ctl[C_FRONTIER]
    best = -1
    best_cost = 0
    best_gain = 1
    best_valid = 0
    for b in range(ctl[C_NVB]):
        nv = blk[b, B_NVALID]
        if b == f or blk[b, B_WP] == 0 or nv >= ppb:
            continue
        cost = nv + blk[b, B_NOV]
        gain = ppb - nv
        if best < 0:
            better = True
        else:
            lhs = cost * best_gain
            rhs = best_cost * gain
            better = lhs < rhs or (lhs == rhs and nv < best_valid)
        if better:
            best = b
            best_cost = cost
            best_gain = gain
            best_valid = nv
    return best


def _select_victim_np(blk, ctl):
    ppb = ctl[C_PPB]
    b = blk[: ctl[C_NVB]]
    nv = b[:, B_NVALID]
    ok = (b[:, B_WP] > 0) & (nv < ppb)
    f = ctl[C_FRONTIER]
    if f >= 0:
        ok[f] = False
    if not ok.any():
        return -1
    # correctly rounded division keeps equal ratios equal, so the order is exact
    ratio = np.where(ok, (nv + b[:, B_NOV]) / np.maximum(ppb - nv, 1), np.inf)
    order = np.lexsort((np.arange(nv.size), nv, ratio))
    return int(order[0])


select_victim = pick(kernel(_select_victim_loop), _select_victim_np)


@kernel
def ov_space_ok(blk, ctl, buckets, n):
    """Can ``n`` pages bucketed as ``buckets[:n]`` be placed in the OV zone?"""
    if n == 0:
        return True
    ppb = ctl[C_PPB]
    b = np.sort(buckets[:n])
    blocks = 0
    i = 0
    while i < n:
        j = i
        while j < n and b[j] == b[i]:
            j += 1
        need = j - i
        ob = open_ov_block(blk, ctl, b[i])
        if ob >= 0:
            need -= ppb - blk[ob, B_WP]
        if need > 0:
            blocks += (need + ppb - 1) // ppb
        i = j
    return blocks <= ctl[C_NFREE_OV]


# -------------------------------------------------------------- reclaim


@kernel
def k_reclaim(S, cur):
    """Erase OV-zone blocks whose bucket has passed and whose pages all expired."""
    pst, oob, tok, data, blk, ftl, ctl, pol, gclog, declog = S
    nvb = ctl[C_NVB]
    nb = ctl[C_NB]
    ppb = ctl[C_PPB]
    cand = np.zeros(nb, dtype=np.bool_)
    for b in range(nvb, nb):
        if blk[b, B_WP] == 0 or blk[b, B_BUCKET] < 0:
            continue
        if (blk[b, B_BUCKET] + 1) * DAY >= cur:
            continue
        ok = True
        for i in range(blk[b, B_WP]):
            p = b * ppb + i
            if pst[p] == FREE:
                continue
            if pst[p] != OLD or page_keep(oob, pol, p, cur):
                ok = False
                break
        cand[b] = ok
    # never orphan a surviving older version
    changed = True
    while changed:
        changed = False
        for b in range(nvb, nb):
            if not cand[b]:
                continue
            for i in range(blk[b, B_WP]):
                p = b * ppb + i
                if pst[p] == FREE:
                    continue
                q = oob[p, O_BP]
                if q >= 0 and not cand[q // ppb]:
                    cand[b] = False
                    changed = True
                    break
    n = 0
    for b in range(nvb, nb):
        if not cand[b]:
            continue
        for i in range(blk[b, B_WP]):
            p = b * ppb + i
            if pst[p] == FREE:
                continue
            s = find_successor(oob, ftl, oob[p, O_LPA], p)
            if s >= 0:
                oob[s, O_BP] = -1
        n += 1
    for b in range(nvb, nb):
        if cand[b]:
            k_erase(pst, oob, blk, ctl, b)
    ctl[C_RECLAIMED] += n
    return n


# ------------------------------------------------------------------- GC


@kernel
def k_gc(S, victim):
    """Collect one ValidZone block (``victim`` < 0 picks greedily)."""
    pst, oob, tok, data, blk, ftl, ctl, pol, gclog, declog = S
    ppb = ctl[C_PPB]
    ps = ctl[C_PS]
    keep_data = ctl[C_KEEP_DATA] == 1
    if ctl[C_GCLOG_N] >= gclog.shape[0] or ctl[C_DECLOG_N] + ppb > declog.shape[0]:
        return ERR_LOG_FULL
    v = victim
    if v < 0:
        v = select_victim(blk, ctl)
        if v < 0:
            return ERR_NO_VICTIM
    cur = ctl[C_CLOCK]
    base = v * ppb
    wp = blk[v, B_WP]

    keep = np.zeros(ppb, dtype=np.bool_)
    bucket = np.full(ppb, -1, dtype=np.int64)
    kept = np.empty(ppb, dtype=np.int64)
    nkeep = 0
    for i in range(wp):
        p = base + i
        if pst[p] != OLD:
            continue
        rt, bc, st = policy_row(pol, oob[p, O_POL])
        if pv_keep(oob[p, O_WT], oob[p, O_DEAD], rt, bc, st, cur):
            keep[i] = True
            bucket[i] = expiry(oob[p, O_WT], oob[p, O_DEAD], rt, bc) // DAY
            kept[nkeep] = bucket[i]
            nkeep += 1
    if not ov_space_ok(blk, ctl, kept, nkeep):
        k_reclaim(S, cur)
        if not ov_space_ok(blk, ctl, kept, nkeep):
            ctl[C_HALTED] = 1
            return ERR_OV_FULL

    if v == ctl[C_FRONTIER]:
        k_close_frontier(blk, ctl)
    seq = ctl[C_GC_SEQ]
    n_valid = 0
    n_invalid = 0
    n_pres = 0
    n_disc = 0
    b_in = 0
    b_out = 0
    scratch = np.empty(max(ps - 1, 1), dtype=np.uint8)
    for i in range(wp):
        p = base + i
        st = pst[p]
        if st == VALID:
            ctl[C_CLOCK] += ctl[C_COST_READ]
            ctl[C_READS] += 1
            q = k_alloc_valid(blk, ctl)
            if q < 0:
                return ERR_ZONE_FULL
            k_program(pst, oob, blk, ctl, q, VALID, oob[p, O_LPA], oob[p, O_WT], oob[p, O_BP],
                      oob[p, O_POL], oob[p, O_FID], oob[p, O_FOFF], oob[p, O_DEAD], -1)
            if keep_data:
                data[q, :] = data[p, :]
            tok[q] = tok[p]
            ftl[oob[p, O_LPA]] = q
            n_valid += 1
        elif st == INVALID:
            n_invalid += 1
        elif st == OLD:
            lpa = oob[p, O_LPA]
            s = find_successor(oob, ftl, lpa, p)
            if s < 0:
                return ERR_BROKEN_CHAIN
            d = ctl[C_DECLOG_N]
            declog[d, D_SEQ] = seq
            declog[d, D_PPA] = p
            declog[d, D_LPA] = lpa
            declog[d, D_WT] = oob[p, O_WT]
            declog[d, D_DEAD] = oob[p, O_DEAD]
            declog[d, D_POL] = oob[p, O_POL]
            declog[d, D_KEEP] = 1 if keep[i] else 0
            declog[d, D_BUCKET] = bucket[i]
            declog[d, D_TIME] = cur
            ctl[C_DECLOG_N] = d + 1
            if keep[i]:
                ctl[C_CLOCK] += ctl[C_COST_READ]
                ctl[C_READS] += 1
                q = k_alloc_ov(blk, ctl, bucket[i])
                if q < 0:
                    return ERR_OV_FULL
                clen = -1
                if keep_data:
                    clen = rle_encode(data[p], scratch)
                    if clen >= 0:
                        data[q, :clen] = scratch[:clen]
                        data[q, clen:] = 0
                        b_out += clen
                    else:
                        data[q, :] = data[p, :]
                        b_out += ps
                    b_in += ps
                tok[q] = tok[p]
                k_program(pst, oob, blk, ctl, q, OLD, lpa, oob[p, O_WT], oob[p, O_BP],
                          oob[p, O_POL], oob[p, O_FID], oob[p, O_FOFF], oob[p, O_DEAD], clen)
                oob[s, O_BP] = q
                n_pres += 1
            else:
                oob[s, O_BP] = oob[p, O_BP]
                n_disc += 1
    k_erase(pst, oob, blk, ctl, v)

    g = ctl[C_GCLOG_N]
    gclog[g, G_SEQ] = seq
    gclog[g, G_VICTIM] = v
    gclog[g, G_VALID] = n_valid
    gclog[g, G_INVALID] = n_invalid
    gclog[g, G_PRESERVED] = n_pres
    gclog[g, G_DISCARDED] = n_disc
    gclog[g, G_BYTES_IN] = b_in
    gclog[g, G_BYTES_OUT] = b_out
    gclog[g, G_T0] = cur
    gclog[g, G_T1] = ctl[C_CLOCK]
    ctl[C_GCLOG_N] = g + 1
    ctl[C_GC_SEQ] = seq + 1
    ctl[C_GC_RUNS] += 1
    ctl[C_GC_COPIES] += n_valid
    ctl[C_GC_DROPPED] += n_invalid
    ctl[C_OV_PRESERVED] += n_pres
    ctl[C_OV_DISCARDED] += n_disc
    ctl[C_BYTES_IN] += b_in
    ctl[C_BYTES_OUT] += b_out
    ctl[C_HALTED] = 0
    return OK


# ------------------------------------------------------------ write path


@kernel
def k_write(S, lpas, rows, toks, pols, fids, foffs, start):
    """Apply host page writes ``start..`` in order.  Returns (code, next index)."""
    pst, oob, tok, data, blk, ftl, ctl, pol, gclog, declog = S
    keep_data = ctl[C_KEEP_DATA] == 1
    n = lpas.shape[0]
    for i in range(start, n):
        while ctl[C_NFREE] < ctl[C_GC_THRESHOLD]:
            code = k_gc(S, -1)
            if code != OK:
                return code, i
        lpa = lpas[i]
        pid = pols[i]
        if ctl[C_VERSIONING] == 0:
            pid = -1
        elif pid >= 0:
            rt, bc, st = policy_row(pol, pid)
            if st != ST_ACTIVE:
                pid = -1
                ctl[C_UNKNOWN_POLICY] += 1
        fid = -1
        foff = -1
        if pid >= 0:
            fid = fids[i]
            foff = foffs[i]
        q = k_alloc_valid(blk, ctl)
        if q < 0:
            return ERR_ZONE_FULL, i
        now = ctl[C_CLOCK]
        old = ftl[lpa]
        bp = -1
        if old >= 0:
            if oob[old, O_POL] >= 0:
                k_set_state(pst, blk, ctl, old, OLD)
                oob[old, O_DEAD] = now
                bp = old
            else:
                k_set_state(pst, blk, ctl, old, INVALID)
                bp = oob[old, O_BP]
        k_program(pst, oob, blk, ctl, q, VALID, lpa, now, bp, pid, fid, foff, INF, -1)
        if keep_data:
            data[q, :] = rows[i, :]
        tok[q] = toks[i]
        ftl[lpa] = q
        ctl[C_HOST_WRITES] += 1
    return OK, n
