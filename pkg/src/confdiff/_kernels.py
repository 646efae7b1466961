"""Jitted hot paths: distance queries, walk-on-spheres trajectories,
ensemble drivers, and fixed-step oracle walks.

Randomness is counter-based: every trajectory seeds its own xoshiro256+
stream from (run seed, trajectory index) via splitmix64, so aggregate
results are bit-identical for a given (seed, N) no matter how work is
chunked or scheduled.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

U64 = np.uint64
_SM_GAMMA = U64(0x9E3779B97F4A7C15)
_SM_M1 = U64(0xBF58476D1CE4E5B9)
_SM_M2 = U64(0x94D049BB133111EB)
_GOLD = U64(0x9E3779B97F4A7C15)
TWO_PI = 6.283185307179586
_INV53 = 1.1102230246251565e-16  # 2**-53


@njit(cache=True, inline="always")
def _sm64(z):
    z = z ^ (z >> U64(30))
    z = z * _SM_M1
    z = z ^ (z >> U64(27))
    z = z * _SM_M2
    return z ^ (z >> U64(31))


@njit(cache=True)
def _rng_init(seed, index, state):
    base = U64(seed) ^ (U64(index) * _GOLD)
    any_nz = False
    for i in range(4):
        base = base + _SM_GAMMA
        state[i] = _sm64(base)
        if state[i] != U64(0):
            any_nz = True
    if not any_nz:
        state[0] = U64(1)


@njit(cache=True, inline="always")
def _xo_next(s):
    result = s[0] + s[3]
    t = s[1] << U64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = (s[3] << U64(45)) | (s[3] >> U64(19))
    return result


@njit(cache=True, inline="always")
def _u01(s):
    return float(_xo_next(s) >> U64(11)) * _INV53


@njit(cache=True, inline="always")
def _gauss_pair(s):
    u1 = _u01(s)
    while u1 <= 1e-320:
        u1 = _u01(s)
    u2 = _u01(s)
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(TWO_PI * u2), r * np.sin(TWO_PI * u2)


@njit(cache=True, inline="always")
def _sample_tau(s, qtab, tail_a, tail_lam, u_cut):
    u = _u01(s)
    if u >= u_cut:
        return np.log(tail_a / (1.0 - u)) / tail_lam
    x = u * (qtab.shape[0] - 1)
    i = int(x)
    f = x - i
    return qtab[i] * (1.0 - f) + qtab[i + 1] * f


# ----------------------------------------------------------------------
# 2D hierarchy queries
# ----------------------------------------------------------------------

@njit(cache=True)
def _dist2d(px, py, ub, k, g, gx, gy, gc, gs, scale_at,
            bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep):
    """Exact distance to the generation-g curve (branch & bound, squared)."""
    best2 = ub * ub
    sox[0] = 0.0; soy[0] = 0.0; scc[0] = 1.0; sss[0] = 0.0
    slb[0] = 0.0; sdep[0] = 0
    top = 1
    while top > 0:
        top -= 1
        if slb[top] >= best2:
            continue
        d = sdep[top]
        ox = sox[top]; oy = soy[top]; c = scc[top]; s = sss[top]
        sc = scale_at[d]
        dx = px - ox; dy = py - oy
        u = (c * dx + s * dy) / sc
        v = (-s * dx + c * dy) / sc
        if d == g:
            t = u
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            du = u - t
            dist2 = sc * sc * (du * du + v * v)
            if dist2 < best2:
                best2 = dist2
            continue
        sc2 = scale_at[d + 1]
        n_new = 0
        base = top
        for i in range(k):
            cox = ox + sc * (c * gx[i] - s * gy[i])
            coy = oy + sc * (s * gx[i] + c * gy[i])
            cc = c * gc[i] - s * gs[i]
            cs = s * gc[i] + c * gs[i]
            ddx = px - cox; ddy = py - coy
            uu = (cc * ddx + cs * ddy) / sc2
            vv = (-cs * ddx + cc * ddy) / sc2
            ex = bx0 - uu
            if uu - bx1 > ex:
                ex = uu - bx1
            if ex < 0.0:
                ex = 0.0
            ey = by0 - vv
            if vv - by1 > ey:
                ey = vv - by1
            if ey < 0.0:
                ey = 0.0
            lb2 = sc2 * sc2 * (ex * ex + ey * ey)
            if lb2 >= best2:
                continue
            # insertion keeping lb descending above `base` (pop = smallest)
            j = base + n_new
            while j > base and slb[j - 1] < lb2:
                sox[j] = sox[j - 1]; soy[j] = soy[j - 1]
                scc[j] = scc[j - 1]; sss[j] = sss[j - 1]
                slb[j] = slb[j - 1]; sdep[j] = sdep[j - 1]
                j -= 1
            sox[j] = cox; soy[j] = coy; scc[j] = cc; sss[j] = cs
            slb[j] = lb2; sdep[j] = d + 1
            n_new += 1
        top = base + n_new
    return np.sqrt(best2)


@njit(cache=True)
def _near2d(px, py, depth, k, g, gx, gy, gc, gs, scale_at,
            bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep, sadr):
    """Nearest cell at ``depth``: (dist, addr, qx, qy, nx, ny)."""
    best2 = 1e300
    best_addr = np.int64(-1)
    bqx = 0.0; bqy = 0.0; bnx = 0.0; bny = 1.0
    sox[0] = 0.0; soy[0] = 0.0; scc[0] = 1.0; sss[0] = 0.0
    slb[0] = 0.0; sdep[0] = 0; sadr[0] = 0
    top = 1
    while top > 0:
        top -= 1
        if slb[top] > best2:
            continue
        d = sdep[top]
        ox = sox[top]; oy = soy[top]; c = scc[top]; s = sss[top]
        addr = sadr[top]
        sc = scale_at[d]
        dx = px - ox; dy = py - oy
        u = (c * dx + s * dy) / sc
        v = (-s * dx + c * dy) / sc
        if d == depth:
            t = u
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            du = u - t
            dist2 = sc * sc * (du * du + v * v)
            if dist2 < best2 or (dist2 == best2 and addr < best_addr):
                best2 = dist2
                best_addr = addr
                bqx = ox + sc * c * t
                bqy = oy + sc * s * t
                bnx = -s
                bny = c
            continue
        sc2 = scale_at[d + 1]
        n_new = 0
        base = top
        for i in range(k):
            cox = ox + sc * (c * gx[i] - s * gy[i])
            coy = oy + sc * (s * gx[i] + c * gy[i])
            cc = c * gc[i] - s * gs[i]
            cs = s * gc[i] + c * gs[i]
            ddx = px - cox; ddy = py - coy
            uu = (cc * ddx + cs * ddy) / sc2
            vv = (-cs * ddx + cc * ddy) / sc2
            ex = bx0 - uu
            if uu - bx1 > ex:
                ex = uu - bx1
            if ex < 0.0:
                ex = 0.0
            ey = by0 - vv
            if vv - by1 > ey:
                ey = vv - by1
            if ey < 0.0:
                ey = 0.0
            lb2 = sc2 * sc2 * (ex * ex + ey * ey)
            if lb2 > best2:
                continue
            ca = addr * k + i
            j = base + n_new
            while j > base and (slb[j - 1] < lb2 or (slb[j - 1] == lb2 and sadr[j - 1] < ca)):
                sox[j] = sox[j - 1]; soy[j] = soy[j - 1]
                scc[j] = scc[j - 1]; sss[j] = sss[j - 1]
                slb[j] = slb[j - 1]; sdep[j] = sdep[j - 1]; sadr[j] = sadr[j - 1]
                j -= 1
            sox[j] = cox; soy[j] = coy; scc[j] = cc; sss[j] = cs
            slb[j] = lb2; sdep[j] = d + 1; sadr[j] = ca
            n_new += 1
        top = base + n_new
    return np.sqrt(best2), best_addr, bqx, bqy, bnx, bny


def _stacks2d(k, g):
    cap = max(8, k * (g + 2) + 1)
    return (
        np.empty(cap), np.empty(cap), np.empty(cap), np.empty(cap),
        np.empty(cap), np.empty(cap, dtype=np.int64), np.empty(cap, dtype=np.int64),
    )


def nearest2d_py(px, py, depth, k, g, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1):
    sox, soy, scc, sss, slb, sdep, sadr = _stacks2d(k, g)
    return _near2d(px, py, depth, k, g, gx, gy, gc, gs, scale_at,
                   bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep, sadr)


@njit(cache=True)
def _leaf_frame2d(addr, g, k, gx, gy, gc, gs, scale_at):
    ox = 0.0; oy = 0.0; c = 1.0; s = 0.0
    if g > 0:
        p = np.int64(k) ** np.int64(g - 1)
        a = addr
        for d in range(g):
            i = (a // p) % k
            sc = scale_at[d]
            nox = ox + sc * (c * gx[i] - s * gy[i])
            noy = oy + sc * (s * gx[i] + c * gy[i])
            nc = c * gc[i] - s * gs[i]
            ns = s * gc[i] + c * gs[i]
            ox = nox; oy = noy; c = nc; s = ns
            if p > 1:
                p //= k
    return ox, oy, c, s


@njit(cache=True, inline="always")
def _fold(x, w):
    # triangle-wave fold into [0, w]
    while x < 0.0 or x > w:
        if x < 0.0:
            x = -x
        else:
            x = 2.0 * w - x
    return x


@njit(cache=True)
def _traj2d(sx, sy, rng,
            k, g, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
            width, ytop, lid,
            eps, aoff, sigma, max_steps, dcoef,
            qtab, tail_a, tail_lam, u_cut,
            use_alive, alive,
            sox, soy, scc, sss, slb, sdep, sadr):
    """One trajectory.

    Returns (status, t, x, y, steps, refl, addr, fhx, fhy); status 1 =
    absorbed, 0 = step budget exhausted.
    """
    x = sx; y = sy
    t = 0.0
    steps = 0
    refl = 0
    fhx = np.nan; fhy = np.nan
    got_first = False
    d = _dist2d(x, y, 1e300, k, g, gx, gy, gc, gs, scale_at,
                bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep)
    while True:
        if d < eps:
            dd, addr, qx, qy, nx, ny = _near2d(
                x, y, g, k, g, gx, gy, gc, gs, scale_at,
                bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep, sadr)
            if not got_first:
                fhx = qx; fhy = qy
                got_first = True
            absorb = True
            if use_alive == 1:
                absorb = alive[addr] != 0
            elif sigma < 1.0:
                absorb = _u01(rng) < sigma
            if absorb:
                return 1, t, x, y, steps, refl, addr, fhx, fhy
            refl += 1
            x = _fold(qx + nx * aoff, width)
            y = qy + ny * aoff
            if y > lid:
                y = 2.0 * lid - y
            d = _dist2d(x, y, aoff, k, g, gx, gy, gc, gs, scale_at,
                        bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep)
            continue
        if steps >= max_steps:
            return 0, t, x, y, steps, refl, np.int64(-1), fhx, fhy
        rho = d
        cap = 2.0 * lid - y - ytop
        if rho > cap:
            rho = cap
        ang = TWO_PI * _u01(rng)
        x += rho * np.cos(ang)
        y += rho * np.sin(ang)
        t += rho * rho / dcoef * _sample_tau(rng, qtab, tail_a, tail_lam, u_cut)
        steps += 1
        x = _fold(x, width)
        if y > lid:
            y = 2.0 * lid - y
        d = _dist2d(x, y, d + rho, k, g, gx, gy, gc, gs, scale_at,
                    bx0, bx1, by0, by1, sox, soy, scc, sss, slb, sdep)


@njit(cache=True)
def _source2d(rng, src_kind, src_cum, src_off, lid, width,
              k, g, gx, gy, gc, gs, scale_at):
    if src_kind == 0:  # distant flat line
        return _u01(rng) * width, lid
    if src_kind == 1:  # uniform over finest cells
        ncell = np.int64(k) ** np.int64(g)
        addr = np.int64(_u01(rng) * ncell)
        if addr >= ncell:
            addr = ncell - 1
    else:  # weighted cells
        u = _u01(rng)
        lo = 0
        hi = src_cum.shape[0] - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if src_cum[mid] < u:
                lo = mid + 1
            else:
                hi = mid
        addr = np.int64(lo)
    ox, oy, c, s = _leaf_frame2d(addr, g, k, gx, gy, gc, gs, scale_at)
    sc = scale_at[g]
    tpar = _u01(rng)
    px = ox + sc * c * tpar - s * src_off
    py = oy + sc * s * tpar + c * src_off
    px = _fold(px, width)
    return px, py


@njit(cache=True, parallel=True)
def ensemble_hist2d(n_traj, seed,
                    k, g, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                    width, ytop, lid,
                    eps, aoff, sigma, max_steps, dcoef,
                    qtab, tail_a, tail_lam, u_cut,
                    use_alive, alive,
                    src_kind, src_cum, src_off,
                    bin_div, n_chunks, hist_buf, stat_buf):
    """Accumulate absorbed-hit counts per depth-level cell.

    ``hist_buf``: int64[n_chunks, n_cells]; ``stat_buf``: float64[n_chunks, 5]
    rows (absorbed, exhausted, steps, reflections, sum_t).
    """
    for cidx in prange(n_chunks):
        sox, soy, scc, sss, slb, sdep, sadr = (
            np.empty(k * (g + 2) + 1), np.empty(k * (g + 2) + 1),
            np.empty(k * (g + 2) + 1), np.empty(k * (g + 2) + 1),
            np.empty(k * (g + 2) + 1), np.empty(k * (g + 2) + 1, dtype=np.int64),
            np.empty(k * (g + 2) + 1, dtype=np.int64))
        rng = np.empty(4, dtype=np.uint64)
        lo = cidx * n_traj // n_chunks
        hi = (cidx + 1) * n_traj // n_chunks
        for idx in range(lo, hi):
            _rng_init(seed, idx, rng)
            sx, sy = _source2d(rng, src_kind, src_cum, src_off, lid, width,
                               k, g, gx, gy, gc, gs, scale_at)
            st, t, x, y, steps, refl, addr, fx, fy = _traj2d(
                sx, sy, rng, k, g, gx, gy, gc, gs, scale_at,
                bx0, bx1, by0, by1, width, ytop, lid,
                eps, aoff, sigma, max_steps, dcoef,
                qtab, tail_a, tail_lam, u_cut, use_alive, alive,
                sox, soy, scc, sss, slb, sdep, sadr)
            if st == 1:
                hist_buf[cidx, addr // bin_div] += 1
                stat_buf[cidx, 0] += 1.0
                stat_buf[cidx, 4] += t
            else:
                stat_buf[cidx, 1] += 1.0
            stat_buf[cidx, 2] += steps
            stat_buf[cidx, 3] += refl


@njit(cache=True, parallel=True)
def ensemble_passage2d(n_traj, seed,
                       k, g, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                       width, ytop, lid,
                       eps, aoff, sigma, max_steps, dcoef,
                       qtab, tail_a, tail_lam, u_cut,
                       src_kind, src_cum, src_off,
                       n_chunks, t_out, r_out, refl_out, status_out):
    """Record per-trajectory first-passage time and end-to-end distance."""
    dummy = np.zeros(1, dtype=np.uint8)
    for cidx in prange(n_chunks):
        cap = k * (g + 2) + 1
        sox = np.empty(cap); soy = np.empty(cap)
        scc = np.empty(cap); sss = np.empty(cap)
        slb = np.empty(cap)
        sdep = np.empty(cap, dtype=np.int64)
        sadr = np.empty(cap, dtype=np.int64)
        rng = np.empty(4, dtype=np.uint64)
        lo = cidx * n_traj // n_chunks
        hi = (cidx + 1) * n_traj // n_chunks
        for idx in range(lo, hi):
            _rng_init(seed, idx, rng)
            sx, sy = _source2d(rng, src_kind, src_cum, src_off, lid, width,
                               k, g, gx, gy, gc, gs, scale_at)
            st, t, x, y, steps, refl, addr, fx, fy = _traj2d(
                sx, sy, rng, k, g, gx, gy, gc, gs, scale_at,
                bx0, bx1, by0, by1, width, ytop, lid,
                eps, aoff, sigma, max_steps, dcoef,
                qtab, tail_a, tail_lam, u_cut, 0, dummy,
                sox, soy, scc, sss, slb, sdep, sadr)
            t_out[idx] = t
            r_out[idx] = np.sqrt((x - sx) * (x - sx) + (y - sy) * (y - sy))
            refl_out[idx] = refl
            status_out[idx] = st


@njit(cache=True, parallel=True)
def ensemble_spread2d(n_traj, seed,
                      k, g, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                      width, ytop, lid,
                      eps, aoff, sigma, max_steps, dcoef,
                      qtab, tail_a, tail_lam, u_cut,
                      src_kind, src_cum, src_off,
                      n_chunks, spread_out, status_out):
    """Distance between first-hit and final absorption point per walker."""
    dummy = np.zeros(1, dtype=np.uint8)
    for cidx in prange(n_chunks):
        cap = k * (g + 2) + 1
        sox = np.empty(cap); soy = np.empty(cap)
        scc = np.empty(cap); sss = np.empty(cap)
        slb = np.empty(cap)
        sdep = np.empty(cap, dtype=np.int64)
        sadr = np.empty(cap, dtype=np.int64)
        rng = np.empty(4, dtype=np.uint64)
        lo = cidx * n_traj // n_chunks
        hi = (cidx + 1) * n_traj // n_chunks
        for idx in range(lo, hi):
            _rng_init(seed, idx, rng)
            sx, sy = _source2d(rng, src_kind, src_cum, src_off, lid, width,
                               k, g, gx, gy, gc, gs, scale_at)
            st, t, x, y, steps, refl, addr, fx, fy = _traj2d(
                sx, sy, rng, k, g, gx, gy, gc, gs, scale_at,
                bx0, bx1, by0, by1, width, ytop, lid,
                eps, aoff, sigma, max_steps, dcoef,
                qtab, tail_a, tail_lam, u_cut, 0, dummy,
                sox, soy, scc, sss, slb, sdep, sadr)
            spread_out[idx] = np.sqrt((x - fx) * (x - fx) + (y - fy) * (y - fy))
            status_out[idx] = st


@njit(cache=True)
def ensemble_detail2d(n_traj, traj0, seed,
                      k, g, gx, gy, gc, gs, scale_at, bx0, bx1, by0, by1,
                      width, ytop, lid,
                      eps, aoff, sigma, max_steps, dcoef,
                      qtab, tail_a, tail_lam, u_cut,
                      src_kind, src_cum, src_off,
                      t_out, x_out, y_out, r_out, steps_out, refl_out,
                      addr_out, status_out):
    """Full per-trajectory records for streaming consumption."""
    dummy = np.zeros(1, dtype=np.uint8)
    cap = k * (g + 2) + 1
    sox = np.empty(cap); soy = np.empty(cap)
    scc = np.empty(cap); sss = np.empty(cap)
    slb = np.empty(cap)
    sdep = np.empty(cap, dtype=np.int64)
    sadr = np.empty(cap, dtype=np.int64)
    rng = np.empty(4, dtype=np.uint64)
    for i in range(n_traj):
        _rng_init(seed, traj0 + i, rng)
        sx, sy = _source2d(rng, src_kind, src_cum, src_off, lid, width,
                           k, g, gx, gy, gc, gs, scale_at)
        st, t, x, y, steps, refl, addr, fx, fy = _traj2d(
            sx, sy, rng, k, g, gx, gy, gc, gs, scale_at,
            bx0, bx1, by0, by1, width, ytop, lid,
            eps, aoff, sigma, max_steps, dcoef,
            qtab, tail_a, tail_lam, u_cut, 0, dummy,
            sox, soy, scc, sss, slb, sdep, sadr)
        t_out[i] = t
        x_out[i] = x
        y_out[i] = y
        r_out[i] = np.sqrt((x - sx) * (x - sx) + (y - sy) * (y - sy))
        steps_out[i] = steps
        refl_out[i] = refl
        addr_out[i] = addr
        status_out[i] = st


# ----------------------------------------------------------------------
# 3D hierarchy queries and walks
# ----------------------------------------------------------------------

@njit(cache=True)
def _dist3d(px, py, pz, ub, k, g, gorg, grot, scale_at, box,
            sorg, srot, slb, sdep):
    best2 = ub * ub
    for j in range(3):
        sorg[0, j] = 0.0
    for j in range(9):
        srot[0, j] = 1.0 if j % 4 == 0 else 0.0
    slb[0] = 0.0
    sdep[0] = 0
    top = 1
    while top > 0:
        top -= 1
        if slb[top] >= best2:
            continue
        d = sdep[top]
        sc = scale_at[d]
        ox = sorg[top, 0]; oy = sorg[top, 1]; oz = sorg[top, 2]
        r00 = srot[top, 0]; r01 = srot[top, 1]; r02 = srot[top, 2]
        r10 = srot[top, 3]; r11 = srot[top, 4]; r12 = srot[top, 5]
        r20 = srot[top, 6]; r21 = srot[top, 7]; r22 = srot[top, 8]
        dx = px - ox; dy = py - oy; dz = pz - oz
        u = (r00 * dx + r10 * dy + r20 * dz) / sc
        v = (r01 * dx + r11 * dy + r21 * dz) / sc
        w = (r02 * dx + r12 * dy + r22 * dz) / sc
        if d == g:
            tu = min(max(u, 0.0), 1.0)
            tv = min(max(v, 0.0), 1.0)
            du = u - tu; dv = v - tv
            dist2 = sc * sc * (du * du + dv * dv + w * w)
            if dist2 < best2:
                best2 = dist2
            continue
        sc2 = scale_at[d + 1]
        base = top
        n_new = 0
        for i in range(k):
            cox = ox + sc * (r00 * gorg[i, 0] + r01 * gorg[i, 1] + r02 * gorg[i, 2])
            coy = oy + sc * (r10 * gorg[i, 0] + r11 * gorg[i, 1] + r12 * gorg[i, 2])
            coz = oz + sc * (r20 * gorg[i, 0] + r21 * gorg[i, 1] + r22 * gorg[i, 2])
            c00 = r00 * grot[i, 0] + r01 * grot[i, 3] + r02 * grot[i, 6]
            c01 = r00 * grot[i, 1] + r01 * grot[i, 4] + r02 * grot[i, 7]
            c02 = r00 * grot[i, 2] + r01 * grot[i, 5] + r02 * grot[i, 8]
            c10 = r10 * grot[i, 0] + r11 * grot[i, 3] + r12 * grot[i, 6]
            c11 = r10 * grot[i, 1] + r11 * grot[i, 4] + r12 * grot[i, 7]
            c12 = r10 * grot[i, 2] + r11 * grot[i, 5] + r12 * grot[i, 8]
            c20 = r20 * grot[i, 0] + r21 * grot[i, 3] + r22 * grot[i, 6]
            c21 = r20 * grot[i, 1] + r21 * grot[i, 4] + r22 * grot[i, 7]
            c22 = r20 * grot[i, 2] + r21 * grot[i, 5] + r22 * grot[i, 8]
            ddx = px - cox; ddy = py - coy; ddz = pz - coz
            uu = (c00 * ddx + c10 * ddy + c20 * ddz) / sc2
            vv = (c01 * ddx + c11 * ddy + c21 * ddz) / sc2
            ww = (c02 * ddx + c12 * ddy + c22 * ddz) / sc2
            ex = max(max(box[0] - uu, uu - box[1]), 0.0)
            ey = max(max(box[2] - vv, vv - box[3]), 0.0)
            ez = max(max(box[4] - ww, ww - box[5]), 0.0)
            lb2 = sc2 * sc2 * (ex * ex + ey * ey + ez * ez)
            if lb2 >= best2:
                continue
            j = base + n_new
            while j > base and slb[j - 1] < lb2:
                for m in range(3):
                    sorg[j, m] = sorg[j - 1, m]
                for m in range(9):
                    srot[j, m] = srot[j - 1, m]
                slb[j] = slb[j - 1]; sdep[j] = sdep[j - 1]
                j -= 1
            sorg[j, 0] = cox; sorg[j, 1] = coy; sorg[j, 2] = coz
            srot[j, 0] = c00; srot[j, 1] = c01; srot[j, 2] = c02
            srot[j, 3] = c10; srot[j, 4] = c11; srot[j, 5] = c12
            srot[j, 6] = c20; srot[j, 7] = c21; srot[j, 8] = c22
            slb[j] = lb2; sdep[j] = d + 1
            n_new += 1
        top = base + n_new
    return np.sqrt(best2)


@njit(cache=True)
def _near3d(px, py, pz, depth, k, g, gorg, grot, scale_at, box,
            sorg, srot, slb, sdep, sadr):
    best2 = 1e300
    best_addr = np.int64(-1)
    bq = np.zeros(3)
    bn = np.zeros(3)
    bn[2] = 1.0
    for j in range(3):
        sorg[0, j] = 0.0
    for j in range(9):
        srot[0, j] = 1.0 if j % 4 == 0 else 0.0
    slb[0] = 0.0
    sdep[0] = 0
    sadr[0] = 0
    top = 1
    while top > 0:
        top -= 1
        if slb[top] > best2:
            continue
        d = sdep[top]
        sc = scale_at[d]
        ox = sorg[top, 0]; oy = sorg[top, 1]; oz = sorg[top, 2]
        r00 = srot[top, 0]; r01 = srot[top, 1]; r02 = srot[top, 2]
        r10 = srot[top, 3]; r11 = srot[top, 4]; r12 = srot[top, 5]
        r20 = srot[top, 6]; r21 = srot[top, 7]; r22 = srot[top, 8]
        addr = sadr[top]
        dx = px - ox; dy = py - oy; dz = pz - oz
        u = (r00 * dx + r10 * dy + r20 * dz) / sc
        v = (r01 * dx + r11 * dy + r21 * dz) / sc
        w = (r02 * dx + r12 * dy + r22 * dz) / sc
        if d == depth:
            tu = min(max(u, 0.0), 1.0)
            tv = min(max(v, 0.0), 1.0)
            du = u - tu; dv = v - tv
            dist2 = sc * sc * (du * du + dv * dv + w * w)
            if dist2 < best2 or (dist2 == best2 and addr < best_addr):
                best2 = dist2
                best_addr = addr
                bq[0] = ox + sc * (r00 * tu + r01 * tv)
                bq[1] = oy + sc * (r10 * tu + r11 * tv)
                bq[2] = oz + sc * (r20 * tu + r21 * tv)
                bn[0] = r02; bn[1] = r12; bn[2] = r22
            continue
        sc2 = scale_at[d + 1]
        base = top
        n_new = 0
        for i in range(k):
            cox = ox + sc * (r00 * gorg[i, 0] + r01 * gorg[i, 1] + r02 * gorg[i, 2])
            coy = oy + sc * (r10 * gorg[i, 0] + r11 * gorg[i, 1] + r12 * gorg[i, 2])
            coz = oz + sc * (r20 * gorg[i, 0] + r21 * gorg[i, 1] + r22 * gorg[i, 2])
            c00 = r00 * grot[i, 0] + r01 * grot[i, 3] + r02 * grot[i, 6]
            c01 = r00 * grot[i, 1] + r01 * grot[i, 4] + r02 * grot[i, 7]
            c02 = r00 * grot[i, 2] + r01 * grot[i, 5] + r02 * grot[i, 8]
            c10 = r10 * grot[i, 0] + r11 * grot[i, 3] + r12 * grot[i, 6]
            c11 = r10 * grot[i, 1] + r11 * grot[i, 4] + r12 * grot[i, 7]
            c12 = r10 * grot[i, 2] + r11 * grot[i, 5] + r12 * grot[i, 8]
            c20 = r20 * grot[i, 0] + r21 * grot[i, 3] + r22 * grot[i, 6]
            c21 = r20 * grot[i, 1] + r21 * grot[i, 4] + r22 * grot[i, 7]
            c22 = r20 * grot[i, 2] + r21 * grot[i, 5] + r22 * grot[i, 8]
            ddx = px - cox; ddy = py - coy; ddz = pz - coz
            uu = (c00 * ddx + c10 * ddy + c20 * ddz) / sc2
            vv = (c01 * ddx + c11 * ddy + c21 * ddz) / sc2
            ww = (c02 * ddx + c12 * ddy + c22 * ddz) / sc2
            ex = max(max(box[0] - uu, uu - box[1]), 0.0)
            ey = max(max(box[2] - vv, vv - box[3]), 0.0)
            ez = max(max(box[4] - ww, ww - box[5]), 0.0)
            lb2 = sc2 * sc2 * (ex * ex + ey * ey + ez * ez)
            if lb2 > best2:
                continue
            ca = addr * k + i
            j = base + n_new
            while j > base and (slb[j - 1] < lb2 or (slb[j - 1] == lb2 and sadr[j - 1] < ca)):
                for m in range(3):
                    sorg[j, m] = sorg[j - 1, m]
                for m in range(9):
                    srot[j, m] = srot[j - 1, m]
                slb[j] = slb[j - 1]; sdep[j] = sdep[j - 1]; sadr[j] = sadr[j - 1]
                j -= 1
            sorg[j, 0] = cox; sorg[j, 1] = coy; sorg[j, 2] = coz
            srot[j, 0] = c00; srot[j, 1] = c01; srot[j, 2] = c02
            srot[j, 3] = c10; srot[j, 4] = c11; srot[j, 5] = c12
            srot[j, 6] = c20; srot[j, 7] = c21; srot[j, 8] = c22
            slb[j] = lb2; sdep[j] = d + 1; sadr[j] = ca
            n_new += 1
        top = base + n_new
    return best2, best_addr, bq[0], bq[1], bq[2], bn[0], bn[1], bn[2]


def _stacks3d(k, g):
    cap = max(8, k * (g + 2) + 1)
    return (
        np.empty((cap, 3)), np.empty((cap, 9)), np.empty(cap),
        np.empty(cap, dtype=np.int64), np.empty(cap, dtype=np.int64),
    )


def nearest3d_py(px, py, pz, depth, k, g, gorg, grot, scale_at, box):
    sorg, srot, slb, sdep, sadr = _stacks3d(k, g)
    b2, addr, qx, qy, qz, nx, ny, nz = _near3d(
        px, py, pz, depth, k, g, gorg, grot, scale_at, box,
        sorg, srot, slb, sdep, sadr)
    return np.sqrt(b2), addr, qx, qy, qz, nx, ny, nz


@njit(cache=True)
def _traj3d(sx, sy, sz, rng, k, g, gorg, grot, scale_at, box,
            width, ztop, lid,
            eps, aoff, sigma, max_steps, dcoef,
            qtab, tail_a, tail_lam, u_cut, use_alive, alive,
            sorg, srot, slb, sdep, sadr):
    x = sx; y = sy; z = sz
    t = 0.0
    steps = 0
    refl = 0
    d = _dist3d(x, y, z, 1e300, k, g, gorg, grot, scale_at, box,
                sorg, srot, slb, sdep)
    while True:
        if d < eps:
            b2, addr, qx, qy, qz, nx, ny, nz = _near3d(
                x, y, z, g, k, g, gorg, grot, scale_at, box,
                sorg, srot, slb, sdep, sadr)
            absorb = True
            if use_alive == 1:
                absorb = alive[addr] != 0
            elif sigma < 1.0:
                absorb = _u01(rng) < sigma
            if absorb:
                return 1, t, x, y, z, steps, refl, addr
            refl += 1
            x = _fold(qx + nx * aoff, width)
            y = _fold(qy + ny * aoff, width)
            z = qz + nz * aoff
            if z > lid:
                z = 2.0 * lid - z
            d = _dist3d(x, y, z, aoff, k, g, gorg, grot, scale_at, box,
                        sorg, srot, slb, sdep)
            continue
        if steps >= max_steps:
            return 0, t, x, y, z, steps, refl, np.int64(-1)
        rho = d
        cap = 2.0 * lid - z - ztop
        if rho > cap:
            rho = cap
        zz = 2.0 * _u01(rng) - 1.0
        phi = TWO_PI * _u01(rng)
        rxy = np.sqrt(max(0.0, 1.0 - zz * zz))
        x += rho * rxy * np.cos(phi)
        y += rho * rxy * np.sin(phi)
        z += rho * zz
        t += rho * rho / dcoef * _sample_tau(rng, qtab, tail_a, tail_lam, u_cut)
        steps += 1
        x = _fold(x, width)
        y = _fold(y, width)
        if z > lid:
            z = 2.0 * lid - z
        d = _dist3d(x, y, z, d + rho, k, g, gorg, grot, scale_at, box,
                    sorg, srot, slb, sdep)


@njit(cache=True, parallel=True)
def ensemble_hist3d(n_traj, seed, k, g, gorg, grot, scale_at, box,
                    width, ztop, lid,
                    eps, aoff, sigma, max_steps, dcoef,
                    qtab, tail_a, tail_lam, u_cut,
                    use_alive, alive, src_kind, src_cum, src_off,
                    bin_div, n_chunks, hist_buf, stat_buf):
    for cidx in prange(n_chunks):
        sorg, srot, slb, sdep, sadr = (
            np.empty((k * (g + 2) + 1, 3)), np.empty((k * (g + 2) + 1, 9)),
            np.empty(k * (g + 2) + 1), np.empty(k * (g + 2) + 1, dtype=np.int64),
            np.empty(k * (g + 2) + 1, dtype=np.int64))
        rng = np.empty(4, dtype=np.uint64)
        lo = cidx * n_traj // n_chunks
        hi = (cidx + 1) * n_traj // n_chunks
        for idx in range(lo, hi):
            _rng_init(seed, idx, rng)
            if src_kind == 0:
                sx = _u01(rng) * width
                sy = _u01(rng) * width
                sz = lid
            else:
                ncell = np.int64(k) ** np.int64(g)
                if src_kind == 1:
                    addr = np.int64(_u01(rng) * ncell)
                    if addr >= ncell:
                        addr = ncell - 1
                else:
                    u = _u01(rng)
                    lo2 = 0
                    hi2 = src_cum.shape[0] - 1
                    while lo2 < hi2:
                        mid = (lo2 + hi2) // 2
                        if src_cum[mid] < u:
                            lo2 = mid + 1
                        else:
                            hi2 = mid
                    addr = np.int64(lo2)
                # compose leaf frame
                ox = 0.0; oy = 0.0; oz = 0.0
                r00 = 1.0; r01 = 0.0; r02 = 0.0
                r10 = 0.0; r11 = 1.0; r12 = 0.0
                r20 = 0.0; r21 = 0.0; r22 = 1.0
                if g > 0:
                    p = np.int64(k) ** np.int64(g - 1)
                    a = addr
                    for dd in range(g):
                        i = (a // p) % k
                        sc = scale_at[dd]
                        nox = ox + sc * (r00 * gorg[i, 0] + r01 * gorg[i, 1] + r02 * gorg[i, 2])
                        noy = oy + sc * (r10 * gorg[i, 0] + r11 * gorg[i, 1] + r12 * gorg[i, 2])
                        noz = oz + sc * (r20 * gorg[i, 0] + r21 * gorg[i, 1] + r22 * gorg[i, 2])
                        c00 = r00 * grot[i, 0] + r01 * grot[i, 3] + r02 * grot[i, 6]
                        c01 = r00 * grot[i, 1] + r01 * grot[i, 4] + r02 * grot[i, 7]
                        c02 = r00 * grot[i, 2] + r01 * grot[i, 5] + r02 * grot[i, 8]
                        c10 = r10 * grot[i, 0] + r11 * grot[i, 3] + r12 * grot[i, 6]
                        c11 = r10 * grot[i, 1] + r11 * grot[i, 4] + r12 * grot[i, 7]
                        c12 = r10 * grot[i, 2] + r11 * grot[i, 5] + r12 * grot[i, 8]
                        c20 = r20 * grot[i, 0] + r21 * grot[i, 3] + r22 * grot[i, 6]
                        c21 = r20 * grot[i, 1] + r21 * grot[i, 4] + r22 * grot[i, 7]
                        c22 = r20 * grot[i, 2] + r21 * grot[i, 5] + r22 * grot[i, 8]
                        ox = nox; oy = noy; oz = noz
                        r00 = c00; r01 = c01; r02 = c02
                        r10 = c10; r11 = c11; r12 = c12
                        r20 = c20; r21 = c21; r22 = c22
                        if p > 1:
                            p //= k
                sc = scale_at[g]
                uu = _u01(rng); vv = _u01(rng)
                sx = _fold(ox + sc * (r00 * uu + r01 * vv) + r02 * src_off, width)
                sy = _fold(oy + sc * (r10 * uu + r11 * vv) + r12 * src_off, width)
                sz = oz + sc * (r20 * uu + r21 * vv) + r22 * src_off
            st, t, x, y, z, steps, refl, addr2 = _traj3d(
                sx, sy, sz, rng, k, g, gorg, grot, scale_at, box,
                width, ztop, lid, eps, aoff, sigma, max_steps, dcoef,
                qtab, tail_a, tail_lam, u_cut, use_alive, alive,
                sorg, srot, slb, sdep, sadr)
            if st == 1:
                hist_buf[cidx, addr2 // bin_div] += 1
                stat_buf[cidx, 0] += 1.0
                stat_buf[cidx, 4] += t
            else:
                stat_buf[cidx, 1] += 1.0
            stat_buf[cidx, 2] += steps
            stat_buf[cidx, 3] += refl


# ----------------------------------------------------------------------
# Fixed-step oracle walks (test oracles; deliberately not walk-on-spheres)
# ----------------------------------------------------------------------

@njit(cache=True, parallel=True)
def disk_exit_times(n_traj, seed, tau, out):
    """First-exit times of fixed-step Brownian walks from the unit disk."""
    sig = np.sqrt(2.0 * tau)
    for idx in prange(n_traj):
        rng = np.empty(4, dtype=np.uint64)
        _rng_init(seed, idx, rng)
        x = 0.0
        y = 0.0
        t = 0.0
        while x * x + y * y < 1.0:
            g1, g2 = _gauss_pair(rng)
            x += sig * g1
            y += sig * g2
            t += tau
        out[idx] = t


@njit(cache=True, parallel=True)
def interval_local_time(n_traj, seed, tau, n_pairs, w1, w2, occ1, occ2):
    """Reflected walk on [0,1]: occupation of boundary bands of width w1, w2.

    Runs 2*n_pairs steps.  Band time is normalized by the band width so
    that Richardson extrapolation 2*occ(w1) - occ(w2) with w2 = 2*w1
    removes the leading finite-width bias of the boundary local time.
    """
    sig = np.sqrt(2.0 * tau)
    for idx in prange(n_traj):
        rng = np.empty(4, dtype=np.uint64)
        _rng_init(seed, idx, rng)
        x = _u01(rng)
        a1 = 0.0
        a2 = 0.0
        for _p in range(n_pairs):
            g1, g2 = _gauss_pair(rng)
            x += sig * g1
            while x < 0.0 or x > 1.0:
                if x < 0.0:
                    x = -x
                else:
                    x = 2.0 - x
            if x < w1 or x > 1.0 - w1:
                a1 += tau
                a2 += tau
            elif x < w2 or x > 1.0 - w2:
                a2 += tau
            x += sig * g2
            while x < 0.0 or x > 1.0:
                if x < 0.0:
                    x = -x
                else:
                    x = 2.0 - x
            if x < w1 or x > 1.0 - w1:
                a1 += tau
                a2 += tau
            elif x < w2 or x > 1.0 - w2:
                a2 += tau
        occ1[idx] = a1 / w1
        occ2[idx] = a2 / w2


@njit(cache=True, parallel=True)
def interval_window_residence(n_traj, seed, tau, n_pairs, x_lo, x_hi,
                              k_lo, k_hi, out):
    """Reflected walk on [0,1]: time in [x_lo,x_hi] during steps [k_lo,k_hi).

    Runs 2*n_pairs steps; the residence clock uses the pre-step position.
    """
    sig = np.sqrt(2.0 * tau)
    for idx in prange(n_traj):
        rng = np.empty(4, dtype=np.uint64)
        _rng_init(seed, idx, rng)
        x = _u01(rng)
        acc = 0.0
        step = 0
        for _p in range(n_pairs):
            g1, g2 = _gauss_pair(rng)
            if step >= k_lo and step < k_hi and x_lo <= x <= x_hi:
                acc += tau
            step += 1
            x += sig * g1
            while x < 0.0 or x > 1.0:
                if x < 0.0:
                    x = -x
                else:
                    x = 2.0 - x
            if step >= k_lo and step < k_hi and x_lo <= x <= x_hi:
                acc += tau
            step += 1
            x += sig * g2
            while x < 0.0 or x > 1.0:
                if x < 0.0:
                    x = -x
                else:
                    x = 2.0 - x
        out[idx] = acc


# ----------------------------------------------------------------------
# Labyrinth (grid-cell) off-lattice walks with phase accumulation
# ----------------------------------------------------------------------

@njit(cache=True)
def _move_reflect(x, y, z, ix, iy, iz, dx, dy, dz, edge, n,
                  open_x, open_y, open_z):
    """Advance one Gaussian step with specular reflection on closed faces.

    Returns (x, y, z, ix, iy, iz, ok); ok = 0 when the reflection budget
    (64) was exhausted and the step must be redrawn.
    """
    for _ in range(64):
        tx = 2.0
        if dx > 0.0:
            tx = ((ix + 1) * edge - x) / dx
        elif dx < 0.0:
            tx = (ix * edge - x) / dx
        ty = 2.0
        if dy > 0.0:
            ty = ((iy + 1) * edge - y) / dy
        elif dy < 0.0:
            ty = (iy * edge - y) / dy
        tz = 2.0
        if dz > 0.0:
            tz = ((iz + 1) * edge - z) / dz
        elif dz < 0.0:
            tz = (iz * edge - z) / dz
        tmin = min(tx, min(ty, tz))
        if tmin >= 1.0:
            return x + dx, y + dy, z + dz, ix, iy, iz, 1
        if tmin < 0.0:
            tmin = 0.0
        rem = 1.0 - tmin
        x += tmin * dx
        y += tmin * dy
        z += tmin * dz
        if tx <= ty and tx <= tz:
            plane = ix + 1 if dx > 0.0 else ix
            x = plane * edge
            if open_x[plane, iy, iz]:
                ix += 1 if dx > 0.0 else -1
                dx *= rem; dy *= rem; dz *= rem
            else:
                dx = -dx * rem; dy *= rem; dz *= rem
        elif ty <= tz:
            plane = iy + 1 if dy > 0.0 else iy
            y = plane * edge
            if open_y[ix, plane, iz]:
                iy += 1 if dy > 0.0 else -1
                dx *= rem; dy *= rem; dz *= rem
            else:
                dy = -dy * rem; dx *= rem; dz *= rem
        else:
            plane = iz + 1 if dz > 0.0 else iz
            z = plane * edge
            if open_z[ix, iy, plane]:
                iz += 1 if dz > 0.0 else -1
                dx *= rem; dy *= rem; dz *= rem
            else:
                dz = -dz * rem; dx *= rem; dy *= rem
    return x, y, z, ix, iy, iz, 0


@njit(cache=True, parallel=True)
def labyrinth_phases(n_traj, seed, n, edge, open_x, open_y, open_z,
                     tau, f_arr, phases, rejected):
    """Phase integrals (unit gradient, per axis) for off-lattice walks.

    ``phases``: float64[n_traj, 3]; ``rejected``: int64[n_chunks] step
    redraw counter.
    """
    n_steps = f_arr.shape[0]
    L = n * edge
    nch = rejected.shape[0]
    sig = np.sqrt(2.0 * tau)
    for cidx in prange(nch):
        rng = np.empty(4, dtype=np.uint64)
        lo = cidx * n_traj // nch
        hi = (cidx + 1) * n_traj // nch
        for idx in range(lo, hi):
            _rng_init(seed, idx, rng)
            x = _u01(rng) * L
            y = _u01(rng) * L
            z = _u01(rng) * L
            ix = min(int(x / edge), n - 1)
            iy = min(int(y / edge), n - 1)
            iz = min(int(z / edge), n - 1)
            px = 0.0; py = 0.0; pz = 0.0
            spare = 0.0
            have_spare = False
            for step in range(n_steps):
                fk = f_arr[step]
                px += tau * fk * x
                py += tau * fk * y
                pz += tau * fk * z
                while True:
                    if have_spare:
                        g1 = spare
                        g2, g3 = _gauss_pair(rng)
                        have_spare = False
                    else:
                        g1, g2 = _gauss_pair(rng)
                        g3, spare = _gauss_pair(rng)
                        have_spare = True
                    dx = sig * g1
                    dy = sig * g2
                    dz = sig * g3
                    # fast path: the step stays inside the current cell
                    tx = x + dx
                    ty = y + dy
                    tz = z + dz
                    if (ix * edge < tx < (ix + 1) * edge
                            and iy * edge < ty < (iy + 1) * edge
                            and iz * edge < tz < (iz + 1) * edge):
                        x = tx; y = ty; z = tz
                        break
                    nx, ny, nz2, nix, niy, niz, ok = _move_reflect(
                        x, y, z, ix, iy, iz, dx, dy, dz,
                        edge, n, open_x, open_y, open_z)
                    if ok == 1:
                        x = nx; y = ny; z = nz2
                        ix = nix; iy = niy; iz = niz
                        break
                    rejected[cidx] += 1
            phases[idx, 0] = px
            phases[idx, 1] = py
            phases[idx, 2] = pz
