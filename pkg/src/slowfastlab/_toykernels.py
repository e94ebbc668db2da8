"""Compiled inner loops for the dyadic base with the built-in forcing family.

Every kernel replays exactly the orbit and the floating-point arithmetic of
its generic pure-Python counterpart in :mod:`slowfastlab.slowfast` — same
register updates, same tick rounding, same operation order inside the
Runge-Kutta stages and quadrature sums — so the compiled and interpreted
paths agree to the last bit.  For that reason fastmath stays off and the
expressions below must not be reassociated.

Trajectories receive their refresh words as pre-drawn arrays (the caller
extends each orbit tape far enough); a kernel that would read past the end
reports failure instead of guessing.

Family parameter vector layout (float64, length 14):
    [0:4]  a0, a1, a2, a3   slow factor a0 + a1*sin(a2*x + a3)
    [4:8]  g0, g1, g2, g3   offset term g0 + g1*sin(g2*x + g3)
    [8:11] b0, b1, b2       fiber observable coefficients
    [11]   q                fiber-profile amplitude
    [12]   p                cell-envelope decay exponent
    [13]   cutoff           cell cutoff (-1 for none)
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi
TICK = 2.0 ** -32
TWO_NEG64 = 2.0 ** -64
TPU_F = 4294967296.0  # 2**32 as float
MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
TOP_HALF = np.uint64(2 ** 63)
ONE_U = np.uint64(1)
REFRESH_PERIOD = 50
REFRESH_MASK = np.uint64((1 << 50) - 1)


@njit(cache=True, nogil=True)
def _advance(reg, stepk, words, n_words):
    """One dyadic base step: shift, count, refresh low bits on schedule."""
    reg2 = (reg << ONE_U) & MASK64
    step2 = stepk + 1
    if step2 % REFRESH_PERIOD == 0:
        widx = step2 // REFRESH_PERIOD
        if widx >= n_words:
            return reg2, step2, False
        reg2 = reg2 | (words[widx] & REFRESH_MASK)
    return reg2, step2, True


@njit(cache=True, nogil=True)
def _rhs(x, s, ub, wm, tau, fam):
    """Full slow right-hand side f + fbar at slow value x, fiber coord s."""
    fb = fam[4] + fam[5] * math.sin(fam[6] * x + fam[7])
    if wm == 0.0:
        return fb
    u = ub
    q = fam[11]
    if q != 0.0:
        u = u + q * math.sin(TWO_PI * s / tau)
    a = fam[0] + fam[1] * math.sin(fam[2] * x + fam[3])
    return a * wm * u + fb


@njit(cache=True, nogil=True)
def _fiber_base(reg, cell, alpha, fam):
    """Per-fiber cache: coordinate, raw roof, roof ticks, step sign,
    fiber-observable trig part, cell weight."""
    xv = reg * TWO_NEG64
    tau = 1.0 + alpha * math.sin(TWO_PI * xv)
    tt = np.int64(np.rint(tau * TPU_F))
    dphi = 1 if reg < TOP_HALF else -1
    ub = fam[8] + fam[9] * math.cos(TWO_PI * xv) + fam[10] * math.sin(TWO_PI * xv)
    cm = cell if cell >= 0 else -cell
    if fam[13] >= 0.0 and cm > fam[13]:
        wm = 0.0
    else:
        wm = (1.0 + cm) ** (-fam[12])
    return tau, tt, dphi, ub, wm


@njit(cache=True, nogil=True)
def _one_perturbed(words, reg0, h0, cell0, x0, eps, rec, dt, alpha, fam,
                   out_row):
    n_rec = rec.shape[0]
    n_words = words.shape[0]
    S = rec[n_rec - 1]
    x = x0
    reg = reg0
    stepk = 0
    cell = cell0
    tau, tt, dphi, ub, wm = _fiber_base(reg, cell, alpha, fam)
    tau_f = tt * TICK
    s_b = h0 * TICK
    t_enter = 0.0
    t_cross = t_enter + eps * (tau_f - s_b)
    ri = 0
    while ri < n_rec and rec[ri] <= 0.0:
        out_row[ri] = x
        ri += 1
    tcur = 0.0
    while ri < n_rec or tcur < S:
        t_stop = rec[ri] if ri < n_rec else S
        t_end = t_cross if t_cross < t_stop else t_stop
        seg = t_end - tcur
        if seg > 0.0:
            nsub = int(math.ceil(seg / dt - 1e-9))
            if nsub < 1:
                nsub = 1
            h = seg / nsub
            sb = s_b + (tcur - t_enter) / eps
            hs = h / eps
            for _ in range(nsub):
                s_mid = sb + 0.5 * hs
                s_end = sb + hs
                k1 = _rhs(x, sb, ub, wm, tau, fam)
                xa = x + (0.5 * h) * k1
                k2 = _rhs(xa, s_mid, ub, wm, tau, fam)
                xb = x + (0.5 * h) * k2
                k3 = _rhs(xb, s_mid, ub, wm, tau, fam)
                xc = x + h * k3
                k4 = _rhs(xc, s_end, ub, wm, tau, fam)
                x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
                sb = s_end
        tcur = t_end
        if t_end == t_cross:
            reg2, step2, fine = _advance(reg, stepk, words, n_words)
            if not fine:
                return False
            cell += dphi
            reg = reg2
            stepk = step2
            tau, tt, dphi, ub, wm = _fiber_base(reg, cell, alpha, fam)
            tau_f = tt * TICK
            t_enter = t_cross
            s_b = 0.0
            t_cross = t_enter + eps * (tau_f - s_b)
        if ri < n_rec and t_end == rec[ri]:
            out_row[ri] = x
            ri += 1
        if ri >= n_rec and tcur >= S:
            break
    return True


def perturbed_paths(words, regs, h0, cells, x0, eps, rec, dt, alpha, fam):
    """Ensemble of slow paths; returns (values (n, n_rec), ok flags (n,))."""
    n = regs.shape[0]
    out = np.empty((n, rec.shape[0]))
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        ok[i] = _one_perturbed(words[i], regs[i], np.int64(h0[i]),
                               np.int64(cells[i]), float(x0), float(eps),
                               rec, float(dt), float(alpha), fam, out[i])
    return out, ok


@njit(cache=True, nogil=True)
def _one_moving(words, reg0, h0, cell0, x0, eps, targets, alpha, fam,
                nodes, wts, out_row):
    n_words = words.shape[0]
    n_nodes = nodes.shape[0]
    reg = reg0
    stepk = 0
    cell = cell0
    tau, tt, dphi, ub, wm = _fiber_base(reg, cell, alpha, fam)
    tau_f = tt * TICK
    s_cur = h0 * TICK
    t_glob = 0.0
    cum = 0.0
    q = fam[11]
    for j in range(targets.shape[0]):
        tgt = targets[j]
        while t_glob + (tau_f - s_cur) <= tgt:
            if tau_f > s_cur:
                L = tau_f - s_cur
                acc = 0.0
                for k in range(n_nodes):
                    s = s_cur + nodes[k] * L
                    sg = t_glob + (s - s_cur)
                    xval = x0 + eps * sg
                    if wm == 0.0:
                        fv = 0.0
                    else:
                        u = ub
                        if q != 0.0:
                            u = u + q * math.sin(TWO_PI * s / tau)
                        aslow = fam[0] + fam[1] * math.sin(fam[2] * xval + fam[3])
                        fv = aslow * wm * u
                    acc += (wts[k] * L) * fv
                cum += acc
            t_glob += tau_f - s_cur
            reg2, step2, fine = _advance(reg, stepk, words, n_words)
            if not fine:
                return False
            cell += dphi
            reg = reg2
            stepk = step2
            tau, tt, dphi, ub, wm = _fiber_base(reg, cell, alpha, fam)
            tau_f = tt * TICK
            s_cur = 0.0
        rem = tgt - t_glob
        if rem > 0.0:
            L = rem
            acc = 0.0
            for k in range(n_nodes):
                s = s_cur + nodes[k] * L
                sg = t_glob + (s - s_cur)
                xval = x0 + eps * sg
                if wm == 0.0:
                    fv = 0.0
                else:
                    u = ub
                    if q != 0.0:
                        u = u + q * math.sin(TWO_PI * s / tau)
                    aslow = fam[0] + fam[1] * math.sin(fam[2] * xval + fam[3])
                    fv = aslow * wm * u
                acc += (wts[k] * L) * fv
            cum += acc
            s_cur += rem
            t_glob = tgt
        out_row[j] = cum
    return True


def moving_orbit_integrals(words, regs, h0, cells, x0, eps, targets, alpha,
                           fam, nodes, wts):
    """Ensemble of raw moving-argument orbit integrals on a fast-time grid.

    Returns (values (n, n_targets), ok flags); the diffusive scaling is
    applied by the caller.
    """
    n = regs.shape[0]
    out = np.empty((n, targets.shape[0]))
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        ok[i] = _one_moving(words[i], regs[i], np.int64(h0[i]),
                            np.int64(cells[i]), float(x0), float(eps),
                            targets, float(alpha), fam, nodes, wts, out[i])
    return out, ok


@njit(cache=True, nogil=True)
def _one_displacement(words, reg0, target_ticks, alpha):
    n_words = words.shape[0]
    reg = reg0
    stepk = 0
    xv = reg * TWO_NEG64
    tau = 1.0 + alpha * math.sin(TWO_PI * xv)
    clock = np.int64(np.rint(tau * TPU_F))
    dphi = 1 if reg < TOP_HALF else -1
    s_phi = 0
    while clock <= target_ticks:
        s_phi += dphi
        reg2, step2, fine = _advance(reg, stepk, words, n_words)
        if not fine:
            return 0, False
        reg = reg2
        stepk = step2
        xv = reg * TWO_NEG64
        tau = 1.0 + alpha * math.sin(TWO_PI * xv)
        clock += np.int64(np.rint(tau * TPU_F))
        dphi = 1 if reg < TOP_HALF else -1
    return s_phi, True


def displacements(words, regs, target_ticks, alpha):
    """Signed cells crossed by suspension time target_ticks from the section.

    Returns (counts (n,) int64, ok flags (n,)).
    """
    n = regs.shape[0]
    out = np.empty(n, dtype=np.int64)
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        out[i], ok[i] = _one_displacement(words[i], regs[i],
                                          np.int64(target_ticks),
                                          float(alpha))
    return out, ok
