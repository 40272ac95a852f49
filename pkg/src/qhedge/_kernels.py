"""Compiled inner loops.

Everything here works on plain arrays so that the Python layers stay
readable.  Index conventions:

* ``jj`` runs over interior nodes ``j = -N+1 .. N-1`` as ``jj = j + N - 1``;
* stencil offsets ``l = -I .. I`` are stored at column ``l + I``;
* padded value vectors cover ``j = -N-I .. N+I`` at position ``j + N + I``.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .levy import nu_scalar


@njit(cache=True)
def level_weights(s, kind, params, kappa, I, dz,
                  psi_int, dpsi_int, psi_cell, dpsi_cell, psi_core, dpsi_core,
                  m_first, cell_x, cell_w, core_u, core_fac,
                  omega, D, comp):
    """Jump weights, small-jump variance and drift compensator for one level.

    The jump of the log price is ``w``; the driver jump producing it is
    ``y(w) = s * (Psi(z + w) - Psi(z))`` with ``dy/dw = s * Psi'(z + w)``.
    Lattice arrays are indexed by ``m`` with node ``jj`` sitting at
    ``m = m_first + jj``; ``psi_cell[m, k]`` holds ``Psi`` at
    ``z_m + cell_x[k] * dz / 2``.  ``psi_core[jj, side, k]`` holds ``Psi`` at
    ``z_jj +/- W * core_u[k]`` with ``W = (kappa + 1/2) dz``.
    """
    n_nodes = omega.shape[0]
    n_cell = cell_x.shape[0]
    n_core = core_u.shape[0]
    half = 0.5 * dz
    width = (kappa + 0.5) * dz
    for jj in range(n_nodes):
        m0 = m_first + jj
        p0 = psi_int[m0]
        g0 = 1.0 / (s * dpsi_int[m0])  # gamma_y(t, z, 0)
        cmp_sum = 0.0
        for side in (1, -1):
            # first index whose integration point reaches |y| >= 1; the slack keeps
            # points that sit on |y| = 1 up to rounding on the same side of the split
            zeta = I + 1
            for i in range(1, I + 1):
                yi = s * (psi_int[m0 + side * i] - p0)
                if abs(yi) >= 1.0 - 1e-9:
                    zeta = i
                    break
            for i in range(kappa + 1, I + 1):
                mm = m0 + side * i
                mass = 0.0
                mom2 = 0.0
                for k in range(n_cell):
                    w = (side * i + cell_x[k] * 0.5) * dz
                    y = s * (psi_cell[mm, k] - p0)
                    f = nu_scalar(kind, params, y) * s * dpsi_cell[mm, k] * cell_w[k] * half
                    mass += f
                    mom2 += w * w * f
                    cmp_sum += (w - y * g0) * f
                if i <= zeta:
                    omega[jj, I + side * i] = mom2 / ((i * dz) ** 2)
                else:
                    omega[jj, I + side * i] = mass
            # small jumps |w| <= W on this side
            sd = 0 if side == 1 else 1
            dvar = 0.0
            for k in range(n_core):
                w = side * width * core_u[k]
                y = s * (psi_core[jj, sd, k] - p0)
                f = nu_scalar(kind, params, y) * s * dpsi_core[jj, sd, k] * core_fac[k]
                dvar += w * w * f
                cmp_sum += (w - y * g0) * f
            D[jj] += dvar
        comp[jj] = cmp_sum


@njit(cache=True)
def stencil_sums(omega, chi, ups, vals, e1, e2, I, N, out0, out1, out2):
    """Stencil moments of padded value vectors at every interior node.

    For each row ``v`` of ``vals`` and interior node ``j``:

    * ``out0`` jump part ``sum_l omega_l (v_{j+l} - v_j)``;
    * ``out1`` ``sum_l r_l e_l v_{j+l}``;
    * ``out2`` ``sum_l r_l e_l^2 v_{j+l}``;

    where ``r`` is ``omega`` plus ``chi``/``ups`` at ``l = +1/-1`` and
    ``e_l = exp(l dz) - 1``.
    """
    n_f = vals.shape[0]
    n_nodes = omega.shape[0]
    for jj in range(n_nodes):
        p = jj + 1 + I  # padded position of node jj
        for f in range(n_f):
            vj = vals[f, p]
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for c in range(2 * I + 1):
                r = omega[jj, c]
                if r == 0.0:
                    continue
                v = vals[f, p + c - I]
                s0 += r * (v - vj)
                s1 += r * e1[c] * v
                s2 += r * e2[c] * v
            vp = vals[f, p + 1]
            vm = vals[f, p - 1]
            s1 += chi[jj] * e1[I + 1] * vp + ups[jj] * e1[I - 1] * vm
            s2 += chi[jj] * e2[I + 1] * vp + ups[jj] * e2[I - 1] * vm
            out0[f, jj] = s0
            out1[f, jj] = s1
            out2[f, jj] = s2


@njit(cache=True)
def cumulative_table(omega, chi, ups, dt, I):
    """Cumulative transition probabilities per node, offsets ``-I .. I``."""
    n_nodes = omega.shape[0]
    cum = np.empty((n_nodes, 2 * I + 1))
    for jj in range(n_nodes):
        tot = 0.0
        for c in range(2 * I + 1):
            p = omega[jj, c] * dt
            if c == I + 1:
                p += chi[jj] * dt
            elif c == I - 1:
                p += ups[jj] * dt
            tot += p
            cum[jj, c] = tot
        # the stay probability fills the gap at offset zero
        stay = 1.0 - tot
        for c in range(I, 2 * I + 1):
            cum[jj, c] += stay
        cum[jj, 2 * I] = 1.0
    return cum


@njit(cache=True)
def sample_steps(cum, nodes, alive, u, I, N):
    """Advance chain positions by one step using uniforms ``u``.

    ``nodes`` hold ``j`` indices; paths leaving ``(-N, N)`` are marked dead
    and frozen at the exit node.
    """
    for k in range(nodes.shape[0]):
        if not alive[k]:
            continue
        jj = nodes[k] + N - 1
        row = cum[jj]
        lo = 0
        hi = 2 * I
        x = u[k]
        while lo < hi:
            mid = (lo + hi) // 2
            if row[mid] <= x:
                lo = mid + 1
            else:
                hi = mid
        nj = nodes[k] + lo - I
        nodes[k] = nj
        if nj <= -N or nj >= N:
            alive[k] = False


@njit(cache=True)
def stencil_apply(omega, chi, ups, vals, I):
    """Discrete generator applied to a padded vector at each interior node."""
    n_nodes = omega.shape[0]
    out = np.empty(n_nodes)
    for jj in range(n_nodes):
        p = jj + 1 + I
        vj = vals[p]
        acc = chi[jj] * (vals[p + 1] - vj) + ups[jj] * (vals[p - 1] - vj)
        for c in range(2 * I + 1):
            r = omega[jj, c]
            if r != 0.0:
                acc += r * (vals[p + c - I] - vj)
        out[jj] = acc
    return out


@njit(cache=True)
def phi_newton(logw, l, target, A, lo, hi, tol, slope):
    """Safeguarded Newton for ``log sum_q exp(logw_q + l_q A) = target``.

    ``A`` holds the starting points and receives the roots, ``lo``/``hi`` a
    bracket per point and ``slope`` the derivative at the root.  Returns the
    number of points that did not converge.
    """
    n_q = logw.shape[0]
    failed = 0
    for k in range(A.shape[0]):
        a = A[k]
        blo = lo[k]
        bhi = hi[k]
        tk = target[k]
        scale = tol * max(1.0, abs(tk))
        ok = False
        fp = 0.0
        for _ in range(200):
            m = -np.inf
            for q in range(n_q):
                x = logw[q] + l[q] * a
                if x > m:
                    m = x
            s0 = 0.0
            s1 = 0.0
            for q in range(n_q):
                e = np.exp(logw[q] + l[q] * a - m)
                s0 += e
                s1 += e * l[q]
            fp = s1 / s0
            r = m + np.log(s0) - tk
            if abs(r) <= scale:
                ok = True
                break
            if r > 0.0:
                bhi = min(bhi, a)
            else:
                blo = max(blo, a)
            step = a - r / fp
            if step <= blo or step >= bhi:
                step = 0.5 * (blo + bhi)
            if abs(step - a) <= 1e-15 * (1.0 + abs(a)):
                ok = True
                break
            a = step
        if not ok:
            failed += 1
        A[k] = a
        slope[k] = fp
    return failed
