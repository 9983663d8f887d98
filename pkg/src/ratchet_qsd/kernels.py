"""Compiled Euler-Maruyama kernels for the (aggregated) ratchet diffusion.

One scheme serves both drifts: selection acts through ``min(i, k)``; with
``k = d`` this is the full drift.  The noise of class ``i`` is
``sqrt(x_i) z_i - x_i w`` with ``w = sum_j sqrt(x_j) z_j``.

A coarse step at ``level`` L consumes ``2**L`` fine-step normals, so paths at
``dt`` and ``dt / 2`` can share their Brownian increments.
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .rng import PURPOSE_RESAMPLE, fill_normals, uniform

NEAR_ZERO = 1e-8


@numba.njit(nogil=True, cache=True)
def _noise(k0, k1, step, level, particle, z, tmp):
    m = 1 << level
    if m == 1:
        fill_normals(k0, k1, np.uint64(step), particle, z)
        return
    z[:] = 0.0
    for j in range(m):
        fill_normals(k0, k1, np.uint64(step * m + j), particle, tmp)
        z += tmp
    z *= 1.0 / math.sqrt(m)


@numba.njit(nogil=True, cache=True)
def euler_update(x, z, alpha, lam, k, dt, y):
    """One step from ``x`` with normals ``z`` into ``y``.

    Returns ``(pre_clip_x0, clipped, unstable)``: ``clipped`` flags a negative
    pre-clip entry in some class ``i >= 1`` that was not already near zero,
    ``unstable`` a pre-clip entry below ``-1e-8``.
    """
    D = x.shape[0]
    d = D - 1
    sq = math.sqrt(dt)
    m1 = 0.0
    w = 0.0
    for i in range(D):
        m1 += min(i, k) * x[i]
        w += math.sqrt(x[i]) * z[i]
    pre0 = 0.0
    clipped = False
    unstable = False
    s = 0.0
    for i in range(D):
        xi = x[i]
        dr = alpha * (m1 - min(i, k)) * xi
        if i > 0:
            dr += lam * x[i - 1]
        if i < d:
            dr -= lam * xi
        v = xi + dr * dt + sq * (math.sqrt(xi) * z[i] - xi * w)
        if i == 0:
            pre0 = v
        if v < 0.0:
            if i > 0:
                if xi >= NEAR_ZERO:
                    clipped = True
                if v < -NEAR_ZERO:
                    unstable = True
            v = 0.0
        elif v > 1.0:
            v = 1.0
        y[i] = v
        s += v
    if s > 0.0:
        for i in range(D):
            y[i] /= s
    return pre0, clipped, unstable


@numba.njit(nogil=True, cache=True)
def advance_independent(x, ids, k0, k1, step0, n_steps, dt, alpha, lam, k, level,
                        absorb, alive, click_step, clip_steps, unstable_steps):
    """Advance non-interacting particles ``n_steps`` steps in place.

    Particles with ``alive[r]`` false are left untouched.  ``click_step[r]``
    receives the 1-based global step of the first click if still negative.
    With ``absorb`` a clicked particle stops and is marked dead.
    """
    R, D = x.shape
    z = np.empty(D)
    tmp = np.empty(D)
    a = np.empty(D)
    b = np.empty(D)
    for r in range(R):
        if not alive[r]:
            continue
        a[:] = x[r]
        pid = np.uint64(ids[r])
        for s in range(n_steps):
            step = step0 + s
            _noise(k0, k1, step, level, pid, z, tmp)
            pre0, clipped, unstable = euler_update(a, z, alpha, lam, k, dt, b)
            if clipped:
                clip_steps[r] += 1
            if unstable:
                unstable_steps[r] += 1
            a, b = b, a
            if pre0 <= 0.0:
                if click_step[r] < 0:
                    click_step[r] = step + 1
                if absorb:
                    alive[r] = False
                    break
        x[r] = a


@numba.njit(nogil=True, cache=True)
def advance_fleming_viot(x, ids, by_id, k0, k1, step0, n_steps, dt, alpha, lam, k, level,
                         restarts, clip_steps, unstable_steps):
    """Advance a Fleming-Viot system; returns -1 or the step at which all died.

    All particles move first; each clicked particle then copies the post-step
    state of a survivor chosen uniformly by a counter-based draw keyed on its
    own id.  Survivors are ranked by id, so the outcome does not depend on
    the memory order of particles.  ``restarts[s]`` counts restarts at step
    ``step0 + s``.
    """
    P, D = x.shape
    y = np.empty_like(x)
    z = np.empty(D)
    tmp = np.empty(D)
    dead = np.zeros(P, dtype=np.bool_)
    surv = np.empty(P, dtype=np.int64)
    for s in range(n_steps):
        step = step0 + s
        for r in range(P):
            _noise(k0, k1, step, level, np.uint64(ids[r]), z, tmp)
            pre0, clipped, unstable = euler_update(x[r], z, alpha, lam, k, dt, y[r])
            if clipped:
                clip_steps[r] += 1
            if unstable:
                unstable_steps[r] += 1
            dead[r] = pre0 <= 0.0
        n_surv = 0
        for j in range(P):
            r = by_id[j]
            if not dead[r]:
                surv[n_surv] = r
                n_surv += 1
        if n_surv == 0:
            return step
        n_dead = P - n_surv
        if n_dead > 0:
            for r in range(P):
                if dead[r]:
                    u = uniform(k0, k1, np.uint64(step), np.uint64(ids[r]), PURPOSE_RESAMPLE)
                    j = min(int(u * n_surv), n_surv - 1)
                    y[r] = y[surv[j]]
        restarts[s] = n_dead
        for r in range(P):
            x[r] = y[r]
    return -1
