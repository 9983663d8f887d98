"""Counter-based random streams.

Every random number used by the diffusion kernels is a pure function of a
128-bit key and a 256-bit counter (Philox4x64-10, the generator behind
``numpy.random.Philox``).  Keys come from ``(master_seed, tag, replicate)``
through :class:`numpy.random.SeedSequence`; counters encode
``(step, particle, purpose, word)``.  Results therefore do not depend on how
particles are split across worker threads, nor on their order in memory.

Counter layout::

    c0 = fine time-step index
    c1 = particle id
    c2 = purpose << 32 | block
    c3 = 0 (reserved)
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numba
import numpy as np

PURPOSE_NOISE = 0
PURPOSE_RESAMPLE = 1

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_TWO_M53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


@numba.njit(inline="always")
def _mulhilo(a, b):
    lo = a * b
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _MASK32) + (hl & _MASK32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, lo


@numba.njit
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x64; returns the four output words."""
    for r in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


@numba.njit(inline="always")
def _unit(u):
    # (0, 1]; safe for log
    return ((u >> _S11) + np.uint64(1)) * _TWO_M53


@numba.njit
def normals4(k0, k1, step, particle, block):
    """Four independent N(0, 1) variates via Box-Muller on one Philox block."""
    c2 = (np.uint64(PURPOSE_NOISE) << _S32) | np.uint64(block)
    r0, r1, r2, r3 = philox4x64(np.uint64(step), np.uint64(particle), c2, np.uint64(0), k0, k1)
    ra = math.sqrt(-2.0 * math.log(_unit(r0)))
    ta = _TWO_PI * _unit(r1)
    rb = math.sqrt(-2.0 * math.log(_unit(r2)))
    tb = _TWO_PI * _unit(r3)
    return ra * math.cos(ta), ra * math.sin(ta), rb * math.cos(tb), rb * math.sin(tb)


@numba.njit
def fill_normals(k0, k1, step, particle, out):
    """Write ``len(out)`` normals for ``(step, particle)`` into ``out``."""
    n = out.shape[0]
    for b in range((n + 3) // 4):
        z0, z1, z2, z3 = normals4(k0, k1, step, particle, b)
        j = 4 * b
        out[j] = z0
        if j + 1 < n:
            out[j + 1] = z1
        if j + 2 < n:
            out[j + 2] = z2
        if j + 3 < n:
            out[j + 3] = z3


@numba.njit
def uniform(k0, k1, step, particle, purpose):
    """One U[0, 1) variate for ``(step, particle, purpose)``."""
    c2 = np.uint64(purpose) << _S32
    r0, _, _, _ = philox4x64(np.uint64(step), np.uint64(particle), c2, np.uint64(0), k0, k1)
    return ((r0 >> _S11)) * _TWO_M53


@numba.njit
def _normals_batch(k0, k1, steps, particles, dim, out):
    buf = np.empty(dim)
    for a in range(steps.shape[0]):
        for b in range(particles.shape[0]):
            fill_normals(k0, k1, steps[a], particles[b], buf)
            out[a, b, :] = buf


def tag_id(tag: str) -> int:
    """Stable 32-bit identifier for an experiment tag."""
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "little")


@dataclass(frozen=True)
class Stream:
    """A keyed family of counter-based substreams.

    ``Stream.derive(seed, tag, replicate)`` is a pure function; distinct
    ``(tag, replicate)`` pairs give distinct keys, and particles inside a
    stream are separated by the counter.
    """

    k0: int
    k1: int
    seed: int = 0
    tag: str = ""
    replicate: int = 0

    @classmethod
    def derive(cls, master_seed: int, tag: str = "", replicate: int = 0) -> "Stream":
        if master_seed < 0 or master_seed >= 2**64:
            raise ValueError("master seed must be an unsigned 64-bit integer")
        ss = np.random.SeedSequence(int(master_seed), spawn_key=(tag_id(tag), int(replicate)))
        k0, k1 = (int(v) for v in ss.generate_state(2, np.uint64))
        return cls(k0, k1, int(master_seed), tag, int(replicate))

    def child(self, tag: str, replicate: int = 0) -> "Stream":
        """Derive a sub-experiment stream from the same master seed."""
        return Stream.derive(self.seed, f"{self.tag}/{tag}" if self.tag else tag, replicate)

    @property
    def key(self) -> tuple[np.uint64, np.uint64]:
        return np.uint64(self.k0), np.uint64(self.k1)

    def normals(self, steps, particles, dim: int) -> np.ndarray:
        """Normals of shape ``(len(steps), len(particles), dim)``."""
        steps = np.atleast_1d(np.asarray(steps, dtype=np.uint64))
        particles = np.atleast_1d(np.asarray(particles, dtype=np.uint64))
        out = np.empty((steps.size, particles.size, dim))
        _normals_batch(*self.key, steps, particles, dim, out)
        return out

    def generator(self, block: int = 0) -> np.random.Generator:
        """A sequential numpy generator for block ``block`` of this stream.

        Used where samplers need numpy's distributions (multinomial,
        Poisson); every block gets its own key from the same seed
        sequence, so blocks never share a stream.
        """
        ss = np.random.SeedSequence(
            self.seed, spawn_key=(tag_id(self.tag), self.replicate, 0x9E37, int(block))
        )
        return np.random.Generator(np.random.Philox(ss))
