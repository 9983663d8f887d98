"""Haigh's discrete-generation model with fitness-weighted parents and Poisson mutation.

Counts are stored per mutation class.  Parent classes are drawn as one
multinomial over classes with weights ``N_i (1 - alpha)**i``; children of a
class then split over the number of new mutations by a second multinomial
on the Poisson(lambda) probabilities, whose far tail is resolved exactly by
rejection sampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import poisson

from .core import Profile
from .errors import InvalidStart

_TAIL_EPS = 1e-15


@dataclass(frozen=True)
class DiscreteParams:
    alpha: float
    lam: float
    n: int
    cap: int | None = None

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be an integer >= 1")
        if self.cap is not None and (int(self.cap) != self.cap or self.cap < 1):
            raise ValueError("cap must be an integer >= 1")


@dataclass(frozen=True, eq=False)
class DiscretePopulation:
    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 1 or c.size == 0 or np.any(c < 0) or c.sum() < 1:
            raise ValueError("counts must be a nonempty nonnegative vector with positive total")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def delta(cls, n: int, j: int = 0) -> "DiscretePopulation":
        c = np.zeros(j + 1, dtype=np.int64)
        c[j] = n
        return cls(c)

    def moment(self, k: int) -> float:
        i = np.arange(self.counts.size, dtype=np.float64)
        return float(self.counts @ i**k) / self.n


@dataclass(frozen=True)
class ClickResult:
    click_generation: int | None
    max_gens: int
    x0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray

    @property
    def censored(self) -> bool:
        return self.click_generation is None


class _MutationLaw:
    """Poisson(lam) probabilities on ``0..J-1`` plus a tail bucket ``>= J``."""

    def __init__(self, lam: float):
        self.lam = lam
        if lam == 0:
            self.J = 1
            self.pmf = np.array([1.0, 0.0])
            return
        J = int(poisson.isf(_TAIL_EPS, lam)) + 1
        head = poisson.pmf(np.arange(J), lam)
        self.J = J
        self.pmf = np.append(head, max(0.0, 1.0 - head.sum()))
        self.pmf /= self.pmf.sum()

    def tail_draws(self, rng, m: int) -> np.ndarray:
        out = np.empty(m, dtype=np.int64)
        filled = 0
        while filled < m:
            v = rng.poisson(self.lam, size=4 * (m - filled) + 16)
            v = v[v >= self.J]
            take = min(v.size, m - filled)
            out[filled:filled + take] = v[:take]
            filled += take
        return out


def _laws(p: DiscreteParams) -> _MutationLaw:
    return _MutationLaw(p.lam)


def step_counts(counts: np.ndarray, p: DiscreteParams, rng, law: _MutationLaw | None = None) -> np.ndarray:
    """One generation for a batch of populations; ``counts`` has shape ``(B, C)``.

    Returns a new ``(B, C')`` array; ``C'`` grows when uncapped and a child
    lands beyond the current last class, and equals ``cap + 1`` when capped.
    """
    law = law or _laws(p)
    B, C = counts.shape
    i = np.arange(C, dtype=np.float64)
    w = counts * (1.0 - p.alpha) ** i
    probs = w / w.sum(axis=1, keepdims=True)
    parents = rng.multinomial(p.n, probs)
    split = rng.multinomial(parents, law.pmf)
    J = law.J
    width = C + J
    new = np.zeros((B, width), dtype=np.int64)
    for j in range(J):
        new[:, j:j + C] += split[:, :, j]
    tail = split[:, :, J]
    if tail.any():
        bs, cs = np.nonzero(tail)
        m = tail[bs, cs]
        draws = law.tail_draws(rng, int(m.sum()))
        cls = np.repeat(cs, m) + draws
        bb = np.repeat(bs, m)
        top = int(cls.max()) + 1
        if top > new.shape[1]:
            new = np.pad(new, ((0, 0), (0, top - new.shape[1])))
        np.add.at(new, (bb, cls), 1)
    if p.cap is not None:
        cap = p.cap
        if new.shape[1] > cap + 1:
            new[:, cap] += new[:, cap + 1:].sum(axis=1)
            new = new[:, :cap + 1]
        elif new.shape[1] < cap + 1:
            new = np.pad(new, ((0, 0), (0, cap + 1 - new.shape[1])))
        return new
    last = np.flatnonzero(new.any(axis=0))
    keep = max(C, int(last[-1]) + 1 if last.size else 1)
    return new[:, :keep]


def step_generation(pop: DiscretePopulation, p: DiscreteParams, rng) -> DiscretePopulation:
    """One non-overlapping generation of resampling plus mutation."""
    if pop.n != p.n:
        raise ValueError(f"population holds {pop.n} individuals, params say n = {p.n}")
    counts = pop.counts[None, :]
    if p.cap is not None and counts.shape[1] > p.cap + 1:
        counts = _saturate(counts, p.cap)
    new = step_counts(counts, p, rng)[0]
    last = np.flatnonzero(new)[-1] if p.cap is None else new.size - 1
    return DiscretePopulation(new[: last + 1])


def _saturate(counts: np.ndarray, cap: int) -> np.ndarray:
    out = counts[:, : cap + 1].copy()
    out[:, cap] += counts[:, cap + 1:].sum(axis=1)
    return out


def _summaries(counts: np.ndarray, n: int):
    i = np.arange(counts.shape[1], dtype=np.float64)
    return counts[:, 0] / n, counts @ i / n, counts @ i**2 / n, counts @ i**3 / n


def simulate_until_click(pop0: DiscretePopulation, p: DiscreteParams, max_gens: int, rng) -> ClickResult:
    """Run until class 0 empties; ``click_generation`` is ``None`` if censored at ``max_gens``."""
    if pop0.counts[0] < 1:
        raise InvalidStart("class 0 must be occupied at the start")
    if pop0.n != p.n:
        raise ValueError(f"population holds {pop0.n} individuals, params say n = {p.n}")
    law = _laws(p)
    counts = pop0.counts[None, :].astype(np.int64)
    if p.cap is not None:
        counts = _saturate(counts, p.cap) if counts.shape[1] > p.cap + 1 else np.pad(
            counts, ((0, 0), (0, p.cap + 1 - counts.shape[1])))
    rows = [_summaries(counts, p.n)]
    click = None
    for g in range(1, max_gens + 1):
        counts = step_counts(counts, p, rng, law)
        rows.append(_summaries(counts, p.n))
        if counts[0, 0] == 0:
            click = g
            break
        if p.lam == 0 and counts[0, 0] == p.n:
            break
    cols = [np.array([r[c][0] for r in rows]) for c in range(4)]
    return ClickResult(click, max_gens, *cols)


def empirical_profile(pop: DiscretePopulation, dim: int) -> Profile:
    """Frequencies on classes ``0..dim`` with everything above ``dim`` folded into ``dim``."""
    c = pop.counts
    x = np.zeros(dim + 1)
    m = min(c.size, dim + 1)
    x[:m] = c[:m]
    if c.size > dim + 1:
        x[dim] += c[dim + 1:].sum()
    return Profile(x / pop.n)


def run_batch(counts0: np.ndarray, p: DiscreteParams, generations: int, rng, on_generation=None) -> np.ndarray:
    """Advance a ``(B, C)`` batch of populations; ``on_generation(g, counts)`` after each step."""
    law = _laws(p)
    counts = np.asarray(counts0, dtype=np.int64)
    if p.cap is not None:
        counts = _saturate(counts, p.cap) if counts.shape[1] > p.cap + 1 else np.pad(
            counts, ((0, 0), (0, p.cap + 1 - counts.shape[1])))
    for g in range(1, generations + 1):
        counts = step_counts(counts, p, rng, law)
        if on_generation is not None:
            on_generation(g, counts)
    return counts
