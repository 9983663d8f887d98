"""Summary histograms, binned total variation, and small estimation helpers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .core import as_array

DEFAULT_BINS = 20


def summary_x0_m1(states) -> np.ndarray:
    """``(n, 2)`` array of ``(x_0, M_1)`` per profile."""
    arr = as_array(states)
    i = np.arange(arr.shape[-1], dtype=np.float64)
    return np.stack([arr[..., 0], arr @ i], axis=-1)


@dataclass(frozen=True)
class Histogram2D:
    """Adaptive quantile grid on ``(X0, M1)``.

    ``x0_edges`` has ``K + 1`` entries; ``m1_edges[j]`` holds the ``M1`` edges
    inside ``X0``-bin ``j`` (conditional quantiles, so every cell of the
    reference sample carries about the same mass).  Outer edges are
    ``-inf``/``inf``.
    """

    x0_edges: np.ndarray
    m1_edges: tuple
    masses: np.ndarray

    @classmethod
    def grid(cls, reference: np.ndarray, bins: int = DEFAULT_BINS) -> "Histogram2D":
        ref = np.asarray(reference, dtype=np.float64)
        q = np.linspace(0.0, 1.0, bins + 1)[1:-1]
        inner = np.unique(np.quantile(ref[:, 0], q, method="inverted_cdf"))
        x0_edges = np.concatenate([[-np.inf], inner, [np.inf]])
        rows = np.searchsorted(inner, ref[:, 0], side="right")
        m1_edges = []
        for j in range(inner.size + 1):
            sub = ref[rows == j, 1]
            inner_m = np.unique(np.quantile(sub, q, method="inverted_cdf")) if sub.size else np.array([])
            m1_edges.append(np.concatenate([[-np.inf], inner_m, [np.inf]]))
        ncell = sum(e.size - 1 for e in m1_edges)
        return cls(x0_edges, tuple(m1_edges), np.zeros(ncell))

    @property
    def n_cells(self) -> int:
        return self.masses.size

    def cell_index(self, sample: np.ndarray) -> np.ndarray:
        s = np.asarray(sample, dtype=np.float64)
        inner = self.x0_edges[1:-1]
        rows = np.searchsorted(inner, s[:, 0], side="right")
        offsets = np.cumsum([0] + [e.size - 1 for e in self.m1_edges])
        idx = np.empty(s.shape[0], dtype=np.int64)
        for j, e in enumerate(self.m1_edges):
            sel = rows == j
            idx[sel] = offsets[j] + np.searchsorted(e[1:-1], s[sel, 1], side="right")
        return idx

    def counts(self, sample: np.ndarray) -> np.ndarray:
        return np.bincount(self.cell_index(sample), minlength=self.n_cells)

    def fill(self, sample: np.ndarray) -> "Histogram2D":
        c = self.counts(sample).astype(np.float64)
        return Histogram2D(self.x0_edges, self.m1_edges, c / c.sum())


@dataclass(frozen=True)
class TVReport:
    """Binned TV between two samples.

    ``raw`` is the plug-in distance, ``null`` its exact expectation when the
    pooled sample is split at random into groups of the same sizes (the
    sampling floor), and ``tv`` the excess ``max(raw - null, 0)``.
    """

    raw: float
    null: float
    n_a: int
    n_b: int
    n_cells: int

    @property
    def excess(self) -> float:
        return self.raw - self.null

    @property
    def tv(self) -> float:
        return max(self.excess, 0.0)


def _null_abs_diff(n_i: int, m_a: int, m_b: int) -> float:
    total = m_a + m_b
    lo = max(0, n_i - m_b)
    hi = min(n_i, m_a)
    a = np.arange(lo, hi + 1)
    pmf = sps.hypergeom.pmf(a, total, n_i, m_a)
    return float(np.sum(pmf * np.abs(a / m_a - (n_i - a) / m_b)))


def tv_from_counts(ca: np.ndarray, cb: np.ndarray) -> TVReport:
    m_a, m_b = int(ca.sum()), int(cb.sum())
    raw = 0.5 * float(np.abs(ca / m_a - cb / m_b).sum())
    pooled = (ca + cb).astype(np.int64)
    vals, mult = np.unique(pooled[pooled > 0], return_counts=True)
    null = 0.5 * sum(m * _null_abs_diff(int(v), m_a, m_b) for v, m in zip(vals, mult))
    return TVReport(raw, null, m_a, m_b, ca.size)


def binned_tv(a: np.ndarray, b: np.ndarray, bins: int = DEFAULT_BINS) -> TVReport:
    """TV between two ``(n, 2)`` summary samples on a grid built from the pooled sample."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both samples must be nonempty")
    grid = Histogram2D.grid(np.concatenate([a, b]), bins)
    return tv_from_counts(grid.counts(a), grid.counts(b))


def batch_means(series: np.ndarray, n_batches: int = 20) -> tuple[float, float]:
    """Mean and batch-means standard error of a correlated series."""
    x = np.asarray(series, dtype=np.float64)
    n = x.size // n_batches
    if n < 1:
        raise ValueError("series shorter than the number of batches")
    b = x[: n * n_batches].reshape(n_batches, n).mean(axis=1)
    return float(x.mean()), float(b.std(ddof=1) / math.sqrt(n_batches))


def wls_slope(t: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    """Weighted least-squares line; returns ``(slope, intercept)``."""
    W = w.sum()
    tm = (w * t).sum() / W
    ym = (w * y).sum() / W
    stt = (w * (t - tm) ** 2).sum()
    slope = (w * (t - tm) * (y - ym)).sum() / stt
    return float(slope), float(ym - slope * tm)


def ks_2samp(a, b) -> tuple[float, float]:
    r = sps.ks_2samp(np.asarray(a), np.asarray(b))
    return float(r.statistic), float(r.pvalue)


def ks_exponential(sample, rate: float) -> tuple[float, float]:
    r = sps.kstest(np.asarray(sample), "expon", args=(0.0, 1.0 / rate))
    return float(r.statistic), float(r.pvalue)
