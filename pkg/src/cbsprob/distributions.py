"""Execution-time distributions on an integer microsecond grid.

A :class:`PMF` stores masses at the points ``origin + k * granularity``.
Raw distributions (traces, discretised densities) use granularity 1;
:func:`resample` moves every mass up to the next multiple of ``delta``
and returns a PMF with granularity ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

PMF_HEADER = "# cbsprob-pmf v1"
_FILE_SUM_TOLERANCE = 1e-6


class DistributionError(ValueError):
    """Raised for malformed or inconsistent distributions."""


@dataclass(frozen=True, eq=False)
class PMF:
    """Probability mass function of a job execution time (values in µs).

    Masses are renormalised once at construction and zero entries at both
    ends are trimmed, so ``c_min`` and ``c_max`` are tight.
    """

    origin: int
    masses: np.ndarray
    granularity: int = 1
    _cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        masses = np.array(self.masses, dtype=float).ravel()
        if self.granularity < 1:
            raise DistributionError("granularity must be >= 1")
        if masses.size == 0:
            raise DistributionError("empty distribution")
        if not np.all(np.isfinite(masses)) or np.any(masses < 0):
            raise DistributionError("masses must be finite and nonnegative")
        nz = np.flatnonzero(masses)
        if nz.size == 0:
            raise DistributionError("distribution has no mass")
        origin = int(self.origin) + int(nz[0]) * self.granularity
        masses = masses[nz[0]:nz[-1] + 1]
        if origin < 0:
            raise DistributionError("execution times must be nonnegative")
        masses = masses / masses.sum()
        masses.setflags(write=False)
        cumulative = np.cumsum(masses)
        cumulative[-1] = 1.0
        cumulative.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "_cumulative", cumulative)

    @classmethod
    def from_points(cls, points: Mapping[int, float] | Iterable[tuple[int, float]],
                    granularity: int = 1) -> "PMF":
        """Build a PMF from ``{value: probability}`` pairs.

        Every value must lie on the grid ``min(values) + k * granularity``.
        Repeated values are summed.
        """
        items = list(points.items()) if isinstance(points, Mapping) else list(points)
        if not items:
            raise DistributionError("empty distribution")
        values = np.array([int(v) for v, _ in items], dtype=np.int64)
        probs = np.array([float(p) for _, p in items], dtype=float)
        origin = int(values.min())
        offsets = values - origin
        if np.any(offsets % granularity):
            raise DistributionError(f"values are not on a {granularity} µs grid")
        masses = np.bincount(offsets // granularity, weights=probs)
        return cls(origin, masses, granularity)

    @property
    def c_min(self) -> int:
        return self.origin

    @property
    def c_max(self) -> int:
        return self.origin + (self.masses.size - 1) * self.granularity

    @property
    def values(self) -> np.ndarray:
        return self.origin + self.granularity * np.arange(self.masses.size, dtype=np.int64)

    def support(self) -> dict[int, float]:
        """Nonzero points as a ``{value: probability}`` dict."""
        idx = np.flatnonzero(self.masses)
        vals = self.values
        return {int(vals[i]): float(self.masses[i]) for i in idx}

    def mean(self) -> float:
        return float(np.dot(self.values.astype(float), self.masses))

    def mode(self) -> int:
        return int(self.values[int(np.argmax(self.masses))])

    def cdf(self, c: float) -> float:
        return cdf(self, c)

    def __eq__(self, other):
        if not isinstance(other, PMF):
            return NotImplemented
        return self.support().keys() == other.support().keys() and all(
            abs(p - other.support()[v]) <= 1e-12 for v, p in self.support().items()
        )

    def __repr__(self):
        return (f"PMF(c_min={self.c_min}, c_max={self.c_max}, "
                f"granularity={self.granularity}, points={np.count_nonzero(self.masses)})")


def pmf_from_trace(samples: Sequence[float]) -> PMF:
    """Empirical frequency PMF of measured execution times (µs).

    Samples are rounded to the nearest integer microsecond.
    """
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise DistributionError("empty trace")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DistributionError("trace samples must be finite and nonnegative")
    ints = np.rint(arr).astype(np.int64)
    origin = int(ints.min())
    counts = np.bincount(ints - origin).astype(float)
    return PMF(origin, counts / arr.size, 1)


def pmf_from_beta(alpha: float, beta: float, support_max: int, grid: int = 1) -> PMF:
    """Discretise a beta(alpha, beta) density scaled to ``[0, support_max]`` µs.

    The mass at ``k * grid`` is the beta CDF increment over
    ``((k - 1) * grid, k * grid]``, which keeps the CDF exact at grid points.
    """
    if alpha <= 0 or beta <= 0:
        raise DistributionError("beta shape parameters must be positive")
    if support_max <= 0 or grid < 1 or support_max % grid:
        raise DistributionError("grid must be >= 1 and divide support_max")
    edges = np.arange(0, support_max + grid, grid, dtype=float) / support_max
    lower = np.diff(stats.beta.cdf(edges, alpha, beta))
    # survival-function differences keep the upper tail free of cancellation noise
    upper = -np.diff(stats.beta.sf(edges, alpha, beta))
    median = stats.beta.median(alpha, beta)
    masses = np.where(edges[1:] <= median, lower, upper)
    return PMF(grid, np.clip(masses, 0.0, None), grid)


def cdf(pmf: PMF, c: float) -> float:
    """``P{C <= c}``."""
    if c < pmf.origin:
        return 0.0
    k = int((c - pmf.origin) // pmf.granularity)
    if k >= pmf.masses.size:
        return 1.0
    return float(pmf._cumulative[k])


def cdf_at(pmf: PMF, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`cdf`."""
    points = np.asarray(points, dtype=float)
    k = np.floor((points - pmf.origin) / pmf.granularity).astype(np.int64)
    out = np.where(k >= 0, pmf._cumulative[np.clip(k, 0, pmf.masses.size - 1)], 0.0)
    return np.where(k >= pmf.masses.size, 1.0, out)


def resample(pmf: PMF, delta: int) -> PMF:
    """Move each mass up to the next multiple of ``delta``.

    The result stochastically dominates the input.
    """
    if delta < 1:
        raise DistributionError("delta must be >= 1")
    vals = pmf.values
    buckets = -(-vals // delta)  # ceil for nonnegative ints
    first = int(buckets[0])
    masses = np.bincount(buckets - first, weights=pmf.masses)
    return PMF(first * delta, masses, delta)


def truncate(pmf: PMF, threshold: float) -> PMF:
    """Drop masses below ``threshold`` and renormalise.

    Not conservative when upper-tail mass is dropped; exposed only as an
    explicit user option.
    """
    masses = np.where(pmf.masses < threshold, 0.0, pmf.masses)
    if not masses.any():
        raise DistributionError("truncation removed all mass")
    return PMF(pmf.origin, masses, pmf.granularity)


def dominates(a: PMF, b: PMF, tol: float = 1e-12) -> bool:
    """First-order stochastic dominance ``a ⪰ b``: ``F_a(x) <= F_b(x)`` for all x."""
    points = np.union1d(a.values[a.masses > 0], b.values[b.masses > 0])
    return bool(np.all(cdf_at(a, points) <= cdf_at(b, points) + tol))


def read_pmf(path: str | Path) -> PMF:
    """Read the ``<value_us> <probability>`` text format.

    Lines starting with ``#`` are comments; a ``# cbsprob-pmf vN`` header
    with an unknown version is rejected.  Sums within 1e-6 of one are
    renormalised.
    """
    points = []
    last = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("# cbsprob-pmf") and line != PMF_HEADER:
            raise DistributionError(f"{path}:{lineno}: unsupported format header {line!r}")
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DistributionError(f"{path}:{lineno}: expected '<value> <probability>'")
        try:
            value, prob = int(parts[0]), float(parts[1])
        except ValueError:
            raise DistributionError(f"{path}:{lineno}: cannot parse {line!r}") from None
        if last is not None and value <= last:
            raise DistributionError(f"{path}:{lineno}: values must be strictly increasing")
        if prob < 0:
            raise DistributionError(f"{path}:{lineno}: negative probability")
        last = value
        points.append((value, prob))
    if not points:
        raise DistributionError(f"{path}: no entries")
    total = math.fsum(p for _, p in points)
    if abs(total - 1.0) >= _FILE_SUM_TOLERANCE:
        raise DistributionError(f"{path}: probabilities sum to {total!r}, not 1")
    return PMF.from_points(points)


def write_pmf(pmf: PMF, path: str | Path) -> None:
    lines = [PMF_HEADER]
    lines += [f"{v} {p!r}" for v, p in pmf.support().items()]
    Path(path).write_text("\n".join(lines) + "\n")
