"""Monte Carlo replay of the CBS backlog recursion.

Serves as ground truth for the unresampled system:

    v_0 = c_0,  v_{k+1} = max(0, v_k - N*Q_s) + c_{k+1},  delta_k = ceil(v_k / Q_s) * T_s
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from cbsprob.distributions import PMF
from cbsprob.qbdp import ReservationParams

Z99 = 2.576
N_BATCHES = 20


@dataclass(frozen=True)
class SimulationResult:
    jobs_simulated: int
    warmup_discarded: int
    p_meet_hat: float
    ci99_halfwidth: float
    binomial_halfwidth: float
    batch_means_halfwidth: float
    delay_histogram: dict[int, int]
    seed: int

    def as_record(self) -> dict:
        record = asdict(self)
        record["delay_histogram"] = {str(k): v for k, v in sorted(self.delay_histogram.items())}
        return record


def sample_execution_times(pmf: PMF, count: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling on the PMF's cumulative table."""
    u = rng.random(count)
    idx = np.searchsorted(pmf._cumulative, u, side="right")
    idx = np.minimum(idx, pmf.masses.size - 1)
    return pmf.values[idx]


def backlogs(costs: np.ndarray, supply: int) -> np.ndarray:
    """Backlog ``v_k`` seen at each job arrival."""
    out = np.empty(costs.size, dtype=np.int64)
    v = 0
    for k, c in enumerate(costs.tolist()):
        v = (v - supply if v > supply else 0) + c
        out[k] = v
    return out


def simulate(pmf: PMF, params: ReservationParams, jobs: int, warmup: int | None = None,
             seed: int = 0) -> SimulationResult:
    """Estimate the fraction of jobs whose response-time bound is within ``N*T_s``.

    ``warmup`` defaults to 10% of ``jobs``.  The reported half-width is the
    wider of the binomial and the 20-batch-means 99% intervals, since
    successive delays are correlated.
    """
    if warmup is None:
        warmup = jobs // 10
    if jobs <= warmup or warmup < 0:
        raise ValueError("jobs must exceed warmup")
    rng = np.random.Generator(np.random.PCG64(seed))
    costs = sample_execution_times(pmf, jobs, rng)
    v = backlogs(costs, params.supply)[warmup:]
    periods = -(-v // params.budget)
    met = periods <= params.n_periods
    m = met.size
    p_hat = float(met.mean())
    binom = Z99 * math.sqrt(p_hat * (1.0 - p_hat) / m)
    batch = 0.0
    if m >= N_BATCHES * 2:
        means = np.array([b.mean() for b in np.array_split(met, N_BATCHES)])
        batch = Z99 * float(means.std(ddof=1)) / math.sqrt(N_BATCHES)
    values, counts = np.unique(periods, return_counts=True)
    hist = {int(k): int(c) for k, c in zip(values, counts)}
    return SimulationResult(
        jobs_simulated=jobs,
        warmup_discarded=warmup,
        p_meet_hat=p_hat,
        ci99_halfwidth=max(binom, batch),
        binomial_halfwidth=binom,
        batch_means_halfwidth=batch,
        delay_histogram=hist,
        seed=seed,
    )


def merge(results: list[SimulationResult]) -> tuple[float, int]:
    """Pool independent replications: job-weighted estimate and sample count.

    Sorted by seed so the pooled value does not depend on completion order.
    """
    ordered = sorted(results, key=lambda r: r.seed)
    weights = [r.jobs_simulated - r.warmup_discarded for r in ordered]
    total = sum(weights)
    pooled = math.fsum(r.p_meet_hat * w for r, w in zip(ordered, weights)) / total
    return pooled, total


def write_histogram_csv(result: SimulationResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delay_in_server_periods", "count"])
        for k, c in sorted(result.delay_histogram.items()):
            writer.writerow([k, c])
