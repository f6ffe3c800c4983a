import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cbsprob import ReservationParams, build_chain, pmf_from_beta, resample  # noqa: E402


@functools.lru_cache(maxsize=None)
def beta_pmf(alpha: float = 2.0, beta: float = 7.0):
    return pmf_from_beta(alpha, beta, 99500)


@functools.lru_cache(maxsize=None)
def table_chain(budget: int, delta: int):
    """Chain for the beta(2, 7) task with T = 100 ms and T_s = 50 ms."""
    params = ReservationParams(100_000, 50_000, budget, delta)
    return build_chain(resample(beta_pmf(), delta), params)


@pytest.fixture(scope="session")
def beta27():
    return beta_pmf()


@functools.lru_cache(maxsize=None)
def table_state(budget: int, delta: int, method: str):
    from cbsprob import solve

    return solve(table_chain(budget, delta), method)
