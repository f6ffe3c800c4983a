import numpy as np
import pytest

from cbsprob import PMF, ReservationParams
from cbsprob.simulator import backlogs, merge, simulate, write_histogram_csv

GEOMETRIC_PMF = PMF.from_points({10_000: 0.75, 30_000: 0.25})
GEOMETRIC_PARAMS = ReservationParams(100_000, 50_000, 10_000, 1)


def test_backlog_recursion_by_hand():
    # v_{k+1} = max(0, v_k - 20) + c_{k+1}
    got = backlogs(np.array([30, 10, 40, 5]), 20)
    np.testing.assert_array_equal(got, [30, 20, 40, 25])


def test_deterministic_always_meets():
    res = simulate(PMF.from_points({15_000: 1.0}), GEOMETRIC_PARAMS, 5_000, seed=1)
    assert res.p_meet_hat == 1.0
    assert res.delay_histogram == {2: 4_500}


def test_geometric_closed_form():
    res = simulate(GEOMETRIC_PMF, GEOMETRIC_PARAMS, 1_000_000, seed=2024)
    assert res.p_meet_hat == pytest.approx(2 / 3, abs=0.002)
    assert res.ci99_halfwidth >= res.binomial_halfwidth
    assert sum(res.delay_histogram.values()) == res.jobs_simulated - res.warmup_discarded


def test_seed_reproducible():
    a = simulate(GEOMETRIC_PMF, GEOMETRIC_PARAMS, 20_000, seed=9)
    b = simulate(GEOMETRIC_PMF, GEOMETRIC_PARAMS, 20_000, seed=9)
    assert a == b
    assert a.as_record()["delay_histogram"].keys() == {str(k) for k in a.delay_histogram}


def test_warmup_validation():
    with pytest.raises(ValueError):
        simulate(GEOMETRIC_PMF, GEOMETRIC_PARAMS, 100, warmup=100)


def test_merge_is_order_independent():
    runs = [simulate(GEOMETRIC_PMF, GEOMETRIC_PARAMS, 10_000, seed=s) for s in (3, 1, 2)]
    assert merge(runs) == merge(list(reversed(runs)))
    assert merge(runs)[1] == 27_000


def test_histogram_csv(tmp_path):
    res = simulate(GEOMETRIC_PMF, GEOMETRIC_PARAMS, 10_000, seed=5)
    path = tmp_path / "h.csv"
    write_histogram_csv(res, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "delay_in_server_periods,count"
    assert sum(int(line.split(",")[1]) for line in lines[1:]) == 9_000
