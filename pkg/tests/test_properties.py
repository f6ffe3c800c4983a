"""Property-based checks on randomly generated distributions and chains."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_transition, power_iteration
from cbsprob import PMF, ChainCoefficients, blocks, dominates, drift_d1, lump, resample, solve
from cbsprob.solvers import analytic_unclamped

masses = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40).filter(lambda m: sum(m) > 1e-3)


@st.composite
def pmfs(draw):
    origin = draw(st.integers(0, 500))
    return PMF(origin, np.array(draw(masses)))


@st.composite
def chains(draw, recurrent=None):
    n = draw(st.integers(2, 12))
    H = draw(st.integers(1, n - 1))
    a = np.array(draw(st.lists(st.floats(0.0, 1.0), min_size=n + 1, max_size=n + 1)))
    a[0] += 0.05
    a[-1] += 0.05
    a /= a.sum()
    return ChainCoefficients.from_row(a, H)


@given(pmfs(), st.integers(1, 60))
def test_resample_dominates_and_keeps_mass(u, delta):
    r = resample(u, delta)
    assert dominates(r, u)
    assert abs(r.masses.sum() - 1.0) < 1e-12
    assert np.all(r.values % delta == 0)
    assert r.mean() >= u.mean() - 1e-9


@given(pmfs(), st.integers(1, 10), st.integers(1, 6))
def test_nested_resampling_is_ordered(u, delta, k):
    # a coarser grid that contains the finer one yields a dominating PMF
    assert dominates(resample(u, delta * k), resample(u, delta))


@given(chains())
def test_lump_idempotent(chain):
    once = lump(chain)
    twice = lump(once)
    assert twice.H == 1
    np.testing.assert_array_equal(once.a, twice.a)
    assert abs(once.a.sum() - 1.0) < 1e-12


@given(chains())
def test_drift_forms_agree(chain):
    H = chain.H
    direct = sum((H - j) * chain.alpha[j] for j in range(chain.n + 1))
    assert abs(drift_d1(chain) - direct) < 1e-9


@given(chains(), st.integers(20, 60))
def test_rows_stochastic(chain, size):
    P = chain.transition_matrix(size)
    assert np.all(P >= 0)
    full = size - chain.n  # rows whose support fits in the window
    np.testing.assert_allclose(P[:full].sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(P[:full, :full], dense_transition(chain.a, chain.H, size)[:full, :full],
                               atol=1e-15)


@given(chains())
def test_block_rows_stochastic(chain):
    blk = blocks(chain)
    np.testing.assert_allclose((blk.A0 + blk.A1 + blk.A2).sum(axis=1), 1.0, atol=1e-12)
    for m in (blk.A0, blk.A1, blk.A2, blk.C):
        assert np.all(m >= 0)


@settings(max_examples=40, deadline=None)
@given(chains())
def test_lumped_chain_is_pessimistic(chain):
    if drift_d1(chain) <= 0.05:
        return
    original = power_iteration(chain.a, chain.H, size=600)[0]
    lumped = lump(chain)
    if drift_d1(lumped) <= 0:
        assert analytic_unclamped(chain) <= 1e-12
        return
    assert power_iteration(lumped.a, 1, size=600)[0] <= original + 1e-9
    assert solve(chain, "analytic").pi0 <= original + 1e-9
