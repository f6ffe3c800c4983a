import numpy as np
import pytest
from scipy import integrate, stats

from cbsprob import PMF, cdf, dominates, pmf_from_beta, pmf_from_trace, read_pmf, resample, write_pmf
from cbsprob.distributions import DistributionError, truncate


def pmf(points):
    return PMF.from_points(points)


class TestTrace:
    def test_frequency_count(self):
        assert pmf_from_trace([10, 10, 30, 10]) == pmf({10: 0.75, 30: 0.25})

    def test_single_sample(self):
        assert pmf_from_trace([5]).support() == {5: 1.0}

    def test_law_of_large_numbers(self):
        rng = np.random.default_rng(3)
        samples = rng.choice([10, 30], size=10_000, p=[0.75, 0.25])
        got = pmf_from_trace(samples).support()
        assert abs(got[10] - 0.75) < 0.02 and abs(got[30] - 0.25) < 0.02

    def test_empty_trace(self):
        with pytest.raises(DistributionError, match="empty trace"):
            pmf_from_trace([])


class TestBeta:
    def test_uniform_halves(self):
        assert pmf_from_beta(1, 1, 100, 50).support() == pytest.approx({50: 0.5, 100: 0.5})

    def test_mean_matches_integral(self, beta27):
        # oracle: numerical integration of the continuous density
        oracle, _ = integrate.quad(lambda x: x * stats.beta.pdf(x / 99500, 2, 7) / 99500,
                                   0, 99500)
        assert abs(oracle - 99500 * 2 / 9) < 1e-6
        # masses sit at the right end of each 1 µs cell, which shifts the mean by ~0.5 µs
        assert abs(beta27.mean() - oracle) < 2

    def test_mode_by_argmax_scan(self, beta27):
        xs = np.arange(1, 99500)
        oracle = int(xs[np.argmax(stats.beta.pdf(xs / 99500, 2, 7))])
        assert abs(oracle - 99500 / 7) < 1
        assert abs(beta27.mode() - oracle) <= 1

    def test_support(self, beta27):
        assert beta27.c_min >= 1 and beta27.c_max <= 99500
        assert beta27.masses.sum() == pytest.approx(1.0, abs=1e-12)

    def test_bad_parameters(self):
        with pytest.raises(DistributionError):
            pmf_from_beta(0, 1, 100)
        with pytest.raises(DistributionError):
            pmf_from_beta(1, 1, 100, 30)


class TestCdf:
    U = pmf({10: 0.75, 30: 0.25})

    @pytest.mark.parametrize("c, want", [(10, 0.75), (9, 0.0), (1000, 1.0), (29.5, 0.75)])
    def test_values(self, c, want):
        assert cdf(self.U, c) == want


class TestResample:
    def test_rounds_up(self):
        assert resample(pmf({10: 0.75, 30: 0.25}), 20) == pmf({20: 0.75, 40: 0.25})

    def test_identity(self, beta27):
        out = resample(beta27, 1)
        assert out.origin == beta27.origin
        # renormalisation may touch the last bit
        np.testing.assert_allclose(out.masses, beta27.masses, rtol=1e-15, atol=0)

    def test_bucket_aggregation(self):
        got = resample(pmf({10: 0.5, 15: 0.3, 30: 0.2}), 15)
        assert got == pmf({15: 0.8, 30: 0.2})
        assert got.granularity == 15

    def test_preserves_mass(self, beta27):
        assert resample(beta27, 50).masses.sum() == pytest.approx(1.0, abs=1e-12)


class TestDominance:
    def test_resample_dominates(self, beta27):
        for delta in (7, 50, 1250):
            assert dominates(resample(beta27, delta), beta27)

    def test_reflexive(self, beta27):
        assert dominates(beta27, beta27)

    def test_point_masses(self):
        lo, hi = pmf({10: 1.0}), pmf({20: 1.0})
        assert not dominates(lo, hi)
        assert dominates(hi, lo)


class TestFiles:
    def test_round_trip(self, tmp_path):
        original = pmf({10: 0.125, 17: 0.5, 40: 0.375})
        path = tmp_path / "u.pmf"
        write_pmf(original, path)
        assert path.read_text().startswith("# cbsprob-pmf v1\n")
        assert read_pmf(path) == original

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "u.pmf"
        path.write_text("# cbsprob-pmf v9\n10 1.0\n")
        with pytest.raises(DistributionError, match="unsupported"):
            read_pmf(path)

    def test_renormalises_small_error(self, tmp_path):
        path = tmp_path / "u.pmf"
        path.write_text("# cbsprob-pmf v1\n10 0.5\n20 0.5000001\n")
        assert read_pmf(path).masses.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("body, message", [
        ("10 0.5\n20 0.6\n", "sum to"),
        ("20 0.5\n10 0.5\n", "strictly increasing"),
        ("10 0.5 3\n", "expected"),
        ("10 -0.5\n20 1.5\n", "negative"),
    ])
    def test_rejects(self, tmp_path, body, message):
        path = tmp_path / "bad.pmf"
        path.write_text("# cbsprob-pmf v1\n" + body)
        with pytest.raises(DistributionError, match=message):
            read_pmf(path)


def test_truncate_drops_small_masses():
    out = truncate(pmf({1: 1e-20, 2: 0.5, 3: 0.5}), 1e-15)
    assert out.c_min == 2


def test_pmf_rejects_negative_mass():
    with pytest.raises(DistributionError):
        PMF(0, np.array([0.5, -0.1, 0.6]))
