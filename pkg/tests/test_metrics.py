import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate
from scipy.stats import norm

from gmcopula.config import ModelConfig, build_model
from gmcopula.data import Dataset, ImtsInstance, ToySpec, gen_toy, toy_dataset
from gmcopula.metrics import (METRICS, MetricReport, check_metric_names, coordinate_w1, crps, empirical_w1,
                              energy_score, evaluate, mnll, mse, njnll)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def gaussian_crps(mu, sigma, y):
    z = (y - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / math.sqrt(math.pi))


class StandardNormalModel:
    """Independent standard normal predictive for every query."""

    def log_prob(self, batch):
        lp = -0.5 * batch.y ** 2 - 0.5 * math.log(2 * math.pi)
        return (lp * batch.q_mask).sum(-1)


class TestWasserstein:
    def test_identical_is_zero(self, rng):
        x = rng.normal(size=500)
        assert empirical_w1(x, rng.permutation(x)) == 0.0

    @given(arrays(np.float64, 20, elements=finite), st.floats(-50, 50))
    def test_shift(self, x, c):
        assert empirical_w1(x, x + c) == pytest.approx(abs(c), abs=1e-9)

    @given(arrays(np.float64, 15, elements=finite), arrays(np.float64, 15, elements=finite))
    def test_symmetric(self, a, b):
        assert empirical_w1(a, b) == empirical_w1(b, a)

    def test_normal_vs_uniform(self):
        ref, _ = integrate.quad(lambda p: abs(norm.ppf(p) - math.sqrt(3) * (2 * p - 1)), 0, 1, limit=200)
        g = np.random.default_rng(0)
        est = empirical_w1(g.standard_normal(100_000), g.uniform(-math.sqrt(3), math.sqrt(3), 100_000))
        assert est == pytest.approx(ref, rel=0.02)

    def test_errors(self):
        with pytest.raises(ValueError):
            empirical_w1([1.0, 2.0], [1.0])
        with pytest.raises(ValueError):
            empirical_w1([], [])

    def test_coordinate_average(self, rng):
        a = rng.normal(size=(100, 3))
        b = a + np.array([1.0, 2.0, 3.0])
        assert coordinate_w1(a, b) == pytest.approx(2.0)


class TestScores:
    def test_degenerate_at_target(self):
        s = np.full((10, 3), 2.5)
        assert energy_score(s, [2.5] * 3) == 0.0
        assert crps(s, [2.5] * 3) == 0.0
        assert mse(s, [2.5] * 3) == 0.0

    @given(arrays(np.float64, (12, 1), elements=finite), finite)
    def test_energy_equals_crps_in_one_dim(self, s, y):
        assert energy_score(s, [y]) == pytest.approx(crps(s, [y]), rel=1e-9, abs=1e-9)

    def test_energy_matches_direct(self, rng):
        s, y = rng.normal(size=(40, 3)), rng.normal(size=3)
        first = np.mean([np.linalg.norm(x - y) for x in s])
        second = np.mean([np.linalg.norm(a - b) for i, a in enumerate(s) for j, b in enumerate(s) if i != j])
        assert energy_score(s, y, chunk=7) == pytest.approx(first - 0.5 * second, rel=1e-12)

    def test_crps_standard_normal(self):
        s = np.random.default_rng(0).standard_normal((100_000, 1))
        assert gaussian_crps(0, 1, 0) == pytest.approx(0.2337, abs=1e-4)
        assert crps(s, [0.0]) == pytest.approx(gaussian_crps(0, 1, 0), abs=5e-3)

    def test_crps_shifted_normal(self):
        s = 1.0 + 2.0 * np.random.default_rng(1).standard_normal((100_000, 1))
        assert crps(s, [3.0]) == pytest.approx(gaussian_crps(1.0, 2.0, 3.0), rel=1e-2)

    @given(arrays(np.float64, (8, 2), elements=finite), arrays(np.float64, 2, elements=finite))
    def test_crps_at_most_mae(self, s, y):
        assert crps(s, y) <= np.abs(s - y).mean() + 1e-9

    def test_mse(self):
        s = np.array([[0.0, 1.0], [2.0, 3.0]])
        assert mse(s, [1.0, 0.0]) == pytest.approx((0.0 + 4.0) / 2)

    def test_sample_errors(self):
        with pytest.raises(ValueError):
            crps(np.zeros((1, 2)), [0.0, 0.0])
        with pytest.raises(ValueError):
            energy_score(np.zeros((5, 2)), [0.0])


class TestLikelihood:
    def test_standard_normal_at_zero(self):
        inst = ImtsInstance([], [(0.0, 0)], [0.0])
        assert njnll(StandardNormalModel(), inst) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_single_query_mnll_equals_njnll(self, rng):
        torch.manual_seed(0)
        m = build_model(ModelConfig(channels=2))
        inst = ImtsInstance([(0.1, 0, 0.4)], [(0.5, 1)], [0.3])
        assert mnll(m, inst) == pytest.approx(njnll(m, inst), abs=1e-12)

    def test_mnll_ignores_copula(self):
        torch.manual_seed(0)
        m = build_model(ModelConfig(channels=2))
        inst = ImtsInstance([], [(0.0, 0), (0.0, 1)], [0.3, -0.2])
        from gmcopula.copula import JointModel
        assert mnll(m, inst) == pytest.approx(njnll(JointModel(m.marginal, None), inst), abs=1e-12)

    def test_needs_targets(self):
        with pytest.raises(ValueError):
            njnll(StandardNormalModel(), ImtsInstance([], [(0.0, 0)]))


class TestReport:
    def test_unknown_metric(self):
        with pytest.raises(ValueError, match="valid names"):
            check_metric_names(["njnll", "bogus"])

    def test_evaluate_and_csv(self, tmp_path):
        torch.manual_seed(0)
        m = build_model(ModelConfig(channels=2, copula_components=2))
        ds = toy_dataset(gen_toy(ToySpec("x_shape", n=12)))
        rep = evaluate(m, ds, METRICS, samples=200, chunk=5)
        assert set(rep.values) == set(METRICS)
        assert all(v.shape == (12,) for v in rep.values.values())
        path = tmp_path / "metrics.csv"
        rep.write_csv(path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["instance"] + list(METRICS)
        assert [r[0] for r in rows[-2:]] == ["mean", "std"]
        assert float(rows[-2][1]) == pytest.approx(rep.mean("njnll"))
        assert "njnll" in rep.table()

    def test_evaluate_njnll_matches_instancewise(self):
        torch.manual_seed(1)
        m = build_model(ModelConfig(channels=2))
        ds = toy_dataset(gen_toy(ToySpec("ring", n=6)))
        rep = evaluate(m, ds, ["njnll", "mnll"])
        np.testing.assert_allclose(rep.values["njnll"], [njnll(m, i) for i in ds.instances], atol=1e-12)
        np.testing.assert_allclose(rep.values["mnll"], [mnll(m, i) for i in ds.instances], atol=1e-12)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            evaluate(StandardNormalModel(), Dataset([], 1), ["njnll"])

    def test_summary(self):
        rep = MetricReport({"mse": np.array([1.0, 3.0])})
        assert rep.summary() == {"mse": (2.0, 1.0)}
