import math

import numpy as np
import pytest
import torch
from scipy.integrate import simpson
from scipy.special import logsumexp
from scipy.stats import kstest, multivariate_normal, norm

from gmcopula import univariate as uni
from gmcopula.config import ModelConfig, build_model
from gmcopula.copula import (JointModel, PseudoObservations, gmc_log_copula_density, infer_latent_params,
                             joint_loglik, mixgc_log_copula_density, sample_joint)
from gmcopula.data import ImtsInstance, collate
from gmcopula.flow import dsf_forward, dsf_inverse
from gmcopula.latent import LatentGmmParams
from gmcopula.metrics import coordinate_w1

D = torch.float64
T = lambda a: torch.as_tensor(np.asarray(a), dtype=D)  # noqa: E731


def gaussian_copula_logpdf(u, corr):
    z = norm.ppf(u)
    return multivariate_normal(np.zeros(len(z)), corr).logpdf(z) - norm.logpdf(z).sum()


def rho_factor(rho):
    """Rank-one factor rows whose normalized Gram has off-diagonal ``rho`` (rho > 0)."""
    c = math.sqrt(rho / (1 - rho))
    return np.array([[c], [c]])


def model(channels=3, k=3, variant="gmc", seed=0, spread=5.0):
    torch.manual_seed(seed)
    m = build_model(ModelConfig(channels=channels, copula_components=k, variant=variant))
    if variant == "gmc":
        with torch.no_grad():
            m.copula.mu_net[-1].weight.mul_(spread)
            m.copula.mu_net[-1].bias.normal_(0, 2)
    return m


def rich_instance(rng, n=3, channels=3):
    hist = [(float(rng.uniform()), int(rng.integers(channels)), float(rng.normal())) for _ in range(6)]
    queries = [(float(rng.uniform(1, 2)), int(rng.integers(channels))) for _ in range(n)]
    return ImtsInstance(hist, queries, rng.normal(size=n).tolist())


class TestLatentParams:
    def test_query_separable(self, rng):
        m = model()
        inst = rich_instance(rng, 4)
        full = infer_latent_params(m, inst)
        sub = infer_latent_params(m, inst.subset([0, 2]))
        assert torch.equal(full.weights, sub.weights)
        for name in ("means", "stddevs"):
            assert torch.equal(getattr(full, name)[:, [0, 2]], getattr(sub, name))
        assert torch.equal(full.factors[:, [0, 2]], sub.factors)

    def test_zero_heads(self, rng):
        m = model(spread=1.0)
        with torch.no_grad():
            for net in (m.copula.pi_net, m.copula.mu_net, m.copula.sigma_net, m.copula.corr_net):
                net[-1].weight.zero_()
                net[-1].bias.zero_()
        p = infer_latent_params(m, rich_instance(rng))
        np.testing.assert_allclose(p.weights.detach().numpy(), 1 / 3, atol=1e-15)
        np.testing.assert_allclose(p.stddevs.detach().numpy(), math.log(2.0), atol=1e-15)
        assert float(p.factors.detach().abs().max()) == 0.0

    def test_single_component(self, rng):
        p = infer_latent_params(model(k=1), rich_instance(rng))
        assert p.weights.shape == (1,) and float(p.weights.detach()[0]) == 1.0

    def test_empty_queries(self):
        with pytest.raises(ValueError):
            infer_latent_params(model(), ImtsInstance([], []))


class TestGmcDensity:
    def test_independence(self, rng):
        p = LatentGmmParams(T([1.0]), T(rng.normal(size=(1, 3))), T(rng.uniform(0.5, 2, (1, 3))), T(np.zeros((1, 3, 2))))
        u = T(rng.uniform(0.01, 0.99, (10, 3)))
        assert float(gmc_log_copula_density(p, u).abs().max()) < 1e-12

    def test_gaussian_copula_closed_form(self):
        rho = 0.6
        p = LatentGmmParams(T([1.0]), T([[0.7, -1.2]]), T([[0.5, 2.0]]), T(rho_factor(rho)[None]))
        got = float(gmc_log_copula_density(p, T([0.3, 0.7])))
        ref = gaussian_copula_logpdf(np.array([0.3, 0.7]), np.array([[1, rho], [rho, 1]]))
        assert got == pytest.approx(ref, abs=1e-9)

    def test_normalizes(self, rng):
        p = LatentGmmParams(T([0.4, 0.6]), T([[-1.0, 1.0], [1.5, -0.5]]), T([[0.8, 1.0], [0.6, 1.2]]),
                            T(rng.normal(0, 0.8, (2, 2, 1))))
        u = torch.rand(100_000, 2, generator=torch.Generator().manual_seed(0), dtype=D)
        c = torch.exp(gmc_log_copula_density(p, u)).numpy()
        assert abs(c.mean() - 1) <= 3 * c.std() / math.sqrt(c.size)

    def test_accepts_pseudo_observations(self):
        p = LatentGmmParams(T([1.0]), T([[0.0, 0.0]]), T([[1.0, 1.0]]), T(rho_factor(0.3)[None]))
        po = PseudoObservations(T([0.2, 0.9]), T(0.0))
        assert float(gmc_log_copula_density(p, po)) == float(gmc_log_copula_density(p, po.u))

    def test_pseudo_observations_validate(self):
        with pytest.raises(ValueError):
            PseudoObservations(T([0.0, 0.5]), T(0.0))

    def test_solver_failure_names_coordinate(self):
        p = LatentGmmParams(T([0.5, 0.5]), T([[-30.0, 0.0], [30.0, 0.0]]), T([[0.1, 1.0], [3.0, 1.0]]),
                            T(np.zeros((2, 2, 1))))
        with pytest.raises(uni.IcdfSolverError, match="latent coordinate 0"):
            gmc_log_copula_density(p, T([0.3, 0.5]), budget=1)

    def test_gradients_through_heads(self, rng):
        raw = T(rng.normal(size=(2 * 3 + 2 * 3 + 2 * 3 + 2,)))

        def f(x):
            w = torch.softmax(x[:2], -1)
            mu = x[2:8].reshape(2, 3)
            sd = torch.nn.functional.softplus(x[8:14].reshape(2, 3))
            fac = x[14:20].reshape(2, 3, 1)
            return gmc_log_copula_density(LatentGmmParams(w, mu, sd, fac), T([0.2, 0.55, 0.9]), tol=1e-12)

        x = raw.clone().requires_grad_(True)
        f(x).backward()
        h, fd = 1e-6, np.zeros(raw.numel())
        for i in range(raw.numel()):
            e = torch.zeros_like(raw)
            e[i] = h
            fd[i] = (float(f(raw + e)) - float(f(raw - e))) / (2 * h)
        ad = x.grad.numpy()
        assert np.abs(fd - ad).max() / np.abs(ad).max() <= 1e-3


class TestMixgcDensity:
    def test_single_component(self):
        rho = 0.45
        p = LatentGmmParams(T([1.0]), T([[3.0, 3.0]]), T([[5.0, 5.0]]), T(rho_factor(rho)[None]))
        u = np.array([0.15, 0.8])
        ref = gaussian_copula_logpdf(u, np.array([[1, rho], [rho, 1]]))
        assert float(mixgc_log_copula_density(p, T(u))) == pytest.approx(ref, abs=1e-10)

    def test_identity_correlation(self, rng):
        p = LatentGmmParams(T([0.3, 0.7]), T(np.zeros((2, 3))), T(np.ones((2, 3))), T(np.zeros((2, 3, 2))))
        assert float(mixgc_log_copula_density(p, T(rng.uniform(0.01, 0.99, (5, 3)))).abs().max()) < 1e-13

    def test_two_components(self):
        rhos, w = (0.3, 0.8), np.array([0.35, 0.65])
        fac = np.stack([rho_factor(r) for r in rhos])
        p = LatentGmmParams(T(w), T(np.zeros((2, 2))), T(np.ones((2, 2))), T(fac))
        for u in ([0.2, 0.3], [0.9, 0.05], [0.5, 0.5]):
            u = np.array(u)
            ref = logsumexp([math.log(w[j]) + gaussian_copula_logpdf(u, np.array([[1, r], [r, 1]]))
                             for j, r in enumerate(rhos)])
            assert float(mixgc_log_copula_density(p, T(u))) == pytest.approx(ref, abs=1e-10)


class TestJoint:
    @torch.no_grad()
    def test_independence_mode(self, rng):
        m = model()
        inst = rich_instance(rng)
        indep = JointModel(m.marginal, None)
        assert float(joint_loglik(indep, inst)) == float(m.marginal.log_prob(collate([inst]))[0])

    @pytest.mark.parametrize("variant", ["gmc", "mixgc"])
    @torch.no_grad()
    def test_single_query_has_no_copula_term(self, rng, variant):
        m = model(variant=variant)
        inst = rich_instance(rng, 1)
        cop = m.copula_term(collate([inst]), m.pseudo_observations(collate([inst]))[0])
        assert abs(float(cop)) < 1e-12

    @pytest.mark.parametrize("variant", ["gmc", "mixgc"])
    @torch.no_grad()
    def test_order_invariance(self, rng, variant):
        m = model(variant=variant)
        inst = rich_instance(rng, 4)
        perm = [2, 0, 3, 1]
        assert float(joint_loglik(m, inst)) == pytest.approx(float(joint_loglik(m, inst.subset(perm))), abs=1e-10)

    def test_needs_targets(self, rng):
        with pytest.raises(ValueError):
            joint_loglik(model(), ImtsInstance([], [(0.0, 0)]))

    @pytest.mark.parametrize("variant", ["gmc", "mixgc"])
    def test_two_dim_normalizes(self, rng, variant):
        m = model(channels=2, variant=variant, spread=2.0)
        inst = ImtsInstance([(0.2, 0, 0.5), (0.4, 1, -0.3)], [(1.0, 0), (1.0, 1)])
        batch = collate([inst])
        with torch.no_grad():
            params = m.marginal.dsf_params(batch)
        s = np.linspace(-23, 23, 401)
        sig = torch.sigmoid(T(s))
        ys, log_jac = [], []
        for n in range(2):
            pn = params.index((0, n))
            y = dsf_inverse(pn, sig)
            ys.append(y)
            log_jac.append(torch.log(sig * (1 - sig)) - dsf_forward(pn, y)[1])
        y1, y2 = torch.meshgrid(ys[0], ys[1], indexing="ij")
        grid = torch.stack([y1.reshape(-1), y2.reshape(-1)], -1)
        with torch.no_grad():
            logp = m.log_prob_values(batch, grid).reshape(401, 401)
        dens = torch.exp(logp + log_jac[0][:, None] + log_jac[1][None, :]).numpy()
        total = simpson(simpson(dens, x=s, axis=1), x=s)
        assert total == pytest.approx(1.0, abs=1e-3)


class TestSampling:
    @pytest.mark.parametrize("variant", ["gmc", "mixgc"])
    def test_pseudo_observations_uniform(self, rng, variant):
        m = model(variant=variant)
        _, u = m.sample(collate([rich_instance(rng)]), 10_000, torch.Generator().manual_seed(0), return_uniforms=True)
        for n in range(3):
            assert kstest(u[:, 0, n].numpy(), "uniform").pvalue > 0.01

    def test_independent_latent_uncorrelated(self, rng):
        m = model(k=1, spread=1.0)
        with torch.no_grad():
            m.copula.corr_net[-1].weight.zero_()
            m.copula.corr_net[-1].bias.zero_()
        ys = sample_joint(m, rich_instance(rng, 2), 20_000, torch.Generator().manual_seed(1)).numpy()
        r = np.corrcoef(ys.T)[0, 1]
        assert abs(r) < 5 / math.sqrt(ys.shape[0])

    def test_marginals_match_flow(self, rng):
        m = model()
        inst = rich_instance(rng)
        gen = torch.Generator().manual_seed(2)
        joint = sample_joint(m, inst, 20_000, gen).numpy()
        indep = JointModel(m.marginal, None)
        a = sample_joint(indep, inst, 20_000, gen).numpy()
        b = sample_joint(indep, inst, 20_000, gen).numpy()
        gap, ctrl = coordinate_w1(joint, a), coordinate_w1(a, b)
        assert gap < 3 * ctrl + 1e-3

    def test_deterministic(self, rng):
        m = model()
        inst = rich_instance(rng)
        a = sample_joint(m, inst, 100, torch.Generator().manual_seed(5))
        b = sample_joint(m, inst, 100, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)
