"""Gaussian mixture copula (and the mixture-of-Gaussian-copulas ablation) on top of flow marginals."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from . import univariate as uni
from .data import ImtsBatch, ImtsInstance, collate
from .flow import HistoryEncoder, MarginalFlow, dsf_forward, mlp
from .latent import LatentGmmParams, component_logpdf, build_component, mixture_logpdf, sample_latent
from .univariate import DTYPE

U_CLAMP = 1e-7
VARIANTS = ("gmc", "mixgc")
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class PseudoObservations:
    u: torch.Tensor
    marginal_loglik_sum: torch.Tensor

    def __post_init__(self):
        if not bool(((self.u > 0) & (self.u < 1)).all()):
            raise ValueError("pseudo-observations must lie strictly inside (0, 1)")


class CopulaModel(nn.Module):
    """Predicts latent mixture parameters from its own encoder instance.

    ``pi`` comes from an attention-pooled history summary only; means, stddevs and
    factor rows for query ``n`` come from ``e_n`` only.
    """

    def __init__(self, channels: int, components: int = 5, rank: int = 2, dim: int = 32,
                 hidden: int = 32, variant: str = "gmc", horizon: float = 1.0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.components, self.rank, self.variant = components, rank, variant
        self.encoder = HistoryEncoder(channels, dim, horizon=horizon)
        self.attention_query = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.pi_net = mlp(dim, hidden, components)
        self.corr_net = mlp(dim, hidden, components * rank)
        if variant == "gmc":
            self.mu_net = mlp(dim, hidden, components)
            self.sigma_net = mlp(dim, hidden, components)

    def pool(self, summary):
        scores = (summary * self.attention_query).sum(-1) / math.sqrt(summary.shape[-1])
        attn = torch.softmax(scores, -1)
        return (attn.unsqueeze(-1) * summary).sum(-2)

    def latent_params(self, batch: ImtsBatch) -> LatentGmmParams:
        """Batched parameters; padded query slots get mean 0, stddev 1 and zero factor rows."""
        if batch.q_t.shape[1] == 0:
            raise ValueError("instance has no queries")
        summary, e = self.encoder(batch)
        weights = torch.softmax(self.pi_net(self.pool(summary)), -1)
        b, n = batch.q_t.shape
        k, h = self.components, self.rank
        mask = batch.q_mask.unsqueeze(1)
        factors = self.corr_net(e).reshape(b, n, k, h).permute(0, 2, 1, 3)
        factors = factors * mask.unsqueeze(-1)
        if self.variant == "gmc":
            means = self.mu_net(e).transpose(1, 2) * mask
            stddevs = torch.where(mask, F.softplus(self.sigma_net(e)).transpose(1, 2), torch.ones((), dtype=DTYPE))
        else:
            means = torch.zeros(b, k, n, dtype=DTYPE)
            stddevs = torch.ones(b, k, n, dtype=DTYPE)
        return LatentGmmParams(weights, means, stddevs, factors)

    def log_density(self, batch: ImtsBatch, u, budget=uni.DEFAULT_BUDGET, tol=uni.DEFAULT_TOL):
        p = self.latent_params(batch)
        u = torch.where(batch.q_mask, u.clamp(U_CLAMP, 1.0 - U_CLAMP), torch.full_like(u, 0.5))
        if self.variant == "gmc":
            return gmc_log_copula_density(p, u, budget, tol)
        return mixgc_log_copula_density(p, u)


def gmc_log_copula_density(p: LatentGmmParams, u, budget=uni.DEFAULT_BUDGET, tol=uni.DEFAULT_TOL):
    """``log g(z) - sum_n log g_n(z_n)`` with ``z_n = F_{GMM,n}^{-1}(u_n)``."""
    u = u.u if isinstance(u, PseudoObservations) else u
    w = p.weights.unsqueeze(-2)                 # (..., 1, K)
    means = p.means.transpose(-1, -2)           # (..., N, K)
    stds = p.stddevs.transpose(-1, -2)
    try:
        z = uni.icdf(u, w, means, stds, budget, tol)
    except uni.IcdfSolverError as err:
        raise uni.IcdfSolverError(f"latent coordinate {err.index[-1]}: {err}", err.z, err.residual,
                                  err.index) from None
    joint = mixture_logpdf(p, z)
    marg = uni.log_pdf(w, means, stds, z).sum(-1)
    return joint - marg


def mixgc_log_copula_density(p: LatentGmmParams, u):
    """``log sum_j pi_j c_{R_j}(u)``; component means and scales are ignored."""
    u = u.u if isinstance(u, PseudoObservations) else u
    z = torch.special.ndtri(u)
    ones = torch.ones_like(p.stddevs)
    g = build_component(torch.zeros_like(p.means), ones, p.factors)
    comp = component_logpdf(g, z.unsqueeze(-2))
    std_normal = (-0.5 * z * z - _LOG_SQRT_2PI).sum(-1)
    return torch.logsumexp(torch.log(p.weights) + comp, -1) - std_normal


class JointModel(nn.Module):
    """Flow marginals combined with a copula through Sklar's decomposition.

    With ``copula=None`` the model is in independence mode (copula density 1).
    """

    def __init__(self, marginal: MarginalFlow, copula: CopulaModel | None = None):
        super().__init__()
        self.marginal = marginal
        self.copula = copula
        self.icdf_budget = uni.DEFAULT_BUDGET
        self.icdf_tol = uni.DEFAULT_TOL

    def pseudo_observations(self, batch: ImtsBatch):
        u, log_f = self.marginal(batch)
        return u, (log_f * batch.q_mask).sum(-1)

    def copula_term(self, batch: ImtsBatch, u):
        if self.copula is None:
            return torch.zeros(len(batch), dtype=DTYPE)
        return self.copula.log_density(batch, u, self.icdf_budget, self.icdf_tol)

    def log_prob_terms(self, batch: ImtsBatch):
        u, marg = self.pseudo_observations(batch)
        return self.copula_term(batch, u), marg

    def log_prob(self, batch: ImtsBatch):
        cop, marg = self.log_prob_terms(batch)
        return cop + marg

    def log_prob_values(self, batch: ImtsBatch, y):
        """Joint log-density of many target vectors ``y`` of shape ``(P, N)`` for one instance.

        Parameters are inferred once; all queries of the single-instance batch are used.
        """
        if len(batch) != 1:
            raise ValueError("log_prob_values expects a single-instance batch")
        u, log_f = dsf_forward(self.marginal.dsf_params(batch), y)
        marg = log_f.sum(-1)
        if self.copula is None:
            return marg
        p = self.copula.latent_params(batch)
        u = u.clamp(U_CLAMP, 1.0 - U_CLAMP)
        if self.copula.variant == "gmc":
            cop = gmc_log_copula_density(p, u, self.icdf_budget, self.icdf_tol)
        else:
            cop = mixgc_log_copula_density(p, u)
        return cop + marg

    @torch.no_grad()
    def sample(self, batch: ImtsBatch, count: int, generator: torch.Generator, return_uniforms: bool = False):
        """``(count, B, N)`` target samples; padded slots are meaningless."""
        b, n = batch.q_t.shape
        if self.copula is None:
            u = torch.rand((count, b, n), generator=generator, dtype=DTYPE)
        else:
            p = self.copula.latent_params(batch)
            z = sample_latent(p, count, generator)
            u = uni.cdf(p.weights.unsqueeze(-2), p.means.transpose(-1, -2), p.stddevs.transpose(-1, -2), z)
        u = u.clamp(torch.finfo(DTYPE).tiny, 1.0 - torch.finfo(DTYPE).eps / 2)
        y = self.marginal.invert(batch, u)
        return (y, u) if return_uniforms else y


# --- instance-level API ----------------------------------------------------------------

def infer_latent_params(m: JointModel, instance: ImtsInstance) -> LatentGmmParams:
    if not instance.queries:
        raise ValueError("instance has no queries")
    if m.copula is None:
        raise ValueError("model has no copula")
    p = m.copula.latent_params(collate([instance]))
    return LatentGmmParams(p.weights[0], p.means[0], p.stddevs[0], p.factors[0])


def joint_loglik(m: JointModel, instance: ImtsInstance) -> torch.Tensor:
    if len(instance.targets) != len(instance.queries) or not instance.queries:
        raise ValueError("every query needs a target")
    return m.log_prob(collate([instance]))[0]


def sample_joint(m: JointModel, instance: ImtsInstance, count: int, generator: torch.Generator):
    return m.sample(collate([instance]), count, generator)[:, 0, :]
