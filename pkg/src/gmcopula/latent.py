"""Latent N-dimensional Gaussian mixture with low-rank-plus-identity correlation.

Each component covariance is ``Sigma = D R D`` with ``R`` the correlation
matrix of ``G = U U^T + I``. Writing ``a_n = sigma_n / sqrt(G_nn)`` gives
``Sigma = A (U U^T + I) A`` with ``A = diag(a)``, so every density evaluation
works on the H x H capacitance ``I + U^T U`` and never forms an N x N matrix.

All functions broadcast over leading batch axes. Shapes: weights ``(..., K)``,
means and stddevs ``(..., K, N)``, factors ``(..., K, N, H)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .univariate import DTYPE, Gmm1dParams

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentGmmParams:
    weights: torch.Tensor
    means: torch.Tensor
    stddevs: torch.Tensor
    factors: torch.Tensor

    def __post_init__(self):
        k, n = self.means.shape[-2:]
        if self.weights.shape[-1] != k or self.stddevs.shape[-2:] != (k, n):
            raise ValueError("inconsistent mixture shapes")
        if self.factors.shape[-3:-1] != (k, n) or self.factors.shape[-1] < 1:
            raise ValueError("factors must have shape (..., K, N, H) with H >= 1")

    def validate(self):
        if not torch.allclose(self.weights.sum(-1), torch.ones((), dtype=self.weights.dtype), atol=1e-12, rtol=0):
            raise ValueError("mixture weights must sum to 1")
        if bool((self.weights < 0).any()):
            raise ValueError("mixture weights must be non-negative")
        if not bool((self.stddevs > 0).all()):
            raise ValueError("stddevs must be strictly positive")
        if not bool(torch.isfinite(self.factors).all()):
            raise ValueError("factors must be finite")
        return self

    @property
    def n_components(self) -> int:
        return self.means.shape[-2]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def rank(self) -> int:
        return self.factors.shape[-1]


@dataclass
class LowRankGaussian:
    mean: torch.Tensor          # (..., N)
    diag_scale: torch.Tensor    # (..., N)  a_n = sigma_n / sqrt(1 + |U_n|^2)
    factor: torch.Tensor        # (..., N, H)
    capacitance: torch.Tensor   # (..., H, H)  I + U^T U
    cap_cholesky: torch.Tensor  # (..., H, H)
    logdet: torch.Tensor        # (...,)  log det Sigma

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def build_component(mean, stddevs, factor) -> LowRankGaussian:
    if mean.shape != stddevs.shape or factor.shape[:-1] != mean.shape:
        raise ValueError("mean, stddevs and factor rows must agree")
    if not bool((stddevs > 0).all()):
        raise ValueError("stddevs must be strictly positive")
    if not bool(torch.isfinite(factor).all()):
        raise ValueError("factor entries must be finite")
    gram_diag = 1.0 + (factor * factor).sum(-1)
    scale = stddevs / torch.sqrt(gram_diag)
    h = factor.shape[-1]
    eye = torch.eye(h, dtype=factor.dtype)
    cap = eye + factor.transpose(-1, -2) @ factor
    chol = torch.linalg.cholesky(cap)
    logdet = 2.0 * torch.log(scale).sum(-1) + 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    return LowRankGaussian(mean, scale, factor, cap, chol, logdet)


def component_logpdf(g: LowRankGaussian, z) -> torch.Tensor:
    if not bool(torch.isfinite(z).all()):
        raise ValueError("z must be finite")
    x = (z - g.mean) / g.diag_scale
    proj = (g.factor * x.unsqueeze(-1)).sum(-2)
    solved = torch.cholesky_solve(proj.unsqueeze(-1), g.cap_cholesky).squeeze(-1)
    quad = (x * x).sum(-1) - (proj * solved).sum(-1)
    return -0.5 * (g.dim * _LOG_2PI + g.logdet + quad)


def components(p: LatentGmmParams) -> LowRankGaussian:
    return build_component(p.means, p.stddevs, p.factors)


def mixture_logpdf(p: LatentGmmParams, z) -> torch.Tensor:
    """``log sum_j pi_j N(z; mu_j, Sigma_j)``; ``z`` has shape ``(..., N)``."""
    comp = component_logpdf(components(p), z.unsqueeze(-2))
    return torch.logsumexp(torch.log(p.weights) + comp, dim=-1)


def dense_covariance(g: LowRankGaussian) -> torch.Tensor:
    """Materialized Sigma; for tests and oracles only."""
    u = g.factor
    inner = u @ u.transpose(-1, -2) + torch.eye(g.dim, dtype=u.dtype)
    return g.diag_scale.unsqueeze(-1) * inner * g.diag_scale.unsqueeze(-2)


def correlation_matrix(factor) -> torch.Tensor:
    inner = factor @ factor.transpose(-1, -2) + torch.eye(factor.shape[-2], dtype=factor.dtype)
    d = torch.rsqrt(torch.diagonal(inner, dim1=-2, dim2=-1))
    return d.unsqueeze(-1) * inner * d.unsqueeze(-2)


def marginalize(p: LatentGmmParams, keep) -> LatentGmmParams:
    keep = [int(i) for i in keep]
    if not keep:
        raise ValueError("keep must be non-empty")
    if min(keep) < 0 or max(keep) >= p.dim:
        raise IndexError(f"keep indices must lie in [0, {p.dim})")
    idx = torch.as_tensor(keep, dtype=torch.long)
    return LatentGmmParams(p.weights, p.means[..., idx], p.stddevs[..., idx], p.factors[..., idx, :])


def marginal_1d(p: LatentGmmParams, n: int) -> Gmm1dParams:
    """n-th coordinate marginal of an unbatched mixture."""
    if not 0 <= n < p.dim:
        raise IndexError(f"coordinate {n} out of range for dimension {p.dim}")
    if p.weights.dim() != 1:
        raise ValueError("marginal_1d expects unbatched parameters")
    return Gmm1dParams(p.weights.detach().numpy(), p.means[:, n].detach().numpy(),
                       p.stddevs[:, n].detach().numpy())


def sample_latent(p: LatentGmmParams, count: int, generator: torch.Generator) -> torch.Tensor:
    """Draw ``count`` samples per batch element; result has shape ``(count, ..., N)``.

    Uses ``x = mu + a * (eps_std + U eps_low)`` whose covariance is exactly
    ``A (U U^T + I) A``.
    """
    with torch.no_grad():
        g = components(p)
        batch = p.weights.shape[:-1]
        k = p.n_components
        flat_w = p.weights.reshape(-1, k)
        idx = torch.multinomial(flat_w, count, replacement=True, generator=generator)  # (B, count)
        idx = idx.T.reshape((count,) + batch)
        eps_std = torch.randn((count,) + batch + (p.dim,), generator=generator, dtype=p.means.dtype)
        eps_low = torch.randn((count,) + batch + (p.rank,), generator=generator, dtype=p.means.dtype)

        def pick(t):
            t = t.expand((count,) + t.shape)
            gather_idx = idx.reshape(idx.shape + (1,) * (t.dim() - idx.dim()))
            gather_idx = gather_idx.expand(idx.shape + (1,) + t.shape[idx.dim() + 1:])
            return torch.gather(t, idx.dim(), gather_idx).squeeze(idx.dim())

        mean, scale, factor = pick(g.mean), pick(g.diag_scale), pick(g.factor)
        return mean + scale * (eps_std + (factor @ eps_low.unsqueeze(-1)).squeeze(-1))
