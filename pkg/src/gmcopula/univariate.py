"""One-dimensional Gaussian mixture: CDF, PDF, inverse CDF and its implicit gradients.

The batched tensor functions (``cdf``, ``log_pdf``, ``solve_icdf``) operate on
``weights``, ``means`` and ``stddevs`` with a trailing component axis and are
what the copula uses during training. ``GmmIcdf`` is the autograd function
that runs the solver without recording a tape and supplies the analytic
adjoint in the backward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64
PDF_FLOOR = 1e-8
BRACKET_HALF_WIDTH = 10.0
# Phi(-10); outside (U_MIN, 1 - U_MIN) the root may leave the initial bracket.
U_MIN = 7.61985302416047e-24
DEFAULT_BUDGET = 50
DEFAULT_TOL = 1e-10

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def broadcast_shape(*shapes):
    # torch.broadcast_shapes imports sympy on first use
    return torch.Size(np.broadcast_shapes(*[tuple(s) for s in shapes]))


class IcdfSolverError(RuntimeError):
    """Raised when the inverse-CDF residual is still above tolerance after the budget."""

    def __init__(self, message, z=None, residual=None, index=None):
        super().__init__(message)
        self.z = z
        self.residual = residual
        self.index = index


@dataclass(frozen=True)
class Gmm1dParams:
    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "stddevs"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        k = self.weights.shape[-1]
        if self.means.shape[-1] != k or self.stddevs.shape[-1] != k:
            raise ValueError("weights, means and stddevs must have the same length")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.stddevs))):
            raise ValueError("mixture parameters must be finite")
        if np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {self.weights.sum()!r}")
        if np.any(self.stddevs <= 0):
            raise ValueError("stddevs must be strictly positive")

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[-1])

    def tensors(self):
        return (torch.as_tensor(self.weights, dtype=DTYPE),
                torch.as_tensor(self.means, dtype=DTYPE),
                torch.as_tensor(self.stddevs, dtype=DTYPE))


@dataclass
class IcdfSolveResult:
    z: float
    residual: float
    iterations_used: int
    clamped: bool = False


@dataclass
class IcdfGrads:
    d_z_d_weight: np.ndarray
    d_z_d_mean: np.ndarray
    d_z_d_var: np.ndarray


# --- batched tensor kernels -------------------------------------------------

def normal_cdf(t):
    """Standard normal CDF via erfc, accurate in the lower tail (ndtr flushes below ~1e-16)."""
    return 0.5 * torch.special.erfc(-t * _INV_SQRT2)


def cdf(weights, means, stddevs, z):
    """Mixture CDF; ``z`` has the batch shape, parameters carry a trailing K axis."""
    t = (z.unsqueeze(-1) - means) / stddevs
    return (weights * normal_cdf(t)).sum(-1)


def log_pdf(weights, means, stddevs, z):
    t = (z.unsqueeze(-1) - means) / stddevs
    terms = torch.log(weights) - torch.log(stddevs) - 0.5 * t * t - _LOG_SQRT_2PI
    return torch.logsumexp(terms, dim=-1)


def pdf(weights, means, stddevs, z):
    return torch.exp(log_pdf(weights, means, stddevs, z))


def initial_bracket(means, stddevs):
    spread = BRACKET_HALF_WIDTH * stddevs.amax(-1)
    return means.amin(-1) - spread, means.amax(-1) + spread


@torch.no_grad()
def solve_icdf(weights, means, stddevs, u, budget=DEFAULT_BUDGET, tol=DEFAULT_TOL,
               check_bracket=False):
    """Safeguarded Newton-bisection for ``F(z) = u``, batched over the leading axes.

    Returns ``(z, residual, iterations, clamped)`` tensors. Iteration stops once
    every element satisfies ``|F(z) - u| <= tol`` or the budget is spent.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    u = torch.as_tensor(u, dtype=weights.dtype)
    u = u.expand(broadcast_shape(u.shape, means.shape[:-1])).clone()
    clamped = (u < U_MIN) | (u > 1.0 - U_MIN)
    u = u.clamp(U_MIN, 1.0 - U_MIN)
    low, high = initial_bracket(means, stddevs)
    low, high = low.expand_as(u).clone(), high.expand_as(u).clone()
    x = 0.5 * (low + high)
    step_prev = high - low
    step_prev2 = high - low
    iterations = torch.zeros(u.shape, dtype=torch.long)
    done = torch.zeros(u.shape, dtype=torch.bool)
    for _ in range(budget):
        F = cdf(weights, means, stddevs, x)
        gap = F - u
        done = gap.abs() <= tol
        if bool(done.all()):
            break
        active = ~done
        iterations += active.long()
        below = gap < 0
        low = torch.where(active & below, x, low)
        high = torch.where(active & ~below, x, high)
        if check_bracket:
            assert bool((cdf(weights, means, stddevs, low) <= u).all()), "bracket lost its lower end"
            assert bool((cdf(weights, means, stddevs, high) >= u).all()), "bracket lost its upper end"
        f = pdf(weights, means, stddevs, x).clamp_min(PDF_FLOOR)
        newton = x - gap / f
        # Newton must stay in the bracket and at least halve the step of two iterations
        # ago; otherwise it can ping-pong inside the bracket without shrinking it.
        accept = (newton >= low) & (newton <= high) & (2.0 * (gap / f).abs() <= step_prev2)
        step = torch.where(accept, newton, 0.5 * (low + high))
        step_prev2 = torch.where(active, step_prev, step_prev2)
        step_prev = torch.where(active, (step - x).abs(), step_prev)
        x = torch.where(active, step, x)
    residual = (cdf(weights, means, stddevs, x) - u).abs()
    return x, residual, iterations, clamped


def icdf_partials(weights, means, stddevs, z):
    """Implicit-function partials of the root with respect to weights, means and stddevs.

    Weights are treated as free scalars; the simplex projection is composed
    outside by autograd.
    """
    t = (z.unsqueeze(-1) - means) / stddevs
    f = pdf(weights, means, stddevs, z).unsqueeze(-1)
    phi = torch.exp(-0.5 * t * t - _LOG_SQRT_2PI)
    d_weight = -normal_cdf(t) / f
    d_mean = weights * phi / (stddevs * f)
    d_std = weights * phi * t / (stddevs * f)
    return d_weight, d_mean, d_std, f.squeeze(-1)


class GmmIcdf(torch.autograd.Function):
    """``z = F^{-1}(u)``: solver forward, analytic adjoint backward.

    The gradient with respect to ``u`` is ``1 / f(z)``; the copula stage never
    needs it, but the joint-ablation stage trains the marginal flow through it.
    """

    @staticmethod
    def forward(ctx, u, weights, means, stddevs, budget, tol):
        z, residual, _, _ = solve_icdf(weights.detach(), means.detach(), stddevs.detach(),
                                       u.detach(), budget=budget, tol=tol)
        bad = residual > tol
        if bool(bad.any()):
            index = tuple(int(i) for i in torch.nonzero(bad)[0])
            raise IcdfSolverError(
                f"inverse CDF did not converge at index {index}: residual {float(residual[index]):.3e}",
                z=z, residual=residual, index=index)
        ctx.save_for_backward(z, weights, means, stddevs)
        return z

    @staticmethod
    def backward(ctx, grad_z):
        z, weights, means, stddevs = ctx.saved_tensors
        d_weight, d_mean, d_std, f = icdf_partials(weights, means, stddevs, z)
        g = grad_z.unsqueeze(-1)
        return grad_z / f, g * d_weight, g * d_mean, g * d_std, None, None


def icdf(u, weights, means, stddevs, budget=DEFAULT_BUDGET, tol=DEFAULT_TOL):
    shape = broadcast_shape(u.shape, means.shape[:-1])
    return GmmIcdf.apply(u.expand(shape), weights.expand(shape + weights.shape[-1:]),
                         means.expand(shape + means.shape[-1:]),
                         stddevs.expand(shape + stddevs.shape[-1:]), budget, tol)


# --- scalar API ---------------------------------------------------------------

def _scalar(z) -> torch.Tensor:
    z = float(z)
    if not math.isfinite(z):
        raise ValueError(f"z must be finite, got {z!r}")
    return torch.tensor(z, dtype=DTYPE)


def gmm_cdf(p: Gmm1dParams, z: float) -> float:
    return float(cdf(*p.tensors(), _scalar(z)))


def gmm_pdf(p: Gmm1dParams, z: float) -> float:
    return float(pdf(*p.tensors(), _scalar(z)))


def gmm_icdf(p: Gmm1dParams, u: float, budget: int = DEFAULT_BUDGET, tol: float = DEFAULT_TOL,
             check_bracket: bool = False) -> IcdfSolveResult:
    u = float(u)
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must lie strictly inside (0, 1), got {u!r}")
    z, residual, iterations, clamped = solve_icdf(*p.tensors(), torch.tensor(u, dtype=DTYPE),
                                                 budget=budget, tol=tol, check_bracket=check_bracket)
    if float(residual) > tol:
        raise IcdfSolverError(f"inverse CDF residual {float(residual):.3e} above tol {tol:.1e} "
                              f"after {budget} iterations", z=float(z), residual=float(residual))
    return IcdfSolveResult(float(z), float(residual), int(iterations), bool(clamped))


def gmm_icdf_grads(p: Gmm1dParams, z: float, u: float) -> IcdfGrads:
    """Closed forms for dz/dweight, dz/dmean and dz/dvariance at a solved root."""
    z_t = _scalar(z)
    if not math.isfinite(float(u)):
        raise ValueError("u must be finite")
    w, m, s = p.tensors()
    d_weight, d_mean, d_std, _ = icdf_partials(w, m, s, z_t)
    d_var = d_std / (2.0 * s)
    return IcdfGrads(d_weight.numpy(), d_mean.numpy(), d_var.numpy())
