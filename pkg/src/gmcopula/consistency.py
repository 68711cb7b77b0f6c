"""Marginalization-consistency probes.

Density mode integrates the joint density over the last query by refined Simpson
quadrature and compares it with the density the model assigns when that query is
never asked. Sampling mode compares samples drawn for a query subset directly with
samples drawn for the full query set and then projected, against a two-seed control.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .copula import JointModel
from .data import ImtsInstance, collate
from .flow import dsf_forward, dsf_inverse
from .metrics import coordinate_w1
from .univariate import DTYPE

QUANTILE_EDGE = 1e-10


@dataclass
class DensityReport:
    max_rel_error: float
    probes: int
    nodes: int


@dataclass
class SamplingReport:
    w1_direct_vs_marginalized: float
    w1_control: float
    samples: int


def _require(instance: ImtsInstance, n: int):
    if len(instance.queries) < n:
        raise ValueError(f"instance needs at least {n} queries, has {len(instance.queries)}")


def _refined_quadrature(integrand, low: float, high: float, nodes: int, rtol: float, max_nodes: int):
    """Nested trapezoid sums with one Richardson step (Simpson's rule).

    The step is halved, reusing old nodes, until successive Simpson estimates agree
    to ``rtol``. ``integrand`` maps a ``(G,)`` grid to values of shape ``(P, G)``.
    Returns the estimate and the final node count.
    """
    grid = torch.linspace(low, high, nodes, dtype=DTYPE)
    h = (high - low) / (nodes - 1)
    vals = integrand(grid)
    trap = h * (vals.sum(-1) - 0.5 * (vals[:, 0] + vals[:, -1]))
    est = None
    while nodes < max_nodes:
        mids = grid[:-1] + 0.5 * h
        finer = 0.5 * trap + 0.5 * h * integrand(mids).sum(-1)
        simpson = (4.0 * finer - trap) / 3.0
        grid = torch.sort(torch.cat([grid, mids])).values
        nodes, h, trap = grid.numel(), 0.5 * h, finer
        converged = est is not None and bool(((simpson - est).abs() <= rtol * simpson.abs()).all())
        est = simpson
        if converged:
            break
    return est, nodes


@torch.no_grad()
def density_check(model: JointModel, instance: ImtsInstance, probes: int = 100, nodes: int = 257,
                  seed: int = 0, probe_chunk: int = 25, rtol: float = 1e-5,
                  max_nodes: int = 16385) -> DensityReport:
    """Max relative error between the quadrature marginal over the last query and the direct density.

    Probe points for the remaining coordinates are drawn from the direct model. The
    dropped coordinate is integrated in logit-probability space ``s``, with
    ``y = F^{-1}(sigmoid(s))`` from its own flow and Jacobian ``sigmoid'(s) / f(y)``,
    over the quantile range ``[1e-10, 1 - 1e-10]``. The grid is refined until Simpson
    estimates on successive grids agree to ``rtol``; ``nodes`` reports the largest grid.
    """
    n = len(instance.queries)
    _require(instance, 2)
    keep = list(range(n - 1))
    full_b = collate([ImtsInstance(instance.history, instance.queries)])
    direct_b = collate([ImtsInstance(instance.history, [instance.queries[i] for i in keep])])
    gen = torch.Generator().manual_seed(seed)
    y_probe = model.sample(direct_b, probes, gen)[:, 0, :]                        # (P, N-1)
    last = model.marginal.dsf_params(full_b).index((0, n - 1))
    direct_dens = torch.exp(model.log_prob_values(direct_b, y_probe))
    edge = math.log(QUANTILE_EDGE / (1.0 - QUANTILE_EDGE))
    marginal, used = [], 0
    for lo in range(0, probes, probe_chunk):
        yp = y_probe[lo:lo + probe_chunk]
        p = yp.shape[0]

        def integrand(s):
            g = s.numel()
            u = torch.sigmoid(s)
            y_last = dsf_inverse(last, u)
            log_jac = F.logsigmoid(s) + F.logsigmoid(-s) - dsf_forward(last, y_last)[1]
            y = torch.cat([yp.unsqueeze(1).expand(p, g, n - 1), y_last.view(1, g, 1).expand(p, g, 1)], -1)
            return torch.exp(model.log_prob_values(full_b, y.reshape(p * g, n)).reshape(p, g) + log_jac)

        est, count = _refined_quadrature(integrand, edge, -edge, nodes, rtol, max_nodes)
        marginal.append(est)
        used = max(used, count)
    marginal = torch.cat(marginal)
    rel = ((marginal - direct_dens).abs() / direct_dens).max()
    return DensityReport(float(rel), probes, used)


@torch.no_grad()
def sampling_check(model: JointModel, instance: ImtsInstance, samples: int = 10000, seed: int = 0,
                   drop: int = 1) -> SamplingReport:
    """W1 between direct and marginalized samples of the first ``N - drop`` queries.

    The control is the W1 between two independently seeded draws of the marginal
    flow alone at the same queries.
    """
    n = len(instance.queries)
    _require(instance, drop + 1)
    keep = list(range(n - drop))
    direct_b = collate([ImtsInstance(instance.history, [instance.queries[i] for i in keep])])
    full_b = collate([ImtsInstance(instance.history, instance.queries)])
    gen = torch.Generator().manual_seed(seed)
    direct = model.sample(direct_b, samples, gen)[:, 0, :].numpy()
    marginalized = model.sample(full_b, samples, gen)[:, 0, keep].numpy()
    independent = JointModel(model.marginal, None)
    ctrl_a = independent.sample(direct_b, samples, gen)[:, 0, :].numpy()
    ctrl_b = independent.sample(direct_b, samples, gen)[:, 0, :].numpy()
    return SamplingReport(coordinate_w1(direct, marginalized), coordinate_w1(ctrl_a, ctrl_b), samples)


def within_control(direct_vs_marg, control, k: float = 2.0):
    """Whether mean direct-vs-marginalized W1 lies within ``k`` standard errors of the control mean.

    The standard error is that of the difference of the two means across repeats.
    """
    a = np.asarray(direct_vs_marg, dtype=np.float64)
    b = np.asarray(control, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two repeats")
    se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    gap = abs(a.mean() - b.mean())
    return bool(gap <= k * se), float(gap), float(se)
