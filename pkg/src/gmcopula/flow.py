"""Deep Sigmoidal Flow marginals conditioned on a query-separable history encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .data import ImtsBatch
from .univariate import DTYPE, PDF_FLOOR, broadcast_shape

MAX_DOUBLINGS = 60


class FlowInversionError(RuntimeError):
    pass


@dataclass
class DsfParams:
    """Block parameters with shape ``(..., L, M)``: slopes > 0, offsets, simplex mix."""
    slopes: torch.Tensor
    offsets: torch.Tensor
    mix: torch.Tensor

    def index(self, idx) -> "DsfParams":
        return DsfParams(self.slopes[idx], self.offsets[idx], self.mix[idx])

    @property
    def n_blocks(self) -> int:
        return self.slopes.shape[-2]


def _blocks(p: DsfParams, y):
    """Push ``y`` through all blocks; returns the pre-squash output and its log-derivative."""
    x = y
    log_deriv = torch.zeros_like(y)
    log_w = torch.log(p.mix)
    log_a = torch.log(p.slopes)
    for layer in range(p.n_blocks):
        h = p.slopes[..., layer, :] * x.unsqueeze(-1) + p.offsets[..., layer, :]
        lw = log_w[..., layer, :]
        log_in = torch.logsumexp(lw + F.logsigmoid(h), -1)
        log_out = torch.logsumexp(lw + F.logsigmoid(-h), -1)
        log_num = torch.logsumexp(lw + log_a[..., layer, :] + F.logsigmoid(h) + F.logsigmoid(-h), -1)
        log_deriv = log_deriv + log_num - log_in - log_out
        x = log_in - log_out
    return x, log_deriv


def dsf_forward(p: DsfParams, y):
    """``(u, log_jac)`` with ``u = T(y)`` and ``log_jac = log dT/dy``."""
    if not bool(torch.isfinite(y).all()):
        raise ValueError("y must be finite")
    x, log_deriv = _blocks(p, y)
    log_jac = log_deriv + F.logsigmoid(x) + F.logsigmoid(-x)
    return torch.sigmoid(x), log_jac


def dsf_logit(p: DsfParams, y):
    """Pre-squash output ``logit(T(y))``, which stays resolvable where ``u`` rounds to 1."""
    return _blocks(p, y)[0]


def marginal_loglik(p: DsfParams, y):
    return dsf_forward(p, y)[1]


@torch.no_grad()
def dsf_inverse(p: DsfParams, u, tol: float = 1e-10, budget: int = 100):
    """Solve ``T(y) = u`` elementwise by safeguarded Newton-bisection in logit space.

    The bracket starts at [-1, 1] and doubles outward until it contains the root.
    Convergence is declared on a logit residual below ``tol``, which bounds the
    probability residual by ``tol / 4``.
    """
    u = torch.as_tensor(u, dtype=p.slopes.dtype)
    if bool(((u <= 0) | (u >= 1)).any()):
        raise ValueError("u must lie strictly inside (0, 1)")
    target = torch.logit(u)
    shape = broadcast_shape(target.shape, p.slopes.shape[:-2])
    target = target.expand(shape)
    low = torch.full(shape, -1.0, dtype=target.dtype)
    high = torch.full(shape, 1.0, dtype=target.dtype)
    for _ in range(MAX_DOUBLINGS + 1):
        bad_low = dsf_logit(p, low) > target
        bad_high = dsf_logit(p, high) < target
        if not bool((bad_low | bad_high).any()):
            break
        low = torch.where(bad_low, 2.0 * low, low)
        high = torch.where(bad_high, 2.0 * high, high)
    else:
        raise FlowInversionError(f"bracket expansion exceeded {MAX_DOUBLINGS} doublings")
    x = 0.5 * (low + high)
    step_prev = step_prev2 = high - low
    for _ in range(budget):
        val, log_deriv = _blocks(p, x)
        gap = val - target
        # a collapsed bracket means the root is pinned to float resolution
        pinned = high - low <= 4 * torch.finfo(x.dtype).eps * x.abs().clamp_min(1.0)
        active = (gap.abs() > tol) & ~pinned
        if not bool(active.any()):
            break
        below = gap < 0
        low = torch.where(active & below, x, low)
        high = torch.where(active & ~below, x, high)
        delta = gap / torch.exp(log_deriv).clamp_min(PDF_FLOOR)
        newton = x - delta
        accept = (newton >= low) & (newton <= high) & (2.0 * delta.abs() <= step_prev2)
        step = torch.where(accept, newton, 0.5 * (low + high))
        step_prev2 = torch.where(active, step_prev, step_prev2)
        step_prev = torch.where(active, (step - x).abs(), step_prev)
        x = torch.where(active, step, x)
    return x


# --- networks ---------------------------------------------------------------------

ROW_BLOCK = 8


class RowLinear(nn.Linear):
    """Linear layer whose output rows are bitwise independent of the other rows.

    BLAS picks kernels by matrix shape, so a row's result can change in the last
    bit when rows are added or removed. Padding the row count to a multiple of
    ``ROW_BLOCK`` (and at least ``ROW_BLOCK``) keeps every row on the same kernel,
    which makes per-query parameters identical however queries are batched.
    """

    def forward(self, x):
        lead = x.shape[:-1]
        rows = x.reshape(-1, x.shape[-1])
        r = rows.shape[0]
        pad = max(ROW_BLOCK, -(-r // ROW_BLOCK) * ROW_BLOCK) - r
        if pad:
            rows = torch.cat([rows, rows.new_zeros(pad, rows.shape[1])])
        return super().forward(rows)[:r].reshape(lead + (self.out_features,))


def mlp(n_in: int, n_hidden: int, n_out: int, layers: int = 2) -> nn.Sequential:
    mods, width = [], n_in
    for _ in range(layers - 1):
        mods += [RowLinear(width, n_hidden, dtype=DTYPE), nn.GELU()]
        width = n_hidden
    mods.append(RowLinear(width, n_out, dtype=DTYPE))
    return nn.Sequential(*mods)


def time_features(t, horizon: float, n_freq: int = 8):
    """sin/cos at periods ``horizon * 2^-k`` for k = 0..n_freq-1."""
    periods = horizon * torch.pow(2.0, -torch.arange(n_freq, dtype=t.dtype))
    angle = 2.0 * math.pi * t.unsqueeze(-1) / periods
    return torch.cat([torch.sin(angle), torch.cos(angle)], -1)


class HistoryEncoder(nn.Module):
    """Query-separable encoder.

    Each observation ``(t, c, y)`` is embedded by an MLP on ``(y, time features, channel
    embedding)`` and mean-pooled per channel into a summary ``(C, D)``; channels without
    observations use a learned placeholder row. A query ``(t_n, c_n)`` is embedded from
    the flattened summary, its channel embedding and its time features only.
    """

    def __init__(self, channels: int, dim: int = 32, channel_dim: int = 8, n_freq: int = 8,
                 horizon: float = 1.0):
        super().__init__()
        self.channels, self.dim, self.n_freq, self.horizon = channels, dim, n_freq, horizon
        self.channel_embedding = nn.Parameter(0.5 * torch.randn(channels, channel_dim, dtype=DTYPE))
        self.unobserved = nn.Parameter(torch.zeros(channels, dim, dtype=DTYPE))
        n_time = 2 * n_freq
        self.obs_net = mlp(1 + n_time + channel_dim, dim, dim)
        self.query_net = mlp(channels * dim + channel_dim + n_time, dim, dim)

    def summary(self, batch: ImtsBatch) -> torch.Tensor:
        """Per-channel history summary of shape ``(B, C, D)``."""
        b = len(batch)
        if batch.hist_t.shape[1] == 0:
            return self.unobserved.expand(b, -1, -1)
        if bool((batch.hist_c[batch.hist_mask] >= self.channels).any()):
            raise ValueError("history references an unknown channel")
        chan = batch.hist_c.clamp(0, self.channels - 1)
        feats = torch.cat([batch.hist_y.unsqueeze(-1), time_features(batch.hist_t, self.horizon, self.n_freq),
                           self.channel_embedding[chan]], -1)
        h = self.obs_net(feats) * batch.hist_mask.unsqueeze(-1)
        # sequential scatter-add keeps each (instance, channel) sum independent of the batch
        slot = (torch.arange(b).unsqueeze(-1) * self.channels + chan).reshape(-1)
        total = h.new_zeros(b * self.channels, self.dim).index_add(0, slot, h.reshape(-1, self.dim))
        count = h.new_zeros(b * self.channels).index_add(0, slot, batch.hist_mask.reshape(-1).to(h.dtype))
        total = total.reshape(b, self.channels, self.dim)
        count = count.reshape(b, self.channels, 1)
        pooled = total / count.clamp_min(1.0)
        return torch.where(count > 0, pooled, self.unobserved.expand(b, -1, -1))

    def embed_queries(self, summary: torch.Tensor, q_t, q_c) -> torch.Tensor:
        if q_c.numel() and bool(((q_c < 0) | (q_c >= self.channels)).any()):
            raise ValueError("query references an unknown channel")
        b, n = q_t.shape
        flat = summary.reshape(b, 1, -1).expand(b, n, -1)
        feats = torch.cat([flat, self.channel_embedding[q_c], time_features(q_t, self.horizon, self.n_freq)], -1)
        return self.query_net(feats)

    def forward(self, batch: ImtsBatch):
        summary = self.summary(batch)
        return summary, self.embed_queries(summary, batch.q_t, batch.q_c)


class Conditioner(nn.Module):
    """Maps a query embedding to DSF block parameters (softplus slopes, softmax mix)."""

    def __init__(self, dim: int, blocks: int = 2, width: int = 10, hidden: int = 32, layers: int = 2):
        super().__init__()
        self.blocks, self.width = blocks, width
        self.net = mlp(dim, hidden, 3 * blocks * width, layers)

    def forward(self, e) -> DsfParams:
        raw = self.net(e).reshape(e.shape[:-1] + (3, self.blocks, self.width))
        return DsfParams(F.softplus(raw[..., 0, :, :]), raw[..., 1, :, :], torch.softmax(raw[..., 2, :, :], -1))


class MarginalFlow(nn.Module):
    """Per-query DSF marginals: ``F_n(y) = T_{theta_n}(y)`` with ``theta_n`` from ``e_n`` alone."""

    def __init__(self, channels: int, dim: int = 32, blocks: int = 2, width: int = 10,
                 hidden: int = 32, mlp_layers: int = 2, horizon: float = 1.0):
        super().__init__()
        self.encoder = HistoryEncoder(channels, dim, horizon=horizon)
        self.conditioner = Conditioner(dim, blocks, width, hidden, mlp_layers)

    def dsf_params(self, batch: ImtsBatch) -> DsfParams:
        _, e = self.encoder(batch)
        return self.conditioner(e)

    def forward(self, batch: ImtsBatch):
        """``(u, log f)`` per query, shape ``(B, N)``; padded entries are arbitrary."""
        p = self.dsf_params(batch)
        y = torch.where(batch.q_mask, batch.y, torch.zeros_like(batch.y))
        return dsf_forward(p, y)

    def log_prob(self, batch: ImtsBatch):
        """Sum over real queries of ``log f_n(y_n)``, shape ``(B,)``."""
        _, log_f = self(batch)
        return (log_f * batch.q_mask).sum(-1)

    @torch.no_grad()
    def invert(self, batch: ImtsBatch, u, tol: float = 1e-10):
        """Map uniforms of shape ``(S, B, N)`` to targets via ``F_n^{-1}``."""
        p = self.dsf_params(batch)
        return dsf_inverse(p, u, tol=tol)
