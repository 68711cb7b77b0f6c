"""Likelihood and sample-based forecast metrics.

Sample metrics take ``samples`` of shape ``(S, N)`` and a ``target`` of shape ``(N,)``
as numpy arrays. ``evaluate`` runs a model over a dataset and collects per-instance
values into a ``MetricReport``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .copula import JointModel
from .data import Dataset, ImtsInstance, collate

METRICS = ("njnll", "mnll", "w1", "w1_control", "es", "crps", "mse")
SAMPLE_METRICS = ("w1", "w1_control", "es", "crps", "mse")
DEFAULT_SAMPLES = 1000


# --- likelihood metrics --------------------------------------------------------------

@torch.no_grad()
def njnll(model: JointModel, instance: ImtsInstance) -> float:
    if not instance.queries or len(instance.targets) != len(instance.queries):
        raise ValueError("every query needs a target")
    return -float(model.log_prob(collate([instance]))[0]) / len(instance.queries)


@torch.no_grad()
def mnll(model: JointModel, instance: ImtsInstance) -> float:
    """Mean NLL of each coordinate, each evaluated as its own single-query instance."""
    n = len(instance.queries)
    if n == 0 or len(instance.targets) != n:
        raise ValueError("every query needs a target")
    singles = collate([instance.subset([i]) for i in range(n)])
    return -float(model.log_prob(singles).sum()) / n


# --- sample metrics -------------------------------------------------------------------

def _check(samples, target, min_samples):
    samples = np.asarray(samples, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    target = np.atleast_1d(target)
    if samples.shape[1] != target.shape[0]:
        raise ValueError(f"samples have {samples.shape[1]} coordinates, target has {target.shape[0]}")
    if samples.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {samples.shape[0]}")
    return samples, target


def _pairwise_abs_sum(x):
    """``sum_{s != s'} |x_s - x_s'|`` along axis 0 via order statistics."""
    s = x.shape[0]
    coef = 2.0 * np.arange(1, s + 1) - s - 1
    return 2.0 * (coef[:, None] * np.sort(x, axis=0)).sum(0)


def empirical_w1(a, b) -> float:
    """Mean absolute gap between order statistics of two equal-size samples."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty samples")
    return float(np.abs(np.sort(a) - np.sort(b)).mean())


def energy_score(samples, target, chunk: int = 2048) -> float:
    samples, target = _check(samples, target, 2)
    s = samples.shape[0]
    first = np.linalg.norm(samples - target, axis=1).mean()
    if samples.shape[1] == 1:
        pair = float(_pairwise_abs_sum(samples)[0])
    else:
        pair = 0.0
        for lo in range(0, s, chunk):
            pair += float(cdist(samples[lo:lo + chunk], samples).sum())
    return float(first - pair / (2.0 * s * (s - 1)))


def crps(samples, target) -> float:
    samples, target = _check(samples, target, 2)
    s = samples.shape[0]
    first = np.abs(samples - target).mean(0)
    second = _pairwise_abs_sum(samples) / (2.0 * s * (s - 1))
    return float((first - second).mean())


def mse(samples, target) -> float:
    samples, target = _check(samples, target, 1)
    return float(((samples.mean(0) - target) ** 2).mean())


def coordinate_w1(a, b) -> float:
    """Per-coordinate W1 of two ``(S, N)`` sample sets, averaged over coordinates."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"sample shapes differ: {a.shape} vs {b.shape}")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    return float(np.mean([empirical_w1(a[:, n], b[:, n]) for n in range(a.shape[1])]))


# --- reports --------------------------------------------------------------------------

@dataclass
class MetricReport:
    values: dict                      # metric -> per-instance numpy array
    samples: int = 0
    meta: dict = field(default_factory=dict)

    def mean(self, name) -> float:
        return float(np.mean(self.values[name]))

    def std(self, name) -> float:
        return float(np.std(self.values[name]))

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k)) for k in self.values}

    def write_csv(self, path):
        """One row per instance plus ``mean`` and ``std`` rows."""
        names = list(self.values)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance"] + names)
            count = len(next(iter(self.values.values()))) if names else 0
            for i in range(count):
                w.writerow([i] + [repr(float(self.values[k][i])) for k in names])
            w.writerow(["mean"] + [repr(self.mean(k)) for k in names])
            w.writerow(["std"] + [repr(self.std(k)) for k in names])

    def table(self) -> str:
        rows = [f"{'metric':12s} {'mean':>12s} {'std':>12s}"]
        for k, (m, s) in self.summary().items():
            rows.append(f"{k:12s} {m:12.5f} {s:12.5f}")
        rows.append(f"instances {len(next(iter(self.values.values()))) if self.values else 0}, samples {self.samples}")
        return "\n".join(rows)


def check_metric_names(names):
    bad = [m for m in names if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metric(s) {bad}; valid names: {', '.join(METRICS)}")
    return list(names)


@torch.no_grad()
def evaluate(model: JointModel, dataset: Dataset, metrics=METRICS, samples: int = DEFAULT_SAMPLES,
             seed: int = 0, chunk: int = 16) -> MetricReport:
    """Per-instance metrics over ``dataset``.

    ``w1`` is the coordinate-averaged W1 between joint samples and samples of the
    marginal flow alone at the same queries; ``w1_control`` is the W1 between two
    independently seeded marginal-only sample sets. Their closeness checks that the
    copula leaves the marginals intact. Sample metrics use ``samples`` draws.
    """
    metrics = check_metric_names(metrics)
    insts = [i for i in dataset.instances if i.queries]
    if not insts:
        raise ValueError("dataset has no instances with queries")
    out = {m: [] for m in metrics}
    for lo in range(0, len(insts), 256):
        part = insts[lo:lo + 256]
        counts = np.array([len(i.queries) for i in part], dtype=np.float64)
        if "njnll" in out:
            out["njnll"].extend(-model.log_prob(collate(part)).numpy() / counts)
        if "mnll" in out:
            singles = collate([i.subset([n]) for i in part for n in range(len(i.queries))])
            per_query = -model.log_prob(singles).numpy()
            bounds = np.concatenate([[0], np.cumsum(counts).astype(int)])
            out["mnll"].extend(per_query[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:]))
    sample_metrics = [m for m in metrics if m in SAMPLE_METRICS]
    if sample_metrics:
        independent = JointModel(model.marginal, None)
        gen = torch.Generator().manual_seed(seed)
        for lo in range(0, len(insts), chunk):
            part = insts[lo:lo + chunk]
            batch = collate(part)
            joint = model.sample(batch, samples, gen).numpy()
            need_marg = "w1" in out or "w1_control" in out
            marg = independent.sample(batch, samples, gen).numpy() if need_marg else None
            ctrl = independent.sample(batch, samples, gen).numpy() if "w1_control" in out else None
            for b, inst in enumerate(part):
                n = len(inst.queries)
                ys = joint[:, b, :n]
                y = np.asarray(inst.targets)
                if "w1" in out:
                    out["w1"].append(coordinate_w1(ys, marg[:, b, :n]))
                if "w1_control" in out:
                    out["w1_control"].append(coordinate_w1(marg[:, b, :n], ctrl[:, b, :n]))
                if "es" in out:
                    out["es"].append(energy_score(ys, y))
                if "crps" in out:
                    out["crps"].append(crps(ys, y))
                if "mse" in out:
                    out["mse"].append(mse(ys, y))
    values = {m: np.asarray(v, dtype=np.float64) for m, v in out.items()}
    return MetricReport(values, samples if sample_metrics else 0)

