"""IMTS instances, padded batches, toy generators and the line-delimited file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
TOY_KINDS = ("x_shape", "ring", "cluster3d")


class DataFormatError(ValueError):
    pass


@dataclass
class ImtsInstance:
    history: list = field(default_factory=list)   # [(t, c, y), ...]
    queries: list = field(default_factory=list)   # [(t, c), ...]
    targets: list = field(default_factory=list)   # [y, ...]

    def __post_init__(self):
        self.history = [(float(t), int(c), float(y)) for t, c, y in self.history]
        self.queries = [(float(t), int(c)) for t, c in self.queries]
        self.targets = [float(y) for y in self.targets]
        if self.targets and len(self.targets) != len(self.queries):
            raise ValueError("targets must align with queries")

    def subset(self, keep) -> "ImtsInstance":
        """Same history, queries (and targets) restricted to ``keep`` in the given order."""
        keep = list(keep)
        targets = [self.targets[i] for i in keep] if self.targets else []
        return ImtsInstance(self.history, [self.queries[i] for i in keep], targets)

    def max_channel(self) -> int:
        chans = [c for _, c, _ in self.history] + [c for _, c in self.queries]
        return max(chans) if chans else -1


@dataclass
class ImtsBatch:
    hist_t: torch.Tensor
    hist_c: torch.Tensor
    hist_y: torch.Tensor
    hist_mask: torch.Tensor
    q_t: torch.Tensor
    q_c: torch.Tensor
    q_mask: torch.Tensor
    y: torch.Tensor

    def __len__(self):
        return self.q_t.shape[0]

    def index(self, idx) -> "ImtsBatch":
        return ImtsBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def repeat(self, count: int) -> "ImtsBatch":
        return ImtsBatch(*(getattr(self, f).repeat_interleave(count, 0) for f in self.__dataclass_fields__))

    @property
    def n_queries(self) -> torch.Tensor:
        return self.q_mask.sum(-1)


def collate(instances, dtype=torch.float64) -> ImtsBatch:
    """Pad a list of instances. History triplets are sorted canonically so pooling is order-free."""
    b = len(instances)
    m = max((len(i.history) for i in instances), default=0)
    n = max((len(i.queries) for i in instances), default=0)
    hist = np.zeros((b, m, 3))
    hmask = np.zeros((b, m), dtype=bool)
    qry = np.zeros((b, n, 2))
    qmask = np.zeros((b, n), dtype=bool)
    ys = np.zeros((b, n))
    for k, inst in enumerate(instances):
        if inst.history:
            h = sorted(inst.history, key=lambda r: (r[1], r[0], r[2]))
            hist[k, :len(h)] = h
            hmask[k, :len(h)] = True
        if inst.queries:
            qry[k, :len(inst.queries)] = inst.queries
            qmask[k, :len(inst.queries)] = True
        if inst.targets:
            ys[k, :len(inst.targets)] = inst.targets
    return ImtsBatch(
        torch.as_tensor(hist[..., 0], dtype=dtype), torch.as_tensor(hist[..., 1], dtype=torch.long),
        torch.as_tensor(hist[..., 2], dtype=dtype), torch.as_tensor(hmask),
        torch.as_tensor(qry[..., 0], dtype=dtype), torch.as_tensor(qry[..., 1], dtype=torch.long),
        torch.as_tensor(qmask), torch.as_tensor(ys, dtype=dtype))


@dataclass
class Dataset:
    instances: list
    channels: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def split(self, fractions=(0.8, 0.1, 0.1), seed: int = 0):
        """Seeded disjoint, exhaustive partition into len(fractions) parts."""
        perm = np.random.default_rng(seed).permutation(len(self.instances))
        bounds = np.round(np.cumsum((0.0,) + tuple(fractions)) / sum(fractions) * len(perm)).astype(int)
        return [Dataset([self.instances[i] for i in perm[lo:hi]], self.channels, dict(self.meta))
                for lo, hi in zip(bounds[:-1], bounds[1:])]

    def batch(self) -> ImtsBatch:
        return collate(self.instances)


# --- toy densities --------------------------------------------------------------

@dataclass
class ToySpec:
    kind: str
    n: int = 10000
    noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ValueError(f"unknown toy kind {self.kind!r}; expected one of {TOY_KINDS}")
        if self.n <= 0:
            raise ValueError("sample count must be positive")
        if self.noise is not None and self.noise <= 0:
            raise ValueError("noise must be positive")


X_RIDGE_CORRELATION = 0.95
X_RIDGE_SCALE = 1.5
RING_RADIUS = 2.0
RING_NOISE = 0.15
CLUSTER_CENTER = np.array([-2.5, -2.0, 2.5])
CLUSTER_STD = np.array([0.3, 0.1, 0.3])


def gen_x_shape(spec: ToySpec, return_labels: bool = False):
    rng = np.random.default_rng(spec.seed)
    rho = X_RIDGE_CORRELATION
    scale = spec.noise or X_RIDGE_SCALE
    labels = rng.integers(0, 2, spec.n)
    sign = np.where(labels == 0, 1.0, -1.0)
    e = rng.standard_normal((spec.n, 2))
    y1 = e[:, 0]
    y2 = sign * (rho * e[:, 0] + math.sqrt(1.0 - rho * rho) * e[:, 1])
    out = scale * np.stack([y1, y2], axis=1)
    return (out, labels) if return_labels else out


def gen_ring(spec: ToySpec):
    rng = np.random.default_rng(spec.seed)
    eps = spec.noise or RING_NOISE
    radius = rng.normal(RING_RADIUS, eps, spec.n)
    angle = rng.uniform(0.0, 2.0 * math.pi, spec.n)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def gen_cluster3d(spec: ToySpec, return_labels: bool = False):
    rng = np.random.default_rng(spec.seed)
    std = CLUSTER_STD if spec.noise is None else CLUSTER_STD * (spec.noise / CLUSTER_STD[0])
    labels = rng.integers(0, 2, spec.n)
    centers = np.where(labels[:, None] == 0, CLUSTER_CENTER, -CLUSTER_CENTER)
    out = centers + std * rng.standard_normal((spec.n, 3))
    return (out, labels) if return_labels else out


def gen_toy(spec: ToySpec) -> np.ndarray:
    return {"x_shape": gen_x_shape, "ring": gen_ring, "cluster3d": gen_cluster3d}[spec.kind](spec)


def toy_dataset(samples: np.ndarray, meta: dict | None = None) -> Dataset:
    """Static joint-density targets: coordinate d becomes a query on channel d at time 0."""
    dim = samples.shape[1]
    queries = [(0.0, d) for d in range(dim)]
    instances = [ImtsInstance([], queries, row.tolist()) for row in samples]
    return Dataset(instances, dim, dict(meta or {}))


# --- synthetic irregular series ---------------------------------------------------

def gen_imts(channels: int, horizon: float = 10.0, sparsity: float = 0.5, dependence: float = 0.5,
             seed: int = 0, n_instances: int = 200, grid: int = 50, noise: float = 0.1,
             history_fraction: float = 0.75, n_sinusoids: int = 3, return_latent: bool = False):
    """Sum-of-sinusoid latent channels mixed with a shared signal, observed on a thinned grid.

    Grid points are kept independently with probability ``sparsity``; points in the
    first ``history_fraction`` of the horizon form the history, the rest the queries.
    """
    if horizon <= 0 or grid < 2:
        raise ValueError("degenerate horizon")
    if not 0.0 < sparsity <= 1.0:
        raise ValueError("sparsity must lie in (0, 1]")
    if not 0.0 <= dependence <= 1.0:
        raise ValueError("dependence must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, horizon, grid)
    cut = history_fraction * horizon
    instances, latents = [], []
    for _ in range(n_instances):
        freq = rng.uniform(0.2, 1.5, (channels + 1, n_sinusoids)) * 2.0 * math.pi / horizon
        phase = rng.uniform(0.0, 2.0 * math.pi, (channels + 1, n_sinusoids))
        amp = rng.normal(0.0, 1.0, (channels + 1, n_sinusoids)) / math.sqrt(n_sinusoids)
        base = (amp[:, :, None] * np.sin(freq[:, :, None] * times + phase[:, :, None])).sum(1)
        latent = math.sqrt(1.0 - dependence) * base[:channels] + math.sqrt(dependence) * base[channels]
        keep = rng.random((channels, grid)) < sparsity
        obs = latent + noise * rng.standard_normal(latent.shape)
        history, queries, targets = [], [], []
        for c in range(channels):
            for g in np.flatnonzero(keep[c]):
                t = float(times[g])
                if t < cut:
                    history.append((t, c, float(obs[c, g])))
                else:
                    queries.append((t, c))
                    targets.append(float(obs[c, g]))
        instances.append(ImtsInstance(history, queries, targets))
        latents.append(latent)
    meta = {"kind": "imts", "horizon": horizon, "sparsity": sparsity, "dependence": dependence,
            "seed": seed, "grid": grid, "noise": noise}
    ds = Dataset(instances, channels, meta)
    return (ds, times, latents) if return_latent else ds


# --- file format ------------------------------------------------------------------

def save_imts(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        header = {"channels": dataset.channels, "version": FORMAT_VERSION}
        if dataset.meta:
            header["meta"] = dataset.meta
        fh.write(json.dumps(header) + "\n")
        for inst in dataset.instances:
            rec = {"history": [list(h) for h in inst.history],
                   "queries": [list(q) for q in inst.queries],
                   "targets": inst.targets}
            fh.write(json.dumps(rec) + "\n")
    tmp.replace(path)


def load_imts(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        channels = int(header["channels"])
        version = int(header["version"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}:1: malformed header ({exc})") from None
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}:1: unsupported version {version}")
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            history = [(float(t), int(c), float(y)) for t, c, y in rec["history"]]
            queries = [(float(t), int(c)) for t, c in rec["queries"]]
            targets = [float(y) for y in rec.get("targets", [])]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
        for c in [c for _, c, _ in history] + [c for _, c in queries]:
            if not 0 <= c < channels:
                raise DataFormatError(f"{path}:{lineno}: channel {c} outside [0, {channels})")
        if targets and len(targets) != len(queries):
            raise DataFormatError(f"{path}:{lineno}: {len(targets)} targets for {len(queries)} queries")
        instances.append(ImtsInstance(history, queries, targets))
    return Dataset(instances, channels, header.get("meta", {}))
