"""Two-stage likelihood training (marginal flow, then copula) and gradient verification."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import univariate as uni
from .copula import JointModel
from .data import Dataset, ImtsBatch, collate
from .univariate import DTYPE

log = logging.getLogger(__name__)

STAGES = ("marginal", "copula", "joint-ablation")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 64
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 30
    max_epochs: int = 2000
    stage: str = "marginal"
    seed: int = 0
    eval_chunk: int = 4096

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if min(self.batch_size, self.plateau_patience, self.early_stop_patience, self.max_epochs) < 1:
            raise ValueError("batch_size, patience values and max_epochs must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False

    @property
    def val_losses(self):
        return [r["val_loss"] for r in self.rows]

    def write_csv(self, path):
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)


def _as_batch(data) -> ImtsBatch:
    if isinstance(data, ImtsBatch):
        return data
    if isinstance(data, Dataset):
        return data.batch()
    return collate(list(data))


def per_instance_nll(model: JointModel, batch: ImtsBatch, u=None, marg=None, independent=False):
    """``-(1/N_i) log p(y_i)`` per instance. Cached ``u``/``marg`` skip the marginal forward."""
    if u is None:
        u, marg = model.pseudo_observations(batch)
    cop = torch.zeros_like(marg) if independent else model.copula_term(batch, u)
    return -(cop + marg) / batch.n_queries.to(DTYPE)


def njnll_loss(model: JointModel, data, independent: bool = False) -> torch.Tensor:
    batch = _as_batch(data)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if bool((batch.n_queries < 1).any()):
        raise ValueError("every instance needs at least one query")
    return per_instance_nll(model, batch, independent=independent).mean()


@torch.no_grad()
def evaluate_nll(model: JointModel, batch: ImtsBatch, independent=False, chunk=4096, u=None, marg=None):
    """Mean njNLL over a batch, evaluated in chunks."""
    total = 0.0
    for lo in range(0, len(batch), chunk):
        sl = slice(lo, lo + chunk)
        part = batch.index(sl)
        uu = None if u is None else u[sl]
        mm = None if marg is None else marg[sl]
        total += float(per_instance_nll(model, part, uu, mm, independent).sum())
    return total / len(batch)


@torch.no_grad()
def marginal_nll(model: JointModel, batch: ImtsBatch, chunk=4096) -> float:
    return evaluate_nll(model, batch, independent=True, chunk=chunk)


def _trainable(model: JointModel, stage: str):
    if stage == "marginal":
        return model.marginal
    if stage == "copula":
        if model.copula is None:
            raise ValueError("copula stage needs a copula")
        return model.copula
    return model


@torch.no_grad()
def _cache_marginals(model: JointModel, batch: ImtsBatch, chunk: int):
    us, ms = [], []
    for lo in range(0, len(batch), chunk):
        u, m = model.pseudo_observations(batch.index(slice(lo, lo + chunk)))
        us.append(u)
        ms.append(m)
    return torch.cat(us), torch.cat(ms)


def train(model: JointModel, train_data, val_data, cfg: TrainConfig, csv_path=None) -> TrainHistory:
    """Optimize the parts of ``model`` selected by ``cfg.stage``; restores the best-validation state.

    ``marginal`` trains the flow under independence, ``copula`` freezes the flow and
    trains the copula on cached pseudo-observations, ``joint-ablation`` trains every
    weight under the full njNLL.
    """
    train_b, val_b = _as_batch(train_data), _as_batch(val_data)
    stage = cfg.stage
    module = _trainable(model, stage)
    independent = stage == "marginal"
    if stage == "copula":
        model.marginal.requires_grad_(False)
        train_cache = _cache_marginals(model, train_b, cfg.eval_chunk)
        val_cache = _cache_marginals(model, val_b, cfg.eval_chunk)
    else:
        model.requires_grad_(True)
        train_cache = val_cache = (None, None)
    params = [p for p in module.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(0.9, 0.999), eps=1e-8)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=cfg.plateau_factor,
                                                       patience=cfg.plateau_patience)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory()
    best_state = copy.deepcopy(module.state_dict())
    since_best = 0
    n = len(train_b)
    csv_file = open(csv_path, "w", newline="") if csv_path else None
    writer = None
    try:
        for epoch in range(cfg.max_epochs):
            perm = torch.randperm(n, generator=gen)
            total = 0.0
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                part = train_b.index(idx)
                u = None if train_cache[0] is None else train_cache[0][idx]
                m = None if train_cache[1] is None else train_cache[1][idx]
                try:
                    loss = per_instance_nll(model, part, u, m, independent).mean()
                except uni.IcdfSolverError as err:
                    module.load_state_dict(best_state)
                    raise TrainingDiverged(f"epoch {epoch}: {err}", history) from err
                if not torch.isfinite(loss):
                    module.load_state_dict(best_state)
                    raise TrainingDiverged(f"epoch {epoch}: non-finite training loss", history)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            val = evaluate_nll(model, val_b, independent, cfg.eval_chunk, *val_cache)
            row = {"epoch": epoch, "train_loss": total / n, "val_loss": val, "lr": opt.param_groups[0]["lr"]}
            if stage == "joint-ablation":
                row["val_marginal_nll"] = marginal_nll(model, val_b, cfg.eval_chunk)
            history.rows.append(row)
            if csv_file is not None:
                if writer is None:
                    writer = csv.DictWriter(csv_file, fieldnames=list(row))
                    writer.writeheader()
                writer.writerow(row)
                csv_file.flush()
            if not math.isfinite(val):
                module.load_state_dict(best_state)
                raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", history)
            if val < history.best_val:
                history.best_val, history.best_epoch = val, epoch
                best_state = copy.deepcopy(module.state_dict())
                since_best = 0
            else:
                since_best += 1
            sched.step(val)
            log.debug("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val)
            if since_best >= cfg.early_stop_patience:
                history.stopped_early = True
                break
    finally:
        if csv_file is not None:
            csv_file.close()
    module.load_state_dict(best_state)
    return history


def train_marginal(model: JointModel, train_data, val_data, cfg: TrainConfig, csv_path=None):
    if cfg.stage != "marginal":
        raise ValueError("train_marginal needs stage='marginal'")
    return train(model, train_data, val_data, cfg, csv_path)


def train_copula(model: JointModel, train_data, val_data, cfg: TrainConfig, csv_path=None):
    if cfg.stage not in ("copula", "joint-ablation"):
        raise ValueError("train_copula needs stage='copula' or 'joint-ablation'")
    return train(model, train_data, val_data, cfg, csv_path)


# --- gradient verification -------------------------------------------------------------

@dataclass
class GradCheckReport:
    groups: dict            # group -> max relative error over its tensors
    worst_tensor: dict      # group -> name of the tensor attaining it
    frozen_zero: dict       # group -> True when every gradient entry is exactly zero
    tol: float

    @property
    def worst_group(self):
        return max(self.groups, key=self.groups.get)

    @property
    def max_error(self):
        return max(self.groups.values())

    @property
    def passed(self):
        return self.max_error <= self.tol

    def lines(self):
        out = []
        for g, err in self.groups.items():
            status = "ok" if err <= self.tol else "FAIL"
            out.append(f"{g:10s} max rel err {err:.3e} ({self.worst_tensor[g]}) {status}")
        out.append(f"worst group: {self.worst_group}")
        return out


def grad_check(model: JointModel, data, eps: float = 1e-5, tol: float = 1e-3, stage: str = "joint-ablation",
               samples_per_tensor: int = 6, seed: int = 0, icdf_tol: float = 1e-12) -> GradCheckReport:
    """Central finite differences of njNLL against autograd, per parameter group.

    The relative error of one tensor is ``max|fd - ad| / max|ad|`` over a random
    subset of its entries; a group reports its worst tensor. Parameters outside
    the trainable part of ``stage`` are frozen and must receive zero gradient.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    batch = _as_batch(data)
    independent = model.copula is None or stage == "marginal"
    saved_tol = model.icdf_tol
    model.icdf_tol = icdf_tol
    groups = {"marginal": model.marginal}
    if model.copula is not None:
        groups["copula"] = model.copula
    trainable = {"marginal": stage in ("marginal", "joint-ablation"),
                 "copula": stage in ("copula", "joint-ablation")}
    for name, mod in groups.items():
        mod.requires_grad_(trainable[name])
    rng = np.random.default_rng(seed)
    try:
        model.zero_grad(set_to_none=True)
        njnll_loss(model, batch, independent).backward()
        errors, worst, zero = {}, {}, {}
        for gname, mod in groups.items():
            errors[gname], worst[gname], zero[gname] = 0.0, "-", True
            for pname, p in mod.named_parameters():
                ad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
                if bool((ad != 0).any()):
                    zero[gname] = False
                if not trainable[gname]:
                    continue
                flat = p.data.view(-1)
                picks = rng.choice(flat.numel(), size=min(samples_per_tensor, flat.numel()), replace=False)
                diffs, scale = [], float(ad.abs().max())
                for i in picks:
                    orig = float(flat[i])
                    with torch.no_grad():
                        flat[i] = orig + eps
                        up = float(njnll_loss(model, batch, independent))
                        flat[i] = orig - eps
                        down = float(njnll_loss(model, batch, independent))
                        flat[i] = orig
                    diffs.append(abs((up - down) / (2 * eps) - float(ad.view(-1)[i])))
                err = max(diffs) / max(scale, 1e-12) if scale > 0 else max(diffs)
                if err >= errors[gname]:
                    errors[gname], worst[gname] = err, pname
            if not trainable[gname]:
                errors[gname] = 0.0
    finally:
        model.icdf_tol = saved_tol
        model.requires_grad_(True)
    return GradCheckReport(errors, worst, zero, tol)

