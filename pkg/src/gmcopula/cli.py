"""Command-line driver: gen, train, eval, sample, consistency, figure, gradcheck.

Every command writes into an output directory (``--out``, default
``$GMCOPULA_OUT/<command>``, with ``GMCOPULA_OUT`` defaulting to ``runs``) and
finishes by writing ``manifest.json`` there.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical failure, 5 tolerance breach.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, ModelConfig, build_model, dump_config, load_config
from .consistency import density_check, sampling_check, within_control
from .copula import JointModel
from .data import (TOY_KINDS, DataFormatError, Dataset, ImtsInstance, ToySpec, collate, gen_imts, gen_toy,
                   load_imts, save_imts, toy_dataset)
from .flow import FlowInversionError
from .metrics import DEFAULT_SAMPLES, METRICS, check_metric_names, evaluate
from .training import TrainingDiverged, grad_check, train
from .univariate import DTYPE, IcdfSolverError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_TOLERANCE = 0, 2, 3, 4, 5
OUT_ENV = "GMCOPULA_OUT"
SPLITS = ("train", "val", "test", "all")
FIG1_GRID = 200
FIG1_RANGE = 4.0
DENSITY_TOL = 1e-3

log = logging.getLogger("gmcopula")


class ToleranceBreach(RuntimeError):
    pass


# --- helpers ----------------------------------------------------------------------------

def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_json_atomic(path: Path, obj):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(path) -> Dataset:
    if not Path(path).exists():
        raise DataFormatError(f"data file {path} not found")
    return load_imts(path)


def _split(ds: Dataset, which: str, seed: int) -> Dataset:
    if which == "all":
        return ds
    return dict(zip(("train", "val", "test"), ds.split((0.8, 0.1, 0.1), seed)))[which]


def load_model(path) -> tuple[JointModel, dict]:
    tensors, meta = ckpt.load(path)
    if "model" not in meta:
        raise ckpt.CheckpointError(f"{path}: metadata lacks a model config")
    try:
        cfg = ModelConfig(**meta["model"])
    except TypeError as exc:
        raise ckpt.CheckpointError(f"{path}: bad model config ({exc})") from None
    model = build_model(cfg)
    ckpt.load_state(model, tensors, strict=cfg.copula)
    return model, meta


def _check_compatible(model_meta: dict, ds: Dataset):
    channels = model_meta["model"]["channels"]
    if ds.channels != channels:
        raise DataFormatError(f"data has {ds.channels} channels, checkpoint expects {channels}")


def _instance(ds: Dataset, index: int) -> ImtsInstance:
    if not 0 <= index < len(ds):
        raise DataFormatError(f"instance {index} out of range for {len(ds)} instances")
    return ds.instances[index]


# --- commands ---------------------------------------------------------------------------

def cmd_gen(args, out: Path) -> dict:
    if args.kind == "imts":
        ds = gen_imts(args.channels, horizon=args.horizon, sparsity=args.sparsity, dependence=args.dependence,
                      seed=args.seed, n_instances=args.n, noise=args.noise if args.noise is not None else 0.1)
    else:
        spec = ToySpec(args.kind, args.n, args.noise, args.seed) if args.noise is not None \
            else ToySpec(args.kind, args.n, seed=args.seed)
        ds = toy_dataset(gen_toy(spec), {"kind": args.kind, "seed": args.seed, "n": args.n})
    path = Path(args.path) if args.path else out / f"{args.kind}.jsonl"
    save_imts(ds, path)
    n_obs = sum(len(i.history) for i in ds.instances)
    n_q = sum(len(i.queries) for i in ds.instances)
    print(f"wrote {path}: {len(ds)} instances, {ds.channels} channels, {n_obs} observations, {n_q} queries")
    return {"data": str(path)}


def cmd_train(args, out: Path) -> dict:
    ds = _dataset(args.data)
    overrides = list(args.set or []) + [f"stage = {args.stage}", f"seed = {args.seed}"]
    base = ModelConfig(channels=ds.channels, horizon=float(ds.meta.get("horizon", 1.0)))
    mcfg, tcfg = load_config(args.config, overrides, model=base)
    if mcfg.channels != ds.channels:
        raise ConfigError(f"channels = {mcfg.channels} does not match the data ({ds.channels})")
    if args.stage == "marginal":
        mcfg.copula = False
    elif not mcfg.copula:
        raise ConfigError(f"stage {args.stage} needs copula = true")
    torch.manual_seed(args.seed)
    model = build_model(mcfg)
    if args.stage == "copula":
        if not args.marginal:
            raise ConfigError("the copula stage needs --marginal <checkpoint>")
        marg, meta = load_model(args.marginal)
        _check_compatible(meta, ds)
        ckpt.load_state(model, {k: v for k, v in marg.state_dict().items() if k.startswith("marginal.")},
                        strict=False)
    elif args.marginal:
        raise ConfigError("--marginal only applies to the copula stage")
    train_ds, val_ds, _ = ds.split((0.8, 0.1, 0.1), args.split_seed)
    hist = train(model, train_ds, val_ds, tcfg, csv_path=out / "history.csv")
    meta = {"model": asdict(mcfg), "train": asdict(tcfg), "split_seed": args.split_seed,
            "best_epoch": hist.best_epoch, "best_val": hist.best_val}
    ckpt.save_model(out / "model.gmcp", model, meta)
    (out / "config.txt").write_text(dump_config(mcfg, tcfg))
    print(f"stage {args.stage}: best val {hist.best_val:.6f} at epoch {hist.best_epoch} "
          f"({len(hist.rows)} epochs{', early stop' if hist.stopped_early else ''})")
    return {"checkpoint": str(out / "model.gmcp"), "best_val": hist.best_val, "config": args.config}


def cmd_eval(args, out: Path) -> dict:
    names = check_metric_names([m.strip() for m in args.metrics.split(",") if m.strip()]) if args.metrics \
        else list(METRICS)
    model, meta = load_model(args.checkpoint)
    ds = _dataset(args.data)
    _check_compatible(meta, ds)
    part = _split(ds, args.split, meta.get("split_seed", 0))
    report = evaluate(model, part, names, samples=args.samples, seed=args.seed)
    report.write_csv(out / "metrics.csv")
    print(report.table())
    return {"metrics": {k: v[0] for k, v in report.summary().items()}}


def cmd_sample(args, out: Path) -> dict:
    model, meta = load_model(args.checkpoint)
    ds = _dataset(args.data)
    _check_compatible(meta, ds)
    inst = _instance(_split(ds, args.split, meta.get("split_seed", 0)), args.instance)
    gen = torch.Generator().manual_seed(args.seed)
    ys = model.sample(collate([inst]), args.count, gen)[:, 0, :].numpy()
    path = out / "samples.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"y{n + 1}" for n in range(ys.shape[1])])
        w.writerows([[repr(float(v)) for v in row] for row in ys])
    print(f"wrote {args.count} samples of {ys.shape[1]} queries to {path}")
    return {"samples": str(path)}


def cmd_consistency(args, out: Path) -> dict:
    model, meta = load_model(args.checkpoint)
    ds = _dataset(args.data)
    _check_compatible(meta, ds)
    inst = _instance(_split(ds, args.split, meta.get("split_seed", 0)), args.instance)
    if len(inst.queries) < 2:
        raise DataFormatError("consistency needs an instance with at least 2 queries")
    if args.mode == "density":
        rep = density_check(model, inst, probes=args.probes, seed=args.seed)
        result = {"mode": "density", "max_rel_error": rep.max_rel_error, "probes": rep.probes,
                  "nodes": rep.nodes, "tolerance": DENSITY_TOL, "passed": rep.max_rel_error <= DENSITY_TOL}
        print(f"density: max rel error {rep.max_rel_error:.3e} over {rep.probes} probes (tol {DENSITY_TOL:.0e})")
    else:
        reps = [sampling_check(model, inst, samples=args.samples, seed=args.seed + r) for r in range(args.repeats)]
        dm = [r.w1_direct_vs_marginalized for r in reps]
        ctrl = [r.w1_control for r in reps]
        ok, gap, se = within_control(dm, ctrl)
        result = {"mode": "sampling", "w1_direct_vs_marginalized": dm, "w1_control": ctrl,
                  "gap": gap, "stderr": se, "passed": ok}
        print(f"sampling: W1 direct vs marginalized {np.mean(dm):.4f}, control {np.mean(ctrl):.4f}, "
              f"gap {gap:.4f} vs 2 stderr {2 * se:.4f}")
    write_json_atomic(out / f"consistency_{args.mode}.json", result)
    if not result["passed"]:
        raise ToleranceBreach(f"{args.mode} consistency check failed")
    return result


def _fig1(args, out: Path) -> dict:
    if not args.checkpoint:
        raise ConfigError("fig1 needs at least one --checkpoint")
    axis = np.linspace(-FIG1_RANGE, FIG1_RANGE, FIG1_GRID)
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    y = torch.as_tensor(np.stack([g1.ravel(), g2.ravel()], -1), dtype=DTYPE)
    cols = {"y1": g1.ravel(), "y2": g2.ravel()}
    for path in args.checkpoint:
        model, meta = load_model(path)
        batch = collate([ImtsInstance([], [(0.0, 0), (0.0, 1)])])
        if meta["model"]["channels"] < 2:
            raise ConfigError(f"{path}: fig1 needs a two-channel model")
        with torch.no_grad():
            logp = torch.cat([model.log_prob_values(batch, y[lo:lo + 4000]) for lo in range(0, len(y), 4000)])
        cols[f"log_density_{Path(path).parent.name or Path(path).stem}"] = logp.numpy()
    path = out / "fig1_grid.csv"
    _write_columns(path, cols)
    print(f"wrote {FIG1_GRID}x{FIG1_GRID} grid to {path}")
    return {"figure": str(path)}


def _appH(args, out: Path) -> dict:  # noqa: N802
    if not args.gmc or not args.mixgc:
        raise ConfigError("appH needs --gmc and --mixgc checkpoints")
    rows = []
    full = ImtsInstance([], [(0.0, 0), (0.0, 1), (0.0, 2)])
    direct = full.subset([0, 1])
    for name, path in (("gmc", args.gmc), ("mixgc", args.mixgc)):
        model, _ = load_model(path)
        gen = torch.Generator().manual_seed(args.seed)
        d = model.sample(collate([direct]), args.samples, gen)[:, 0, :].numpy()
        m = model.sample(collate([full]), args.samples, gen)[:, 0, :2].numpy()
        rows += [(f"{name}_direct", *r) for r in d] + [(f"{name}_marginalized", *r) for r in m]
    path = out / "appH_samples.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "y1", "y2"])
        w.writerows([(s, repr(float(a)), repr(float(b))) for s, a, b in rows])
    print(f"wrote 4 sample sets of {args.samples} to {path}")
    return {"figure": str(path)}


def _sensitivity(args, out: Path) -> dict:
    if not args.checkpoint or not args.data:
        raise ConfigError("sensitivity needs --data and one --checkpoint per trained model")
    ds = _dataset(args.data)
    by_k = {}
    for path in args.checkpoint:
        model, meta = load_model(path)
        _check_compatible(meta, ds)
        test = _split(ds, args.split, meta.get("split_seed", 0))
        k = meta["model"]["copula_components"] if meta["model"]["copula"] else 0
        rep = evaluate(model, test, ["njnll"], samples=0)
        by_k.setdefault(k, []).append(rep.mean("njnll"))
    path = out / "sensitivity.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "runs", "njnll_mean", "njnll_std"])
        for k in sorted(by_k):
            v = np.asarray(by_k[k])
            w.writerow([k, v.size, repr(float(v.mean())), repr(float(v.std(ddof=1) if v.size > 1 else 0.0))])
            print(f"K={k:3d} runs {v.size} njNLL {v.mean():.4f}")
    return {"figure": str(path)}


def _write_columns(path, cols: dict):
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(zip(*[[repr(float(v)) for v in cols[n]] for n in names]))


def cmd_figure(args, out: Path) -> dict:
    return {"fig1": _fig1, "appH": _appH, "sensitivity": _sensitivity}[args.which](args, out)


def cmd_gradcheck(args, out: Path) -> dict:
    if args.checkpoint:
        model, meta = load_model(args.checkpoint)
        channels = meta["model"]["channels"]
    else:
        torch.manual_seed(args.seed)
        channels = args.channels
        model = build_model(ModelConfig(channels=channels, copula_components=args.components,
                                        copula_rank=args.rank, copula=args.stage != "marginal"))
    rng = np.random.default_rng(args.seed)
    insts = []
    for _ in range(args.instances):
        hist = [(float(rng.uniform()), int(rng.integers(channels)), float(rng.normal())) for _ in range(args.history)]
        queries = [(float(rng.uniform()), int(rng.integers(channels))) for _ in range(args.queries)]
        insts.append(ImtsInstance(hist, queries, rng.normal(size=args.queries).tolist()))
    rep = grad_check(model, insts, eps=args.eps, tol=args.tol, stage=args.stage, seed=args.seed)
    for line in rep.lines():
        print(line)
    result = {"groups": rep.groups, "worst_tensor": rep.worst_tensor, "worst_group": rep.worst_group,
              "frozen_zero": rep.frozen_zero, "tol": rep.tol, "passed": rep.passed}
    write_json_atomic(out / "gradcheck.json", result)
    if not rep.passed:
        raise ToleranceBreach(f"gradient check exceeded tol {args.tol:g} in group {rep.worst_group}")
    return result


# --- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmcopula", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on torch intra-op threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen", help="generate a toy or synthetic IMTS dataset")
    common(g)
    g.add_argument("--kind", choices=TOY_KINDS + ("imts",), required=True)
    g.add_argument("--n", type=int, default=20000, help="samples (toy) or instances (imts)")
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--channels", type=int, default=5)
    g.add_argument("--sparsity", type=float, default=0.5)
    g.add_argument("--dependence", type=float, default=0.5)
    g.add_argument("--horizon", type=float, default=10.0)
    g.add_argument("--path", help="output file (default <out>/<kind>.jsonl)")

    t = sub.add_parser("train", help="train one stage")
    common(t)
    t.add_argument("--stage", choices=("marginal", "copula", "joint-ablation"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--marginal", help="marginal checkpoint (copula stage)")
    t.add_argument("--split-seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate metrics on a data split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    e.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)

    s = sub.add_parser("sample", help="draw joint samples for one instance")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--instance", type=int, default=0)
    s.add_argument("--count", type=int, default=DEFAULT_SAMPLES)

    c = sub.add_parser("consistency", help="marginalization-consistency check")
    common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--mode", choices=("density", "sampling"), required=True)
    c.add_argument("--split", choices=SPLITS, default="test")
    c.add_argument("--instance", type=int, default=0)
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--samples", type=int, default=10000)
    c.add_argument("--repeats", type=int, default=5)

    f = sub.add_parser("figure", help="emit plot data as CSV")
    common(f)
    f.add_argument("which", choices=("fig1", "appH", "sensitivity"))
    f.add_argument("--checkpoint", action="append", help="repeatable")
    f.add_argument("--gmc")
    f.add_argument("--mixgc")
    f.add_argument("--data")
    f.add_argument("--split", choices=SPLITS, default="test")
    f.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    common(gc)
    gc.add_argument("--checkpoint")
    gc.add_argument("--stage", choices=("marginal", "copula", "joint-ablation"), default="joint-ablation")
    gc.add_argument("--channels", type=int, default=3)
    gc.add_argument("--components", type=int, default=3)
    gc.add_argument("--rank", type=int, default=2)
    gc.add_argument("--queries", type=int, default=4)
    gc.add_argument("--history", type=int, default=6)
    gc.add_argument("--instances", type=int, default=2)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-3)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sample": cmd_sample,
            "consistency": cmd_consistency, "figure": cmd_figure, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        torch.set_num_threads(args.threads)
    start = time.time()
    out = None
    try:
        out = _out_dir(args)
        extra, code = COMMANDS[args.command](args, out), EXIT_OK
    except (DataFormatError, ckpt.CheckpointError, FileNotFoundError) as exc:
        extra, code = {"error": str(exc)}, EXIT_DATA
    except (IcdfSolverError, FlowInversionError, TrainingDiverged) as exc:
        extra, code = {"error": str(exc)}, EXIT_NUMERICAL
    except ToleranceBreach as exc:
        extra, code = {"error": str(exc)}, EXIT_TOLERANCE
    except ValueError as exc:
        # includes ConfigError and argument validation inside the library
        extra, code = {"error": str(exc)}, EXIT_CONFIG
    if code != EXIT_OK:
        print(f"error: {extra['error']}", file=sys.stderr)
    if out is not None:
        manifest = {"command": ["gmcopula"] + argv, "config": getattr(args, "config", None),
                    "seed": getattr(args, "seed", None), "git": _git_describe(), "out": str(out),
                    "duration_s": round(time.time() - start, 3), "exit_code": code, "result": extra}
        write_json_atomic(out / "manifest.json", manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
