"""End-to-end pipelines: train, recover, benchmark, plot, export.

Every pipeline writes into an output directory and keeps a run manifest
(``manifest.json``) recording the canonical config, its hash, the code
version and the artifacts produced.  Trained surrogates are cached under
``$NNVI_CACHE_DIR`` (default ``~/.cache/nnvi``) keyed by config hash, seed
and the version of the training code, so re-running a pipeline reuses them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .bench import BenchmarkReport, btm_optimal_stopping, btm_primal, compare, format_table1, \
    format_table2, reduce_product_put
from .config import ExperimentConfig
from .dual import PrimalRecovery, recover, write_recovery_csv
from .exceptions import ContractError, DependencyError
from .surrogate import load_checkpoint, save_checkpoint
from .train import TrainReport, train, write_training_log

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RESULTS_CSV = "results.csv"
RESULT_COLUMNS = ("run_hash", "seed", "t", "x", "method", "y_star", "value", "benchmark", "rel_diff",
                  "fallback_flag", "status")
_TRAINING_MODULES = ("problems.py", "utility.py", "surrogate.py", "loss.py", "train.py")


def _sha(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.hexdigest()


def code_version(modules=None) -> str:
    """Content hash of the package sources (or of the named modules)."""
    root = Path(__file__).parent
    files = sorted(root.glob("*.py")) if modules is None else [root / m for m in modules]
    return _sha(*(f.name.encode() + b"\0" + f.read_bytes() for f in files))[:16]


def run_hash(cfg: ExperimentConfig) -> str:
    return _sha(cfg.content_hash().encode(), code_version().encode())[:16]


def cache_dir() -> Path:
    return Path(os.environ.get("NNVI_CACHE_DIR", Path.home() / ".cache" / "nnvi"))


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, cfg: ExperimentConfig, artifacts: Optional[dict] = None) -> Path:
    """Create or update ``manifest.json``; artifacts accumulate across calls."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MANIFEST
    old = json.loads(path.read_text()) if path.exists() else {}
    same_run = old.get("run_hash") == run_hash(cfg)
    arts = dict(old.get("artifacts", {})) if same_run else {}
    arts.update(artifacts or {})
    manifest = {
        "format": "nnvi-run", "version": 1, "name": cfg.name,
        "config": cfg.to_ini(), "config_hash": cfg.content_hash(),
        "code_version": code_version(), "run_hash": run_hash(cfg),
        "seeds": list(cfg.seeds), "nnvi": __version__,
        "numpy": np.__version__, "torch": torch.__version__,
        "artifacts": arts,
    }
    return _write_json(path, manifest)


# ---------------------------------------------------------------- training

@dataclass
class TrainedModel:
    model: object
    seed: int
    train_time: float
    best_eval_loss: float
    cached: bool
    milestones: list
    report: Optional[TrainReport] = None


def _cache_key(cfg: ExperimentConfig, seed: int) -> str:
    return _sha(cfg.content_hash().encode(), code_version(_TRAINING_MODULES).encode(),
                str(int(seed)).encode())[:20]


def train_or_load(cfg: ExperimentConfig, seed: int, use_cache: bool = True) -> TrainedModel:
    """Train one seed, or load it from the cache when an identical run exists.

    Milestone snapshots (best state at each milestone fraction of the step
    budget) are stored alongside the final checkpoint.
    """
    key = _cache_key(cfg, seed)
    d = cache_dir() / key
    meta_path = d / "meta.json"
    if use_cache and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        model, _ = load_checkpoint(d / "model.npz")
        ms = []
        for m in meta["milestones"]:
            mm, _ = load_checkpoint(d / m["file"])
            ms.append({**m, "model": mm})
        return TrainedModel(model, seed, meta["train_time"], meta["best_eval_loss"], True, ms)

    problem = cfg.build_problem()
    model, report = train(problem, cfg.surrogate, cfg.train, seed=seed)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, d / "model.npz", extra={"seed": seed, "config_hash": cfg.content_hash()})
    write_training_log(report, d / "train_log.csv")
    ms = []
    for i, m in enumerate(report.milestones):
        snap = type(model)(model.config, model.in_center, model.in_halfwidth,
                           float(model.output_scale), float(model.output_shift))
        snap.load_state_dict(m["state"])
        fname = f"milestone{i}.npz"
        save_checkpoint(snap, d / fname, extra={"step": m["step"]})
        ms.append({"step": m["step"], "fraction": m["fraction"], "best_eval_total": m["best_eval_total"],
                   "file": fname, "model": snap})
    meta = {"seed": seed, "train_time": report.wall_clock, "best_eval_loss": report.best_eval_loss,
            "best_step": report.best_step, "steps": report.steps_executed,
            "milestones": [{k: v for k, v in m.items() if k != "model"} for m in ms]}
    _write_json(meta_path, meta)
    return TrainedModel(model, seed, report.wall_clock, report.best_eval_loss, False, ms, report)


def run_train(cfg: ExperimentConfig, out, seeds=None, use_cache: bool = True) -> list[TrainedModel]:
    """Train every seed; writes checkpoints, training logs and the manifest."""
    out = Path(out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    results, arts = [], {}
    for seed in (cfg.seeds if seeds is None else seeds):
        tm = train_or_load(cfg, seed, use_cache)
        ck = out / "checkpoints" / f"model_seed{seed}.npz"
        save_checkpoint(tm.model, ck, extra={"seed": seed, "config_hash": cfg.content_hash(),
                                             "train_time": tm.train_time})
        src_log = cache_dir() / _cache_key(cfg, seed) / "train_log.csv"
        if src_log.exists():
            shutil.copyfile(src_log, out / "logs" / f"train_seed{seed}.csv")
            arts[f"train_log_seed{seed}"] = f"logs/train_seed{seed}.csv"
        arts[f"checkpoint_seed{seed}"] = f"checkpoints/model_seed{seed}.npz"
        arts[f"train_time_seed{seed}"] = tm.train_time
        results.append(tm)
        log.info("seed %d: best eval loss %.4g (%s)", seed, tm.best_eval_loss,
                 "cached" if tm.cached else f"{tm.train_time:.1f}s")
    write_manifest(out, cfg, arts)
    return results


def load_trained(out, seed: int):
    path = Path(out) / "checkpoints" / f"model_seed{seed}.npz"
    if not path.exists():
        raise DependencyError(f"no checkpoint for seed {seed} at {path}; run `train` first")
    return load_checkpoint(path)[0]


# ---------------------------------------------------------------- evaluation

def put_price(model, spec) -> float:
    """Surrogate price at ``t = 0`` and ``s = s0`` (forward clock ``tau' = T``)."""
    pt = np.concatenate([[spec.T], np.log(spec.s0)])[None, :]
    with torch.no_grad():
        return float(model(pt)[0])


def _require(cfg: ExperimentConfig, kind: str):
    if cfg.problem_type != kind:
        raise ContractError(f"this step needs a {kind} problem, config has {cfg.problem_type!r}")


def _recovery_x(cfg):
    if not cfg.recovery_x:
        raise ContractError("[recovery] x lists no wealth points")
    return np.asarray(cfg.recovery_x, dtype=float)


def run_recover(cfg: ExperimentConfig, out, seed: Optional[int] = None, methods=None) -> dict:
    """Primal values at ``[recovery] x`` from the trained dual surrogate."""
    _require(cfg, "dual_investment")
    out = Path(out)
    seed = cfg.seeds[0] if seed is None else seed
    model = load_trained(out, seed)
    xs = _recovery_x(cfg)
    res, arts = {}, {}
    for method in methods or (cfg.recovery.method,):
        rec = PrimalRecovery(method, cfg.recovery.n_points, cfg.recovery.y_bracket,
                             cfg.recovery.tol_bisect, scan_points=cfg.recovery.scan_points)
        t0 = time.perf_counter()
        r = recover(model, cfg.problem_spec, cfg.recovery_t, xs, rec)
        r["eval_ms"] = 1e3 * (time.perf_counter() - t0) / xs.size
        name = f"recovery_seed{seed}_{method}.csv"
        write_recovery_csv(out / name, cfg.recovery_t, xs, r)
        arts[f"recovery_seed{seed}_{method}"] = name
        res[method] = r
    write_manifest(out, cfg, arts)
    return res


def reference_values(cfg: ExperimentConfig) -> dict:
    """Tree benchmark: primal values at the recovery points, or the put price."""
    t0 = time.perf_counter()
    if cfg.problem_type == "dual_investment":
        xs = _recovery_x(cfg)
        r = btm_primal(cfg.problem_spec, cfg.recovery_t, xs, cfg.bench_steps, cfg.bench_grid)
        vals = {"x": xs, "V": r["V"], "y_star": r["y_star"]}
    elif cfg.problem_type == "american_put":
        tree, z0 = reduce_product_put(cfg.problem_spec, cfg.bench_steps)
        vals = {"x": np.array([z0]), "V": np.array([btm_optimal_stopping(tree, z0, cfg.problem_spec.T)])}
    else:
        raise ContractError(f"no tree benchmark for problem type {cfg.problem_type!r}")
    vals["time"] = time.perf_counter() - t0
    return vals


def run_bench(cfg: ExperimentConfig, out) -> dict:
    """Tree benchmark, plus comparison with any trained seeds present in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ref = reference_values(cfg)
    reports: dict[str, BenchmarkReport] = {}
    lines = [f"benchmark ({cfg.name}): tree N={cfg.bench_steps}, {ref['time']:.2f}s"]
    if cfg.problem_type == "dual_investment":
        for seed in cfg.seeds:
            for m in ("bisection", "grid"):
                p = out / f"recovery_seed{seed}_{m}.csv"
                if p.exists():
                    v = [float(r["V_n"]) for r in csv.DictReader(open(p))]
                    reports[f"seed{seed}/{m}"] = compare(v, ref["V"], ref["x"], method=f"NN {m}")
    else:
        for seed in cfg.seeds:
            ck = out / "checkpoints" / f"model_seed{seed}.npz"
            if ck.exists():
                v = put_price(load_checkpoint(ck)[0], cfg.problem_spec)
                reports[f"seed{seed}/price"] = compare([v], ref["V"], ref["x"], method="NN")
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "method", "x", "V_method", "V_benchmark", "rel_diff"])
        if not reports:
            for x, b in zip(ref["x"], ref["V"]):
                w.writerow(["tree", "BTM", repr(float(x)), "", repr(float(b)), ""])
        for key, rep in reports.items():
            for r in rep.records():
                w.writerow([key, rep.method, repr(r["x"]), repr(r["V_method"]), repr(r["V_benchmark"]),
                            repr(r["rel_diff"])])
    for key, rep in reports.items():
        lines.append(f"{key:<20} mean abs rel diff {100 * rep.mean_abs_rel_diff:.4f}%  "
                     f"std {100 * rep.std_rel_diff:.4f}%")
    if cfg.reference is not None:
        lines.append(f"reference {cfg.reference}; tree {float(ref['V'][0]):.6f}")
    table = "\n".join(lines)
    (out / "bench.txt").write_text(table + "\n")
    write_manifest(out, cfg, {"bench_csv": "bench.csv", "bench_table": "bench.txt"})
    return {"reference": ref, "reports": reports, "table": table}


# ---------------------------------------------------------------- plots

def run_plot(cfg: ExperimentConfig, out, seed: Optional[int] = None, n: int = 60) -> list[Path]:
    """Static value-curve figures (PNG)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0] if seed is None else seed
    model = load_trained(out, seed)
    fig, ax = plt.subplots(figsize=(6, 4))
    if cfg.problem_type == "dual_investment":
        spec = cfg.problem_spec
        xs = _recovery_x(cfg)
        grid = np.linspace(xs.min(), xs.max(), n)
        for m, style in (("bisection", "-"), ("grid", "--")):
            rec = PrimalRecovery(m, cfg.recovery.n_points, cfg.recovery.y_bracket, cfg.recovery.tol_bisect)
            ax.plot(grid, recover(model, spec, cfg.recovery_t, grid, rec)["V"], style, label=f"NN {m}")
        ax.plot(xs, btm_primal(spec, cfg.recovery_t, xs, cfg.bench_steps, cfg.bench_grid)["V"], "o",
                label="BTM")
        ax.plot(grid, spec.utility(grid - spec.K), ":", label="U(x - K)")
        ax.set_xlabel("wealth x")
        ax.set_ylabel(f"V({cfg.recovery_t:g}, x)")
    elif cfg.problem_type == "american_put":
        spec = cfg.problem_spec
        # price along the diagonal s = s0 * exp(u / d) of the product
        u = np.linspace(-0.5, 0.5, n)
        x = np.log(spec.s0)[None, :] + u[:, None] / spec.d
        pts = np.concatenate([np.full((n, 1), spec.T), x], axis=1)
        with torch.no_grad():
            v = model(pts).double().numpy()
        prod = np.exp(x.sum(axis=1))
        ax.plot(prod, v, label="NN")
        ax.plot(prod, np.maximum(spec.K - prod, 0.0), ":", label="payoff")
        ax.set_xlabel("product of prices")
        ax.set_ylabel("price at t = 0")
    else:
        raise ContractError(f"no plot for problem type {cfg.problem_type!r}")
    ax.legend()
    ax.set_title(cfg.name)
    fig.tight_layout()
    path = out / "plots" / f"value_seed{seed}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    write_manifest(out, cfg, {f"plot_seed{seed}": str(path.relative_to(out))})
    return [path]


# ---------------------------------------------------------------- tables

def repro_table1(configs: dict, out, use_cache: bool = True) -> dict:
    """Train (or load) each investment-and-stopping config and compare both recoveries with the tree.

    ``configs`` maps a utility label to an :class:`ExperimentConfig`.
    """
    out = Path(out)
    rows, details = {}, {}
    for label, cfg in configs.items():
        sub = out / cfg.name
        tm = run_train(cfg, sub, seeds=cfg.seeds[:1], use_cache=use_cache)[0]
        rec = run_recover(cfg, sub, seed=tm.seed, methods=("bisection", "grid"))
        ref = reference_values(cfg)
        for m, tag in (("bisection", "NN Bisection"), ("grid", "NN Grid")):
            rep = compare(rec[m]["V"], ref["V"], ref["x"], method=tag)
            rows[f"{label}/{tag}"] = {"report": rep, "train_time": tm.train_time, "eval_ms": rec[m]["eval_ms"]}
        rows[f"{label}/BTM"] = {"report": compare(ref["V"], ref["V"], ref["x"], method="BTM"),
                                "train_time": None, "eval_ms": 1e3 * ref["time"] / ref["x"].size}
        details[label] = {"cached": tm.cached, "recovery": rec, "reference": ref}
        run_bench(cfg, sub)
    table = format_table1(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table1.txt").write_text(table + "\n")
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utility", "method", "mean_abs_rel_diff_pct", "std_rel_diff_pct", "train_time_s",
                    "eval_ms_per_point"])
        for key, row in rows.items():
            u, m = key.split("/", 1)
            rep = row["report"]
            w.writerow([u, m, repr(100 * rep.mean_abs_rel_diff), repr(100 * rep.std_rel_diff),
                        "" if row["train_time"] is None else repr(row["train_time"]), repr(row["eval_ms"])])
    return {"rows": rows, "table": table, "details": details}


def repro_table2(configs: dict, out, seeds=None, use_cache: bool = True) -> dict:
    """Put prices over seeds for each dimension; ``configs`` maps ``d`` to a config."""
    out = Path(out)
    results = {}
    for d, cfg in sorted(configs.items()):
        sd = tuple(range(seeds)) if isinstance(seeds, int) else (tuple(seeds) if seeds else cfg.seeds)
        cfg = cfg.with_seeds(sd)
        sub = out / cfg.name
        tms = run_train(cfg, sub, use_cache=use_cache)
        prices = np.array([put_price(tm.model, cfg.problem_spec) for tm in tms])
        ref = reference_values(cfg)
        results[d] = {"mean": float(prices.mean()),
                      "std": float(prices.std(ddof=1)) if prices.size > 1 else 0.0,
                      "prices": prices, "seeds": sd,
                      "reference": cfg.reference if cfg.reference is not None else float(ref["V"][0]),
                      "tree": float(ref["V"][0]),
                      "train_time": [tm.train_time for tm in tms],
                      "cached": [tm.cached for tm in tms]}
        with open(sub / "prices.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "price", "reference", "tree"])
            for s, p in zip(sd, prices):
                w.writerow([s, repr(float(p)), repr(results[d]["reference"]), repr(results[d]["tree"])])
        write_manifest(sub, cfg, {"prices_csv": "prices.csv"})
    table = format_table2(results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table2.txt").write_text(table + "\n")
    return {"results": results, "table": table}


# ---------------------------------------------------------------- export

def _rows_from_recovery(path: Path, seed: int, method: str):
    for r in csv.DictReader(open(path)):
        yield {"seed": str(seed), "t": r["t"], "x": r["x"], "method": method, "y_star": r["y_star"],
               "value": r["V_n"], "fallback_flag": r["fallback_flag"]}


def _summary(rows, key_fields=("t", "x", "method")):
    groups: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        groups.setdefault(tuple(r[k] for k in key_fields), []).append(float(r["value"]))
    out = []
    for key, vals in sorted(groups.items()):
        if len(vals) < 2:
            continue
        a = np.asarray(vals)
        out.append(dict(zip(key_fields, key), seed="mean", value=repr(float(a.mean())),
                        y_star="", fallback_flag="", status=f"summary n={a.size}"))
        out.append(dict(zip(key_fields, key), seed="std", value=repr(float(a.std(ddof=1))),
                        y_star="", fallback_flag="", status=f"summary n={a.size}"))
    return out


def export_results(run_dir) -> Path:
    """Join per-point results of a run directory into ``results.csv``.

    Rows are tagged by seed and carry the run hash from the manifest.  For
    several seeds, ``mean`` and ``std`` (sample) summary rows follow.  Seeds
    listed in the manifest without results produce ``incomplete`` rows.  An
    empty directory yields a header-only CSV and a minimal manifest.  The
    output depends only on the artifacts, so re-exporting is byte-identical.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    mpath = run_dir / MANIFEST
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    else:
        manifest = {"format": "nnvi-run", "version": 1, "artifacts": {}, "seeds": [], "run_hash": ""}
        _write_json(mpath, manifest)
    h = manifest.get("run_hash", "")
    rows = []
    seeds_seen = set()
    for p in sorted(run_dir.glob("recovery_seed*_*.csv")):
        stem = p.stem[len("recovery_seed"):]
        seed_s, method = stem.split("_", 1)
        seeds_seen.add(int(seed_s))
        for r in _rows_from_recovery(p, int(seed_s), method):
            rows.append({**r, "status": "ok"})
    prices = run_dir / "prices.csv"
    if prices.exists():
        for r in csv.DictReader(open(prices)):
            seeds_seen.add(int(r["seed"]))
            rows.append({"seed": r["seed"], "t": "0.0", "x": "s0", "method": "NN", "y_star": "",
                         "value": r["price"], "fallback_flag": "", "status": "ok",
                         "benchmark": r["reference"]})
    for s in manifest.get("seeds", []):
        if int(s) not in seeds_seen:
            rows.append({"seed": str(s), "t": "", "x": "", "method": "", "y_star": "", "value": "",
                         "fallback_flag": "", "status": "incomplete"})
    bench = run_dir / "bench.csv"
    bmap = {}
    if bench.exists():
        for r in csv.DictReader(open(bench)):
            if r["V_benchmark"]:
                bmap[repr(float(r["x"]))] = r["V_benchmark"]
    rows.sort(key=lambda r: (r["method"], r["t"], r["x"], r["seed"]))
    rows += _summary(rows)
    path = run_dir / RESULTS_CSV
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            b = r.get("benchmark") or (bmap.get(repr(float(r["x"]))) if r["x"] not in ("", "s0") else "") or ""
            rel = ""
            if b and r["value"] and r["status"] != "incomplete" and r["seed"] not in ("std",):
                rel = repr((float(r["value"]) - float(b)) / float(b))
            w.writerow({"run_hash": h, "seed": r["seed"], "t": r["t"], "x": r["x"], "method": r["method"],
                        "y_star": r["y_star"], "value": r["value"], "benchmark": b, "rel_diff": rel,
                        "fallback_flag": r["fallback_flag"], "status": r["status"]})
    return path
