"""Command line driver.

Exit status: 0 success, 1 runtime failure, 2 invalid config or arguments,
3 missing prerequisite artifact (e.g. ``recover`` before ``train``).

Environment:
    NNVI_OUT_DIR   output directory when ``--out`` is not given
    NNVI_DEVICE    torch device (default ``cpu``)
    NNVI_CACHE_DIR cache of trained surrogates
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, load_config, shipped_config
from .exceptions import DependencyError, ParameterError

log = logging.getLogger("nnvi")

UTILITY_CONFIGS = {"power": "invest_power", "non_hara": "invest_nonhara"}


def _common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", type=Path, required=config_required, metavar="PATH",
                   help="experiment config (INI)")
    p.add_argument("--seed", type=int, default=None, metavar="N", help="run only this seed")
    p.add_argument("--out", type=Path, default=None, metavar="DIR", help="output directory")
    p.add_argument("--no-cache", action="store_true", help="retrain even if a cached run exists")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnvi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("validate", help="parse and check a config; no compute"))
    _common(sub.add_parser("train", help="train surrogates; writes checkpoints and logs"))
    p = sub.add_parser("recover", help="primal values from a trained dual surrogate")
    _common(p)
    p.add_argument("--method", choices=("bisection", "grid", "both"), default=None)
    _common(sub.add_parser("bench", help="tree benchmark and comparison"))
    _common(sub.add_parser("plot", help="value curves as PNG"))
    p = sub.add_parser("repro-table1", help="investment-and-stopping comparison: both recoveries vs the tree")
    _common(p, config_required=False)
    p.add_argument("--utility", choices=("power", "non_hara", "all"), default="all")
    p = sub.add_parser("repro-table2", help="multi-asset put table")
    _common(p, config_required=False)
    p.add_argument("--d", type=int, nargs="+", default=[1, 5, 10, 20])
    p.add_argument("--seeds", type=int, default=None, help="number of seeds 0..N-1")
    p = sub.add_parser("export", aliases=["export-results"],
                       help="consolidated results CSV of a run directory")
    _common(p, config_required=False)
    p.add_argument("run_dir", type=Path, nargs="?", default=None)
    return parser


def _device():
    name = os.environ.get("NNVI_DEVICE", "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError:
        raise ParameterError(f"NNVI_DEVICE={name!r} is not a torch device") from None
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ParameterError(f"NNVI_DEVICE={name!r} but CUDA is not available")
    torch.set_default_device(dev)
    return dev


def _out_dir(args, cfg=None) -> Path:
    if args.out is not None:
        return args.out
    env = os.environ.get("NNVI_OUT_DIR")
    if env:
        return Path(env) / (cfg.name if cfg is not None else "")
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("runs") / (cfg.name if cfg is not None else "export")


def _seeds(args, cfg):
    return (args.seed,) if args.seed is not None else cfg.seeds


def _run(args) -> int:
    from . import experiments as ex

    _device()
    cfg = load_config(args.config) if args.config is not None else None
    if args.command == "validate":
        problem = cfg.build_problem()
        print(f"ok: {cfg.name} ({cfg.problem_type}, dim {problem.dim}, seeds {list(cfg.seeds)}, "
              f"hash {cfg.content_hash()[:12]})")
        return 0
    use_cache = not args.no_cache
    if args.command == "train":
        out = _out_dir(args, cfg)
        for tm in ex.run_train(cfg, out, seeds=_seeds(args, cfg), use_cache=use_cache):
            src = "cache" if tm.cached else f"{tm.train_time:.1f}s"
            print(f"seed {tm.seed}: best eval loss {tm.best_eval_loss:.6g} ({src})")
        print(f"artifacts in {out}")
        return 0
    if args.command == "recover":
        out = _out_dir(args, cfg)
        methods = None if args.method is None else (
            ("bisection", "grid") if args.method == "both" else (args.method,))
        for seed in _seeds(args, cfg):
            for m, r in ex.run_recover(cfg, out, seed=seed, methods=methods).items():
                print(f"seed {seed} {m}: " + ", ".join(f"{v:.6f}" for v in r["V"]))
        return 0
    if args.command == "bench":
        print(ex.run_bench(cfg, _out_dir(args, cfg))["table"])
        return 0
    if args.command == "plot":
        for seed in _seeds(args, cfg):
            for p in ex.run_plot(cfg, _out_dir(args, cfg), seed=seed):
                print(p)
        return 0
    if args.command == "repro-table1":
        if cfg is not None:
            configs = {cfg.name: cfg}
        else:
            names = UTILITY_CONFIGS if args.utility == "all" else {args.utility: UTILITY_CONFIGS[args.utility]}
            configs = {k: load_config(shipped_config(v)) for k, v in names.items()}
        if args.seed is not None:
            configs = {k: c.with_seeds((args.seed,)) for k, c in configs.items()}
        out = args.out or Path(os.environ.get("NNVI_OUT_DIR", "runs")) / "table1"
        print(ex.repro_table1(configs, out, use_cache=use_cache)["table"])
        return 0
    if args.command == "repro-table2":
        configs = {cfg.problem_spec.d: cfg} if cfg is not None else \
            {d: load_config(shipped_config(f"put_d{d}")) for d in args.d}
        seeds = (args.seed,) if args.seed is not None else args.seeds
        out = args.out or Path(os.environ.get("NNVI_OUT_DIR", "runs")) / "table2"
        print(ex.repro_table2(configs, out, seeds=seeds, use_cache=use_cache)["table"])
        return 0
    if args.command in ("export", "export-results"):
        run_dir = args.run_dir or _out_dir(args, cfg)
        print(ex.export_results(run_dir))
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except (ParameterError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
