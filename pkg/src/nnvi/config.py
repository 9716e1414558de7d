"""Experiment configuration files.

A config is a flat sectioned key-value file (``configparser`` INI syntax).
Values are literals only; lists are comma separated.  Schema version 1:

``[meta]``
    ``schema_version`` (required, ``1``), ``name``.
``[problem]``
    ``type``: ``dual_investment``, ``american_put`` or a name registered with
    :func:`register_problem`.

    dual_investment: ``utility`` (``power`` | ``non_hara``), ``gamma``,
    ``mu``, ``r``, ``sigma``, ``beta``, ``K``, ``T``, ``z_lo``, ``z_hi``.

    american_put: ``d``, ``K``, ``T``, ``r``, ``delta``, ``sigma``, ``rho``,
    ``s0`` (scalars broadcast over assets), ``box_sd``, optional ``x_lo`` /
    ``x_hi`` lists, ``reference`` (reference price, optional).
``[surrogate]``
    ``hidden_layers``, ``activation``, ``dtype``, ``parameter_seed``,
    ``allow_unbounded``.
``[sampling]``
    ``n_interior``, ``n_initial``, ``n_lateral``, ``n_time_pairs``,
    ``n_space_pairs``, ``measure``, ``center``, ``scale``, ``eps_t``,
    ``eps_x``, ``resample_each_step``, ``seed``, ``boundary_measure``,
    ``tangential_seminorm``.
``[weights]``
    ``interior``, ``initial``, ``lateral_trace``, ``lateral_normal``.
``[train]``
    ``steps``, ``optimizer``, ``learning_rate``, ``final_learning_rate``,
    ``schedule``, ``checkpoint_every``, ``seeds``, ``early_stop``,
    ``eval_scale``, ``lbfgs_steps``, ``lbfgs_rounds``, ``milestones``.
``[recovery]``
    ``method``, ``n_points``, ``y_lo``, ``y_hi``, ``tol_bisect``,
    ``scan_points``, ``t``, ``x``.
``[bench]``
    ``n_steps``, ``n_grid``.
``[output]``
    ``dir``.

Every section except ``[meta]`` and ``[problem]`` is optional; missing keys
take the defaults of the owning dataclass.  Unknown sections or keys are
rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dual import PrimalRecovery
from .exceptions import ParameterError
from .loss import LossWeights, SamplingPlan
from .problems import (AmericanPutSpec, DualProblemSpec, VIProblem, build_american_put_problem,
                       build_dual_investment_problem)
from .surrogate import SurrogateConfig
from .train import TrainConfig
from .utility import UtilityFamily

SCHEMA_VERSION = 1

PROBLEM_REGISTRY: dict[str, Callable[[dict], VIProblem]] = {}


class ConfigError(ParameterError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, section: str, key: Optional[str], message: str):
        self.section, self.key = section, key
        where = f"[{section}]" + (f" {key}" if key else "")
        super().__init__(f"{where}: {message}")


def register_problem(name: str):
    """Decorator registering ``builder(options: dict) -> VIProblem`` under ``name``."""
    if name in ("dual_investment", "american_put"):
        raise ParameterError(f"{name!r} is a built-in problem type")

    def deco(builder):
        PROBLEM_REGISTRY[name] = builder
        return builder
    return deco


_ALLOWED = {
    "meta": {"schema_version", "name"},
    "problem": None,  # depends on type
    "surrogate": {"hidden_layers", "activation", "dtype", "parameter_seed", "allow_unbounded"},
    "sampling": {"n_interior", "n_initial", "n_lateral", "n_time_pairs", "n_space_pairs", "measure",
                 "center", "scale", "eps_t", "eps_x", "resample_each_step", "seed",
                 "boundary_measure", "tangential_seminorm"},
    "weights": {"interior", "initial", "lateral_trace", "lateral_normal"},
    "train": {"steps", "optimizer", "learning_rate", "final_learning_rate", "schedule",
              "checkpoint_every", "seeds", "early_stop", "eval_scale", "lbfgs_steps", "lbfgs_rounds",
              "milestones"},
    "recovery": {"method", "n_points", "y_lo", "y_hi", "tol_bisect", "scan_points", "t", "x"},
    "bench": {"n_steps", "n_grid"},
    "output": {"dir"},
}
_PROBLEM_KEYS = {
    "dual_investment": {"type", "utility", "gamma", "mu", "r", "sigma", "beta", "K", "T", "z_lo", "z_hi"},
    "american_put": {"type", "d", "K", "T", "r", "delta", "sigma", "rho", "s0", "box_sd", "x_lo", "x_hi",
                     "reference"},
}


class _Section:
    """Typed, field-reporting access to one config section."""

    def __init__(self, name: str, data: dict):
        self.name, self.data = name, data

    def __contains__(self, key):
        return key in self.data

    def _raw(self, key, default, required):
        if key not in self.data:
            if required:
                raise ConfigError(self.name, key, "missing required key")
            return None
        return self.data[key].strip()

    def _conv(self, key, conv, what, default, required):
        raw = self._raw(key, default, required)
        if raw is None:
            return default
        if raw.lower() in ("none", ""):
            return None
        try:
            return conv(raw)
        except (TypeError, ValueError):
            raise ConfigError(self.name, key, f"expected {what}, got {raw!r}") from None

    def float(self, key, default=None, required=False):
        return self._conv(key, float, "a number", default, required)

    def int(self, key, default=None, required=False):
        def conv(s):
            v = float(s)
            if v != int(v):
                raise ValueError
            return int(v)
        return self._conv(key, conv, "an integer", default, required)

    def str(self, key, default=None, required=False):
        return self._conv(key, str, "a string", default, required)

    def bool(self, key, default=None, required=False):
        def conv(s):
            s = s.lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return self._conv(key, conv, "a boolean", default, required)

    def floats(self, key, default=None, required=False):
        return self._conv(key, lambda s: tuple(float(v) for v in s.split(",") if v.strip()),
                          "a comma-separated list of numbers", default, required)

    def ints(self, key, default=None, required=False):
        return self._conv(key, lambda s: tuple(int(v) for v in s.split(",") if v.strip()),
                          "a comma-separated list of integers", default, required)


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls) if f.default is not MISSING}


@dataclass
class ExperimentConfig:
    """Validated experiment: problem, surrogate, training, recovery, benchmark and output."""

    name: str
    problem_type: str
    problem_spec: object
    problem_options: dict
    surrogate: SurrogateConfig
    train: TrainConfig
    recovery: PrimalRecovery
    recovery_t: float
    recovery_x: tuple
    bench_steps: int
    bench_grid: int
    output_dir: Optional[str]
    reference: Optional[float] = None
    source: str = field(default="", repr=False)

    @property
    def seeds(self) -> tuple:
        return self.train.seeds

    def build_problem(self) -> VIProblem:
        if self.problem_type == "dual_investment":
            return build_dual_investment_problem(self.problem_spec)
        if self.problem_type == "american_put":
            return build_american_put_problem(self.problem_spec)
        return PROBLEM_REGISTRY[self.problem_type](dict(self.problem_options))

    def to_ini(self) -> str:
        """Canonical text of the parsed config (sorted sections and keys)."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        src = configparser.ConfigParser(interpolation=None)
        src.optionxform = str
        src.read_string(self.source)
        for sec in sorted(src.sections()):
            cp.add_section(sec)
            for k in sorted(src[sec]):
                cp[sec][k] = " ".join(src[sec][k].split())
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seeds=tuple(seeds)))


def _build_dual(sec: _Section):
    kind = sec.str("utility", required=True)
    if kind == "power":
        utility = UtilityFamily.power(sec.float("gamma", 0.5))
    elif kind == "non_hara":
        if "gamma" in sec:
            raise ConfigError("problem", "gamma", "not used by the non_hara utility")
        utility = UtilityFamily.non_hara()
    else:
        raise ConfigError("problem", "utility", f"unknown utility {kind!r} (power | non_hara)")
    kw = {k: sec.float(k, required=True) for k in ("mu", "r", "sigma", "beta", "K", "T")}
    return DualProblemSpec(utility, z_lo=sec.float("z_lo", -6.0), z_hi=sec.float("z_hi", 4.0), **kw)


def _build_put(sec: _Section):
    d = sec.int("d", required=True)
    vec = {k: sec.floats(k, required=True) for k in ("delta", "sigma", "s0")}
    vec = {k: (v[0] if len(v) == 1 else np.array(v)) for k, v in vec.items()}
    rho = sec.floats("rho", (0.0,))
    if len(rho) == 1:
        rho_v = rho[0]
    elif len(rho) == d * d:
        rho_v = np.array(rho).reshape(d, d)
    else:
        raise ConfigError("problem", "rho", f"need 1 or d*d = {d * d} entries, got {len(rho)}")
    lo, hi = sec.floats("x_lo"), sec.floats("x_hi")
    return AmericanPutSpec(d, sec.float("K", required=True), sec.float("T", required=True),
                           sec.float("r", required=True), vec["delta"], vec["sigma"], rho_v, vec["s0"],
                           x_lo=None if lo is None else np.array(lo),
                           x_hi=None if hi is None else np.array(hi), box_sd=sec.float("box_sd", 4.0))


def _guard(section: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(section, None, str(exc)) from None


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Parse and validate config text; raises :class:`ConfigError` on any bad field."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", None, f"unparsable: {exc}") from None

    for sec in cp.sections():
        if sec not in _ALLOWED:
            raise ConfigError(sec, None, "unknown section")
    for req in ("meta", "problem"):
        if req not in cp:
            raise ConfigError(req, None, "missing required section")
    S = {name: _Section(name, dict(cp[name]) if name in cp else {}) for name in _ALLOWED}

    meta = S["meta"]
    version = meta.int("schema_version", required=True)
    if version != SCHEMA_VERSION:
        raise ConfigError("meta", "schema_version", f"unsupported version {version} (expected {SCHEMA_VERSION})")

    ptype = S["problem"].str("type", required=True)
    if ptype in _PROBLEM_KEYS:
        allowed = dict(_ALLOWED, problem=_PROBLEM_KEYS[ptype])
    elif ptype in PROBLEM_REGISTRY:
        allowed = dict(_ALLOWED, problem=None)
    else:
        raise ConfigError("problem", "type", f"unknown problem type {ptype!r}")
    for sec, keys in allowed.items():
        if keys is None:
            continue
        for k in S[sec].data:
            if k not in keys:
                raise ConfigError(sec, k, "unknown key")

    spec, options, reference = None, {}, None
    if ptype == "dual_investment":
        spec = _guard("problem", lambda: _build_dual(S["problem"]))
        dim = 1
    elif ptype == "american_put":
        spec = _guard("problem", lambda: _build_put(S["problem"]))
        reference = S["problem"].float("reference")
        dim = spec.d
    else:
        options = {k: v for k, v in S["problem"].data.items() if k != "type"}
        problem = _guard("problem", lambda: PROBLEM_REGISTRY[ptype](dict(options)))
        dim = problem.dim

    su = S["surrogate"]
    sd = _defaults(SurrogateConfig)
    surrogate = _guard("surrogate", lambda: SurrogateConfig(
        1 + dim, su.ints("hidden_layers", sd["hidden_layers"]), su.str("activation", sd["activation"]),
        su.int("parameter_seed", sd["parameter_seed"]), su.str("dtype", sd["dtype"]),
        su.bool("allow_unbounded", sd["allow_unbounded"])))

    sa = S["sampling"]
    pd = _defaults(SamplingPlan)
    plan = _guard("sampling", lambda: SamplingPlan(
        **{k: sa.int(k, pd[k]) for k in ("n_interior", "n_initial", "n_lateral", "n_time_pairs",
                                          "n_space_pairs", "seed")},
        measure=sa.str("measure", pd["measure"]), center=sa.floats("center"), scale=sa.floats("scale"),
        eps_t=sa.float("eps_t"), eps_x=sa.float("eps_x"),
        resample_each_step=sa.bool("resample_each_step", pd["resample_each_step"]),
        boundary_measure=sa.str("boundary_measure", pd["boundary_measure"]),
        tangential_seminorm=sa.bool("tangential_seminorm", pd["tangential_seminorm"])))

    we = S["weights"]
    weights = _guard("weights", lambda: LossWeights(
        we.float("interior", 1.0), we.float("initial", 1.0), we.float("lateral_trace", 1.0),
        we.float("lateral_normal", 1.0)))

    tr = S["train"]
    td = _defaults(TrainConfig)
    train = _guard("train", lambda: TrainConfig(
        steps=tr.int("steps", td["steps"]), optimizer=tr.str("optimizer", td["optimizer"]),
        learning_rate=tr.float("learning_rate", td["learning_rate"]),
        final_learning_rate=tr.float("final_learning_rate", td["final_learning_rate"]),
        schedule=tr.str("schedule", td["schedule"]), plan=plan, weights=weights,
        checkpoint_every=tr.int("checkpoint_every", td["checkpoint_every"]),
        seeds=tr.ints("seeds", td["seeds"]), early_stop=tr.float("early_stop"),
        eval_scale=tr.float("eval_scale", td["eval_scale"]),
        lbfgs_steps=tr.int("lbfgs_steps", td["lbfgs_steps"]),
        lbfgs_rounds=tr.int("lbfgs_rounds", td["lbfgs_rounds"]),
        milestones=tr.floats("milestones", td["milestones"])))

    re_ = S["recovery"]
    rd = _defaults(PrimalRecovery)
    y_lo, y_hi = re_.float("y_lo"), re_.float("y_hi")
    if (y_lo is None) != (y_hi is None):
        raise ConfigError("recovery", "y_lo" if y_lo is None else "y_hi", "give both y_lo and y_hi or neither")
    recovery = _guard("recovery", lambda: PrimalRecovery(
        re_.str("method", rd["method"]), re_.int("n_points", rd["n_points"]),
        None if y_lo is None else (y_lo, y_hi), re_.float("tol_bisect", rd["tol_bisect"]),
        scan_points=re_.int("scan_points", rd["scan_points"])))
    rec_t = re_.float("t", 0.0)
    rec_x = re_.floats("x", ())
    if ptype == "dual_investment":
        if not (0.0 <= rec_t <= spec.T):
            raise ConfigError("recovery", "t", f"must lie in [0, {spec.T}]")
        if any(x <= spec.K for x in rec_x):
            raise ConfigError("recovery", "x", f"wealth points must exceed K = {spec.K}")

    be = S["bench"]
    n_steps, n_grid = be.int("n_steps", 2000), be.int("n_grid", 200)
    if n_steps < 1:
        raise ConfigError("bench", "n_steps", "must be at least 1")
    if n_grid < 2:
        raise ConfigError("bench", "n_grid", "must be at least 2")

    out = S["output"].str("dir")
    if out is not None and base_dir is not None and not Path(out).is_absolute():
        out = str(Path(base_dir) / out)

    return ExperimentConfig(meta.str("name", ptype), ptype, spec, options, surrogate, train, recovery,
                            rec_t, rec_x, n_steps, n_grid, out, reference, text)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("file", None, f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def shipped_config_dir() -> Path:
    return Path(__file__).parent / "configs"


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``"invest_power"``."""
    p = shipped_config_dir() / f"{name}.ini"
    if not p.exists():
        avail = sorted(q.stem for q in shipped_config_dir().glob("*.ini"))
        raise FileNotFoundError(f"no shipped config {name!r}; available: {avail}")
    return p
