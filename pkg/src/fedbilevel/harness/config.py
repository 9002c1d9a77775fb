"""Experiment configuration: TOML files with optional sections.

Keys may sit under ``[experiment]``, ``[problem]``, ``[schedule]``,
``[bias_study]`` and ``[compare]``, or at top level, where each is routed to
the one section that knows it.  Every default is filled in on parse, so
``to_toml`` echoes the complete configuration.
"""
from __future__ import annotations

import difflib
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .. import adafbio
from ..adafbio import RULES, ScheduleConfig
from ..problems.base import InvalidArgument


class ConfigError(Exception):
    """Base class for every configuration failure."""


class ConfigNotFound(ConfigError, FileNotFoundError):
    pass


class ConfigSyntaxError(ConfigError):
    pass


class ConfigValueError(ConfigError, ValueError):
    pass


PROBLEM_DEFAULTS = {
    "quadratic": {
        "d": 5, "p": 5, "M": 2, "mu": 0.5, "L_g": 1.0, "sigma": 0.0, "hetero": 0.5, "c_gxy": 1.0,
        "shared_hessians": True, "upper_reg": 0.1, "seed": 0, "batch_size": 1, "attainable": False,
        "radius": None,
    },
    "metalearn": {
        "M": 3, "d": 4, "task_dim": 4, "n_train": 20, "n_test": 20, "noise": 0.1, "seed": 0,
        "coupling": 1.0, "reg": 0.1, "upper_reg": 0.0, "sigma": 0.0, "batch_size": 1,
    },
    "hyperclean": {
        "M": 4, "n_train": 500, "n_val": 200, "n_test": 1000, "dim": 10, "corruption_rate": 0.3,
        "nu": 0.1, "seed": 0, "batch_size": 8, "partition": "iid", "alpha": 1.0, "margin": 4.0,
    },
}
# keys whose value may be an int or a float
_FLOAT_KEYS = {"mu", "L_g", "sigma", "hetero", "c_gxy", "upper_reg", "radius", "noise", "coupling", "reg",
               "corruption_rate", "nu", "alpha", "margin"}
_POSITIVE_INT = {"d", "p", "M", "task_dim", "n_train", "n_val", "n_test", "dim", "batch_size"}

EXPERIMENT_DEFAULTS = {"problem": "quadratic", "rule": "norm_scalar", "root_seed": 0, "out_dir": "runs",
                       "repetitions": 1}
BIAS_DEFAULTS = {"K_values": [1, 2, 4, 8, 16], "num_samples": 10000, "enumerate": False, "client": 0}
COMPARE_DEFAULTS = {"rules": ["norm_scalar", "identity"]}

# schedule keys as written in files; ``lambda`` is ``lam`` in Python
_SCHED_FILE_TO_FIELD = {f.name: f.name for f in fields(ScheduleConfig)}
_SCHED_FILE_TO_FIELD["lambda"] = _SCHED_FILE_TO_FIELD.pop("lam")
_SCHED_FIELD_TO_FILE = {v: k for k, v in _SCHED_FILE_TO_FIELD.items()}
_SCHED_INT = {"q", "T", "K"}

ALIASES = {
    "learning_rate": "gamma", "lr": "gamma", "step_size": "gamma", "upper_lr": "gamma",
    "lower_lr": "lambda", "lam": "lambda", "sync_period": "q", "local_steps": "q",
    "iterations": "T", "num_iterations": "T", "neumann_terms": "K", "neumann_K": "K",
    "clients": "M", "num_clients": "M", "reps": "repetitions", "seed_root": "root_seed",
    "adaptive_rule": "rule", "output_dir": "out_dir", "out": "out_dir",
}


@dataclass
class ExperimentConfig:
    problem: str = "quadratic"
    problem_params: dict = field(default_factory=dict)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    rule: str = "norm_scalar"
    root_seed: int = 0
    out_dir: str = "runs"
    repetitions: int = 1
    bias_study: dict = field(default_factory=lambda: dict(BIAS_DEFAULTS))
    compare: dict = field(default_factory=lambda: dict(COMPARE_DEFAULTS))

    @property
    def num_clients(self) -> int:
        return int(self.problem_params["M"])

    def to_dict(self) -> dict:
        sched = {_SCHED_FIELD_TO_FILE[k]: v for k, v in asdict(self.schedule).items() if v is not None}
        return {
            "experiment": {"problem": self.problem, "rule": self.rule, "root_seed": self.root_seed,
                           "out_dir": self.out_dir, "repetitions": self.repetitions},
            "problem": {k: v for k, v in self.problem_params.items() if v is not None},
            "schedule": sched,
            "bias_study": dict(self.bias_study),
            "compare": dict(self.compare),
        }

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def to_toml(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_toml(cfg))


def parse_config(path) -> ExperimentConfig:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ConfigNotFound(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_string(raw.decode("utf-8"), source=path)


def parse_string(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigSyntaxError(f"{source}: malformed config: {exc}") from None
    return from_dict(doc, source)


def _suggest(key, known):
    if key in ALIASES and ALIASES[key] in known:
        return ALIASES[key]
    close = difflib.get_close_matches(key, list(known), n=1, cutoff=0.75)
    return close[0] if close else None


def _unknown(key, where, known, source):
    hint = _suggest(key, known)
    msg = f"{source}: unknown key {key!r} in {where}"
    if hint:
        msg += f"; did you mean {hint!r}?"
    return ConfigValueError(msg)


def _section_keys(problem):
    return {
        "experiment": set(EXPERIMENT_DEFAULTS),
        "problem": set(PROBLEM_DEFAULTS[problem]),
        "schedule": set(_SCHED_FILE_TO_FIELD),
        "bias_study": set(BIAS_DEFAULTS),
        "compare": set(COMPARE_DEFAULTS),
    }


def from_dict(doc: dict, source: str = "<dict>") -> ExperimentConfig:
    doc = dict(doc)
    sections = {name: dict(doc.pop(name)) if isinstance(doc.get(name), dict) else {}
                for name in ("experiment", "problem", "schedule", "bias_study", "compare")}
    problem = sections["experiment"].get("problem", doc.get("problem", EXPERIMENT_DEFAULTS["problem"]))
    if problem not in PROBLEM_DEFAULTS:
        raise ConfigValueError(f"{source}: problem must be one of {sorted(PROBLEM_DEFAULTS)}, got {problem!r}")
    known = _section_keys(problem)
    for name, keys in known.items():
        for k in sections[name]:
            if k not in keys:
                raise _unknown(k, f"[{name}]", keys, source)
    all_known = set().union(*known.values())
    for k, v in doc.items():
        if isinstance(v, dict):
            raise _unknown(k, "the top level (section names)", set(known), source)
        owners = [n for n, keys in known.items() if k in keys]
        if not owners:
            raise _unknown(k, "the top level", all_known, source)
        if k in sections[owners[0]]:
            raise ConfigValueError(f"{source}: key {k!r} given both at top level and in [{owners[0]}]")
        sections[owners[0]][k] = v

    exp = {**EXPERIMENT_DEFAULTS, **sections["experiment"]}
    for k in ("root_seed", "repetitions"):
        _need_int(exp, k, source, "experiment")
    if exp["repetitions"] < 1:
        raise ConfigValueError(f"{source}: [experiment].repetitions must be >= 1")
    if exp["root_seed"] < 0:
        raise ConfigValueError(f"{source}: [experiment].root_seed must be >= 0")
    if exp["rule"] not in RULES:
        raise ConfigValueError(f"{source}: [experiment].rule must be one of {list(RULES)}, got {exp['rule']!r}")
    if not isinstance(exp["out_dir"], str):
        raise ConfigValueError(f"{source}: [experiment].out_dir must be a string")

    params = _problem_params(problem, sections["problem"], source)
    sched = _schedule(sections["schedule"], source)
    bias = {**BIAS_DEFAULTS, **sections["bias_study"]}
    kv = bias["K_values"]
    if not isinstance(kv, list) or not kv or not all(isinstance(k, int) and not isinstance(k, bool) and k >= 1
                                                     for k in kv):
        raise ConfigValueError(f"{source}: [bias_study].K_values must be a non-empty list of integers >= 1")
    _need_int(bias, "num_samples", source, "bias_study")
    _need_int(bias, "client", source, "bias_study")
    if not isinstance(bias["enumerate"], bool):
        raise ConfigValueError(f"{source}: [bias_study].enumerate must be true or false")
    if not bias["enumerate"] and bias["num_samples"] < 1000:
        raise ConfigValueError(f"{source}: [bias_study].num_samples must be >= 1000")
    cmp_ = {**COMPARE_DEFAULTS, **sections["compare"]}
    rules = cmp_["rules"]
    if not isinstance(rules, list) or len(rules) < 2 or any(r not in RULES for r in rules):
        raise ConfigValueError(f"{source}: [compare].rules must list at least two of {list(RULES)}")

    cfg = ExperimentConfig(problem=problem, problem_params=params, schedule=sched, rule=exp["rule"],
                           root_seed=exp["root_seed"], out_dir=exp["out_dir"],
                           repetitions=exp["repetitions"], bias_study=bias, compare=cmp_)
    validate_schedule(cfg, source)
    return cfg


def _need_int(d, k, source, where):
    v = d[k]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigValueError(f"{source}: [{where}].{k} must be an integer, got {v!r}")


def _problem_params(problem, given, source):
    out = dict(PROBLEM_DEFAULTS[problem])
    for k, v in given.items():
        default = out[k]
        where = f"[problem].{k}"
        if k in _FLOAT_KEYS:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigValueError(f"{source}: {where} must be a finite number, got {v!r}")
            v = float(v)
        elif isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigValueError(f"{source}: {where} must be true or false, got {v!r}")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigValueError(f"{source}: {where} must be an integer, got {v!r}")
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigValueError(f"{source}: {where} must be a string, got {v!r}")
        out[k] = v
    for k in _POSITIVE_INT & set(out):
        if out[k] < 1:
            raise ConfigValueError(f"{source}: [problem].{k} must be >= 1")
    for k in ("mu", "L_g", "nu", "c_gxy"):
        if k in out and out[k] <= 0:
            raise ConfigValueError(f"{source}: [problem].{k} must be positive")
    if problem == "quadratic" and out["mu"] > out["L_g"]:
        raise ConfigValueError(f"{source}: [problem] needs mu <= L_g")
    for k in ("sigma", "hetero", "upper_reg", "noise", "reg"):
        if k in out and out[k] < 0:
            raise ConfigValueError(f"{source}: [problem].{k} must be >= 0")
    if problem == "hyperclean":
        if not 0 <= out["corruption_rate"] <= 1:
            raise ConfigValueError(f"{source}: [problem].corruption_rate must be in [0, 1]")
        if out["partition"] not in ("iid", "sorted_label", "dirichlet"):
            raise ConfigValueError(f"{source}: [problem].partition must be iid, sorted_label or dirichlet")
        if out["M"] > min(out["n_train"], out["n_val"]):
            raise ConfigValueError(f"{source}: [problem].M exceeds the number of train or validation samples")
    return out


def _schedule(given, source):
    kw = {}
    for k, v in given.items():
        name = _SCHED_FILE_TO_FIELD[k]
        where = f"[schedule].{k}"
        if name == "varrho" and v == "track_beta":
            kw[name] = v
            continue
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigValueError(f"{source}: {where} must be a finite number, got {v!r}")
        if name in _SCHED_INT:
            if not isinstance(v, int):
                raise ConfigValueError(f"{source}: {where} must be an integer, got {v!r}")
        else:
            v = float(v)
        kw[name] = v
    return ScheduleConfig(**kw)


def validate_schedule(cfg: ExperimentConfig, source="<config>"):
    """Check the schedule inequalities that do not depend on problem constants."""
    s = cfg.schedule
    probe = replace(s, K=s.K if s.K is not None else 1)
    try:
        probe.resolved(cfg.num_clients)
    except (adafbio.ConfigError, InvalidArgument) as exc:
        raise ConfigValueError(f"{source}: [schedule] violates {exc}") from None
