"""Experiment configuration: schema, defaults, validation and problem construction.

A config is one JSON object. Missing keys take the values printed by
``dpbilevel --print-defaults``; unknown keys are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from .core import BilevelProblem, Dataset, PrivacyBudget, RunConfig, load_manifest
from .inner import DEFAULT_INNER_CONSTANTS
from .outer import DEFAULT_OUTER_CONSTANTS, EXPLICIT_KEYS
from .problems import load_tuning_csv, make_mean_leak, make_quadratic, make_reg_tuning, make_ridge_data

KINDS = ("bilevel_full", "bilevel_minibatch", "reg_tuning", "leak_demo", "scaling_sweep",
         "proposition_check", "diagnostics_sweep")
FAMILIES = ("quadratic", "mean_leak", "reg_tuning")


class ConfigError(ValueError):
    """Invalid configuration. ``path`` names the offending file when there is one."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


FAMILY_DEFAULTS: dict[str, dict] = {
    "quadratic": {"d_x": 10, "d_y": 10, "A": None, "A_norm": 0.5, "A_seed": 0, "n": 1000, "seed": 0,
                  "r_a": 1.0, "r_b": 1.0, "r_c": 1.0, "R_x": 1.0},
    "mean_leak": {"points": [[1.0, 0.0], [3.0, 0.0]], "R_x": 1.0, "record_radius": None,
                  "lower_scale": "sum"},
    "reg_tuning": {"n": 4_000_000, "p": 1, "val_fraction": 0.75, "noise": 0.1, "val_shrink": 0.5, "seed": 0,
                   "features": "sign", "regularizer": "ridge", "theta_radius": 1.5, "omega_max": 1.0,
                   "eps_reg": 0.0, "smoothing": 1e-2, "feature_bound": None, "label_bound": None,
                   "label": "label", "split": None},
}

KIND_DEFAULTS: dict[str, dict] = {
    "bilevel_full": {"x0": None},
    "bilevel_minibatch": {"x0": None},
    "reg_tuning": {"lam": 4.0, "eta": 2.0, "T": 30, "omega0": 0.0, "noiseless": False, "clip": 2.0},
    "leak_demo": {"x": None},
    "scaling_sweep": {"ns": [1024, 2048, 4096, 8192, 16384], "seeds": 20, "dim": 10, "eps_prime": 1.0,
                      "delta_prime": 1e-2, "data_seed": 0},
    "proposition_check": {"alpha": 0.5, "seeds": 20, "dim": 20, "gamma": 0.1, "bias_fraction": 0.125,
                          "noise_fraction": 0.125},
    "diagnostics_sweep": {"x": None, "lambdas": [10.0, 31.6227766, 100.0, 316.227766, 1000.0, 3162.27766,
                                                 10000.0]},
}

KIND_FAMILY = {"leak_demo": "mean_leak", "reg_tuning": "reg_tuning"}

DEFAULTS: dict[str, Any] = {
    "kind": "bilevel_full",
    "problem": {"family": "quadratic", "params": {}, "constants": {}},
    "dataset": None,
    "run": {"seed": 0, "gamma": 0.1, "alpha_target": None, "b_in": None, "b_out": None, "clip": None},
    "budget": {"epsilon": 1.0, "delta": 1e-6},
    "outer_overrides": {},
    "inner_overrides": {},
    "out_dir": None,
    "settings": {},
}

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_opt_int = {"type": ["integer", "null"], "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": list(FAMILIES)},
                "manifest": {"type": "string"},
                "params": {"type": "object"},
                "constants": {"type": "object", "additionalProperties": _num},
            },
        },
        "dataset": {"type": ["string", "null"]},
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "alpha_target": _opt_num, "b_in": _opt_int, "b_out": _opt_int, "clip": _opt_num,
            },
        },
        "budget": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epsilon": {"type": "number", "exclusiveMinimum": 0},
                           "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        },
        "outer_overrides": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _opt_num for k in list(DEFAULT_OUTER_CONSTANTS) + list(EXPLICIT_KEYS)},
        },
        "inner_overrides": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _opt_num for k in DEFAULT_INNER_CONSTANTS},
        },
        "out_dir": {"type": ["string", "null"]},
        "settings": {"type": "object"},
    },
}


@dataclass
class ExperimentConfig:
    kind: str
    family: str
    params: dict
    constants: dict
    dataset: Optional[str]
    run: RunConfig
    budget: PrivacyBudget
    outer_overrides: dict
    inner_overrides: dict
    out_dir: Optional[str]
    settings: dict
    source: Optional[str] = None

    def resolved(self) -> dict:
        """Every parameter after defaults, in config form."""
        run = dataclasses.asdict(self.run)
        run.pop("overrides")
        return {
            "kind": self.kind,
            "problem": {"family": self.family, "params": self.params, "constants": self.constants},
            "dataset": self.dataset,
            "run": run,
            "budget": {"epsilon": self.budget.epsilon, "delta": self.budget.delta},
            "outer_overrides": self.outer_overrides,
            "inner_overrides": self.inner_overrides,
            "out_dir": self.out_dir,
            "settings": self.settings,
        }


def defaults(kind: Optional[str] = None) -> dict:
    """The default config, with the settings and problem parameters of ``kind`` filled in."""
    d = copy.deepcopy(DEFAULTS)
    if kind is None:
        d["settings_by_kind"] = copy.deepcopy(KIND_DEFAULTS)
        d["params_by_family"] = copy.deepcopy(FAMILY_DEFAULTS)
        return d
    d["kind"] = kind
    fam = KIND_FAMILY.get(kind, "quadratic")
    d["problem"]["family"] = fam
    d["problem"]["params"] = copy.deepcopy(FAMILY_DEFAULTS[fam])
    d["settings"] = copy.deepcopy(KIND_DEFAULTS[kind])
    return d


def _merge_known(defaults_: dict, given: dict, where: str) -> dict:
    unknown = set(given) - set(defaults_)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}; allowed: {sorted(defaults_)}")
    out = copy.deepcopy(defaults_)
    out.update(given)
    return out


def validate(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Check ``raw`` against the schema and resolve defaults and file references."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {exc.message}") from None
    base_dir = base_dir or Path.cwd()

    def resolve_path(p):
        q = Path(p)
        q = q if q.is_absolute() else base_dir / q
        if not q.exists():
            raise ConfigError(f"file not found: {q}", path=str(q))
        return str(q)

    kind = raw["kind"]
    prob = dict(raw.get("problem", {}))
    if "manifest" in prob:
        mpath = resolve_path(prob.pop("manifest"))
        try:
            manifest = load_manifest(mpath)
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad manifest {mpath}: {exc}", path=mpath) from None
        if manifest["family"] not in FAMILIES:
            raise ConfigError(f"manifest family {manifest['family']!r} unknown", path=mpath)
        merged = {"family": manifest["family"], "params": manifest.get("params", {}),
                  "constants": manifest.get("constants", {})}
        merged["params"] = {**merged["params"], **prob.get("params", {})}
        merged["constants"] = {**merged["constants"], **prob.get("constants", {})}
        prob = merged
    family = prob.get("family", KIND_FAMILY.get(kind, "quadratic"))
    need = KIND_FAMILY.get(kind)
    if need is not None and family != need:
        raise ConfigError(f"kind {kind!r} needs problem family {need!r}, got {family!r}")
    params = _merge_known(FAMILY_DEFAULTS[family], prob.get("params", {}), f"{family} problem")
    constants = dict(prob.get("constants", {}))
    bad = set(constants) - {"L0f", "L1f", "L0g", "L1g", "L2g", "mu_g", "Delta_F"}
    if bad:
        raise ConfigError(f"unknown constants: {sorted(bad)}")
    settings = _merge_known(KIND_DEFAULTS[kind], raw.get("settings", {}), f"{kind} settings")
    run_d = {**DEFAULTS["run"], **raw.get("run", {})}
    budget_d = {**DEFAULTS["budget"], **raw.get("budget", {})}
    outer = dict(raw.get("outer_overrides", {}))
    inner = dict(raw.get("inner_overrides", {}))
    try:
        run = RunConfig(overrides={**outer, **inner}, **run_d)
        budget = PrivacyBudget(**budget_d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if kind == "bilevel_minibatch" and run.b_out is None:
        raise ConfigError("bilevel_minibatch needs run.b_out")
    if kind == "bilevel_full" and run.b_out is not None:
        raise ConfigError("bilevel_full takes no run.b_out; use bilevel_minibatch")
    dataset = raw.get("dataset")
    if dataset is not None:
        dataset = resolve_path(dataset)
    return ExperimentConfig(kind, family, params, constants, dataset, run, budget, outer, inner,
                            raw.get("out_dir"), settings)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", path=str(path))
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})", path=str(path)) from None
    cfg = validate(raw, path.parent)
    cfg.source = str(path)
    return cfg


def _coupling(params: dict) -> np.ndarray:
    if params["A"] is not None:
        A = np.asarray(params["A"], float)
        if A.shape != (params["d_y"], params["d_x"]):
            raise ConfigError(f"A has shape {A.shape}, expected ({params['d_y']}, {params['d_x']})")
        return A
    rng = np.random.default_rng(params["A_seed"])
    A = rng.standard_normal((params["d_y"], params["d_x"]))
    nrm = np.linalg.norm(A, 2)
    return A * (params["A_norm"] / nrm) if nrm > 0 else A


def build_problem(cfg: ExperimentConfig) -> tuple[BilevelProblem, Dataset]:
    """Problem and dataset described by the config, with any constant overrides applied."""
    p = cfg.params
    data = Dataset.from_csv(cfg.dataset) if cfg.dataset and cfg.family != "reg_tuning" else None
    if cfg.family == "quadratic":
        problem, data = make_quadratic(_coupling(p), n=p["n"], seed=p["seed"], r_a=p["r_a"], r_b=p["r_b"],
                                       r_c=p["r_c"], R_x=p["R_x"], dataset=data)
    elif cfg.family == "mean_leak":
        if data is None:
            data = Dataset(np.asarray(p["points"], float))
        problem = make_mean_leak(data, R_x=p["R_x"], record_radius=p["record_radius"], lower_scale=p["lower_scale"])
    else:
        if cfg.dataset:
            data = load_tuning_csv(cfg.dataset, p["label"], p["split"], p["val_fraction"], p["seed"])
        else:
            data = make_ridge_data(p["n"], p["p"], p["val_fraction"], p["noise"], p["val_shrink"], p["seed"],
                                   p["features"])
        problem = make_reg_tuning(data, p["regularizer"], p["theta_radius"], p["omega_max"], p["eps_reg"],
                                  p["smoothing"], p["feature_bound"], p["label_bound"])
    if cfg.constants:
        problem = dataclasses.replace(problem, constants=dataclasses.replace(problem.constants, **cfg.constants))
    return problem, data
