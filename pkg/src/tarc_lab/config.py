"""Experiment configuration: YAML parsing, validation, canonical form and builders.

A config file has six sections::

    plant:       model, params, uncertainty_scale, disturbance, noise_std, seed
    controller:  strategy, K1, K2 (required), h_lag, Lambda, m, sigma_win, alpha, ...
    stability:   beta, xi, D, Q, L, require_feasible
    sim:         dt, duration, record_every, q0, qdot0, warmup_steps, tau_jump_max
    reference:   kind, offset, amplitude, frequency, coeffs
    output:      dir, trace, metrics, compare, sweep, formats

Matrix-valued entries accept a scalar (times identity), a list (diagonal)
or a nested list. Unknown keys are rejected and every error names the
dotted key, plus the line number when the value came from a file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import yaml

from .controllers import STRATEGIES, AsmcConfig, ControllerConfig
from .errors import ConfigError, TarcLabError, UnknownKey
from .estimator import build_weights
from .plants import (
    Disturbance,
    PlantModel,
    PointMassParams,
    ReferenceTrajectory,
    TwoLinkParams,
    WmrParams,
    point_mass,
    two_link_manipulator,
    wmr_dynamic,
)
from .simulator import STRATEGY_LABELS, SimConfig
from .stability import GainSet, StabilityCertificate, StabilityParams, build_error_matrices, certify

log = logging.getLogger(__name__)

PLANT_MODELS = {
    "two_link": (TwoLinkParams, two_link_manipulator),
    "wmr": (WmrParams, wmr_dynamic),
    "point_mass": (PointMassParams, point_mass),
}
PLANT_DOF = {"two_link": 2, "wmr": 2}
REQUIRED = object()

# Section schemas: key -> (kind, default). Kinds drive coercion and the
# canonical form; REQUIRED marks keys without a default.
SCHEMA: dict[str, dict[str, tuple]] = {
    "plant": {
        "model": ("str", "two_link"),
        "params": ("params", {}),
        "uncertainty_scale": ("float", 0.0),
        "disturbance": ("section:disturbance", None),
        "noise_std": ("float", 0.0),
        "seed": ("int", 0),
    },
    "disturbance": {
        "kind": ("str", "none"),
        "amplitude": ("vector", [0.0]),
        "frequency": ("float", 1.0),
        "t_step": ("float", 0.0),
        "components": ("int", 8),
        "seed": ("int", 0),
    },
    "controller": {
        "strategy": ("str", "TARC"),
        "K1": ("matrix", REQUIRED),
        "K2": ("matrix", REQUIRED),
        "h_lag": ("int", 1),
        "Lambda": ("int", 2),
        "m": ("int", 20),
        "sigma_win": ("float?", None),
        "alpha": ("float", 2.0),
        "alpha_down": ("float?", None),
        "gamma": ("float", 0.01),
        "epsilon": ("float", 0.05),
        "c_hat0": ("float?", None),
        "mhat_scale": ("float", 1.0),
        "velocity_source": ("str", "true"),
        "nhat": ("str", "delayed"),
        "asmc": ("section:asmc", None),
    },
    "asmc": {
        "c_bar": ("float", 10.0),
        "rho_mode": ("str", "fixed"),
        "rho": ("float", 0.05),
        "lambda_s": ("matrix?", None),
    },
    "stability": {
        "beta": ("float", 1.0),
        "xi": ("float", 2.0),
        "D": ("matrix", 1.0),
        "Q": ("matrix", 1.0),
        "L": ("matrix", 0.1),
        "require_feasible": ("bool", False),
    },
    "sim": {
        "dt": ("float", 1e-3),
        "duration": ("float", 5.0),
        "record_every": ("int", 1),
        "q0": ("vector?", None),
        "qdot0": ("vector?", None),
        "warmup_steps": ("int?", None),
        "tau_jump_max": ("float", 1e3),
    },
    "reference": {
        "kind": ("str", "constant"),
        "offset": ("vector", [0.0]),
        "amplitude": ("vector", [0.0]),
        "frequency": ("vector", [0.0]),
        "coeffs": ("matrix?", None),
    },
    "output": {
        "dir": ("str", "out"),
        "trace": ("str", "trace.csv"),
        "metrics": ("str", "metrics.csv"),
        "compare": ("str", "compare.csv"),
        "sweep": ("str", "sweep.csv"),
        "formats": ("strlist", ["csv"]),
    },
}
TOP_SECTIONS = ("plant", "controller", "stability", "sim", "reference", "output")


# --- YAML with key line numbers -------------------------------------------------------


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``1e-3``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"),
)


def _key_lines(text: str) -> dict[str, int]:
    lines: dict[str, int] = {}
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, "")
    return lines


# --- coercion ------------------------------------------------------------------------


class _Ctx:
    def __init__(self, lines: Optional[dict] = None):
        self.lines = lines or {}

    def error(self, key: str, msg: str, cls=ConfigError):
        return cls(key, msg, line=self.lines.get(key))


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _coerce(kind: str, value, key: str, ctx: _Ctx):
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ctx.error(key, "must not be null")
    if base == "float":
        if not _is_number(value) or not math.isfinite(float(value)):
            raise ctx.error(key, f"must be a finite number, got {value!r}")
        return float(value)
    if base == "int":
        if isinstance(value, bool) or not _is_number(value) or float(value) != int(value):
            raise ctx.error(key, f"must be an integer, got {value!r}")
        return int(value)
    if base == "bool":
        if not isinstance(value, bool):
            raise ctx.error(key, f"must be true or false, got {value!r}")
        return value
    if base == "str":
        if isinstance(value, bool):
            # unquoted true/false in YAML
            value = "true" if value else "false"
        if not isinstance(value, str):
            raise ctx.error(key, f"must be a string, got {value!r}")
        return value
    if base == "strlist":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ctx.error(key, "must be a list of strings")
        return list(value)
    if base == "vector":
        vals = value if isinstance(value, list) else [value]
        if not vals or not all(_is_number(v) and math.isfinite(float(v)) for v in vals):
            raise ctx.error(key, f"must be a number or a list of numbers, got {value!r}")
        return [float(v) for v in vals]
    if base == "matrix":
        if _is_number(value):
            return float(value)
        if isinstance(value, list) and value and all(_is_number(v) for v in value):
            return [float(v) for v in value]
        if (isinstance(value, list) and value and all(isinstance(r, list) and r for r in value)
                and all(_is_number(v) for r in value for v in r)):
            if len({len(r) for r in value}) != 1:
                raise ctx.error(key, "matrix rows must have equal length")
            return [[float(v) for v in r] for r in value]
        raise ctx.error(key, f"must be a scalar, a list or a nested list of numbers, got {value!r}")
    if base == "params":
        if not isinstance(value, dict):
            raise ctx.error(key, "must be a mapping of parameter names to numbers")
        out = {}
        for k, v in value.items():
            out[str(k)] = _coerce("float", v, f"{key}.{k}", ctx)
        return out
    raise AssertionError(kind)


def _parse_section(name: str, data, path: str, ctx: _Ctx) -> dict:
    schema = SCHEMA[name]
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ctx.error(path, "must be a mapping")
    for k in data:
        if k not in schema:
            raise ctx.error(f"{path}.{k}", f"unknown key; expected one of {sorted(schema)}", UnknownKey)
    out = {}
    for k, (kind, default) in schema.items():
        key = f"{path}.{k}"
        if kind.startswith("section:"):
            out[k] = _parse_section(kind.split(":", 1)[1], data.get(k), key, ctx)
            continue
        if k not in data:
            if default is REQUIRED:
                raise ctx.error(key, "is required and has no default")
            out[k] = copy.deepcopy(default)
            continue
        out[k] = _coerce(kind, data[k], key, ctx)
    return out


# --- the config object ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated, fully resolved experiment settings (plain Python values)."""

    data: dict

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and canonical_json(self) == canonical_json(other)

    def __hash__(self):
        return hash(canonical_json(self))

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    @property
    def n(self) -> int:
        p = self.data["plant"]
        if p["model"] == "point_mass":
            return int(p["params"].get("dof", 1))
        return PLANT_DOF[p["model"]]

    @property
    def config_hash(self) -> str:
        return config_hash(self)

    def get(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise UnknownKey(dotted, "no such config key")
            node = node[part]
        return node

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with one key replaced; the result is re-validated."""
        self.get(dotted)
        data = copy.deepcopy(self.data)
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
        return from_dict(data)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.with_value("plant.seed", int(seed))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def from_dict(data: Any, lines: Optional[dict] = None) -> ExperimentConfig:
    ctx = _Ctx(lines)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping of sections")
    for k in data:
        if k not in TOP_SECTIONS:
            raise ctx.error(str(k), f"unknown section; expected one of {list(TOP_SECTIONS)}", UnknownKey)
    if "controller" not in data:
        raise ctx.error("controller", "section is required (K1 and K2 have no defaults)")
    resolved = {s: _parse_section(s, data.get(s), s, ctx) for s in TOP_SECTIONS}
    cfg = ExperimentConfig(resolved)
    validate(cfg, ctx)
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<yaml>", f"malformed YAML: {exc}", line=mark.line + 1 if mark else None) from None
    return from_dict(data, _key_lines(text))


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: ExperimentConfig) -> str:
    """Canonical YAML: every key present, sorted, defaults resolved."""
    return yaml.safe_dump(cfg.data, sort_keys=True, default_flow_style=None)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


# --- validation -----------------------------------------------------------------------


def _matrix(value, n: int, key: str, ctx: _Ctx) -> np.ndarray:
    if isinstance(value, float):
        return value * np.eye(n)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        if arr.size != n:
            raise ctx.error(key, f"diagonal must have {n} entries, got {arr.size}")
        return np.diag(arr)
    if arr.shape != (n, n):
        raise ctx.error(key, f"must be {n}x{n}, got {arr.shape[0]}x{arr.shape[1]}")
    return arr


def _vector(value, n: int, key: str, ctx: _Ctx) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.size == 1:
        return np.full(n, float(arr[0]))
    if arr.size != n:
        raise ctx.error(key, f"must have 1 or {n} entries, got {arr.size}")
    return arr


def _spd(M: np.ndarray, key: str, ctx: _Ctx) -> None:
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise ctx.error(key, "must be symmetric")
    if np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= 0:
        raise ctx.error(key, "must be positive definite")


def validate(cfg: ExperimentConfig, ctx: Optional[_Ctx] = None) -> None:
    """Check every cross-field constraint; raises ConfigError naming the key."""
    ctx = ctx or _Ctx()
    p, c, st, sim, ref = (cfg[s] for s in ("plant", "controller", "stability", "sim", "reference"))
    if p["model"] not in PLANT_MODELS:
        raise ctx.error("plant.model", f"must be one of {sorted(PLANT_MODELS)}, got {p['model']!r}")
    pcls = PLANT_MODELS[p["model"]][0]
    allowed = set(pcls.__dataclass_fields__)
    for k in p["params"]:
        if k not in allowed:
            raise ctx.error(f"plant.params.{k}", f"unknown parameter; expected one of {sorted(allowed)}", UnknownKey)
    dof = p["params"].get("dof", 1)
    if p["model"] == "point_mass" and (dof != int(dof) or dof < 1):
        raise ctx.error("plant.params.dof", "must be an integer >= 1")
    n = cfg.n
    if p["uncertainty_scale"] < 0 or p["uncertainty_scale"] >= 1:
        raise ctx.error("plant.uncertainty_scale", "must lie in [0, 1)")
    if p["noise_std"] < 0:
        raise ctx.error("plant.noise_std", "must be >= 0")
    d = p["disturbance"]
    if d["kind"] not in Disturbance.KINDS:
        raise ctx.error("plant.disturbance.kind", f"must be one of {list(Disturbance.KINDS)}")
    _vector(d["amplitude"], n, "plant.disturbance.amplitude", ctx)
    if d["frequency"] < 0:
        raise ctx.error("plant.disturbance.frequency", "must be >= 0")
    if d["components"] < 1:
        raise ctx.error("plant.disturbance.components", "must be >= 1")

    if c["strategy"] not in STRATEGY_LABELS:
        raise ctx.error("controller.strategy", f"must be one of {sorted(STRATEGY_LABELS)}, got {c['strategy']!r}")
    for key in ("K1", "K2"):
        _spd(_matrix(c[key], n, f"controller.{key}", ctx), f"controller.{key}", ctx)
    if c["h_lag"] < 1:
        raise ctx.error("controller.h_lag", "must be an integer >= 1")
    if c["Lambda"] < 2 and STRATEGY_LABELS[c["strategy"]][0] in ("FTDC", "TARC"):
        raise ctx.error("controller.Lambda", "filtered laws estimate acceleration and need Lambda >= 2")
    if not 0 <= c["Lambda"] <= 8:
        raise ctx.error("controller.Lambda", "must lie in 0..8")
    if c["m"] < 2 or c["m"] % 2:
        raise ctx.error("controller.m", "must be an even integer >= 2 (composite Simpson)")
    if c["sigma_win"] is not None and not math.isclose(c["sigma_win"], c["m"] * sim["dt"], rel_tol=1e-9):
        raise ctx.error("controller.sigma_win", f"must equal m*dt = {c['m'] * sim['dt']:g}")
    if not c["alpha"] > 1:
        raise ctx.error("controller.alpha", "must be > 1")
    if c["alpha_down"] is not None and not c["alpha_down"] > 1:
        raise ctx.error("controller.alpha_down", "must be > 1")
    for key in ("gamma", "epsilon", "mhat_scale"):
        if not c[key] > 0:
            raise ctx.error(f"controller.{key}", "must be > 0")
    if c["c_hat0"] is not None and c["c_hat0"] < 0:
        raise ctx.error("controller.c_hat0", "must be >= 0")
    if c["velocity_source"] not in ("true", "fd"):
        raise ctx.error("controller.velocity_source", "must be 'true' or 'fd'")
    if c["nhat"] not in ("delayed", "model"):
        raise ctx.error("controller.nhat", "must be 'delayed' or 'model'")
    a = c["asmc"]
    if not a["c_bar"] > 0:
        raise ctx.error("controller.asmc.c_bar", "must be > 0")
    if a["rho_mode"] not in ("fixed", "scaled"):
        raise ctx.error("controller.asmc.rho_mode", "must be 'fixed' or 'scaled'")
    if not a["rho"] > 0:
        raise ctx.error("controller.asmc.rho", "must be > 0")
    if a["lambda_s"] is not None:
        _matrix(a["lambda_s"], n, "controller.asmc.lambda_s", ctx)

    if not st["beta"] > 0:
        raise ctx.error("stability.beta", "must be > 0")
    if not st["xi"] > 1:
        raise ctx.error("stability.xi", "must be > 1")
    for key in ("D", "Q", "L"):
        _spd(_matrix(st[key], 2 * n, f"stability.{key}", ctx), f"stability.{key}", ctx)

    if not sim["dt"] > 0:
        raise ctx.error("sim.dt", "must be > 0")
    if sim["duration"] < 10 * c["h_lag"] * sim["dt"]:
        raise ctx.error("sim.duration", "must be at least 10 delays (10 * h_lag * dt)")
    if sim["record_every"] < 1:
        raise ctx.error("sim.record_every", "must be >= 1")
    for key in ("q0", "qdot0"):
        if sim[key] is not None:
            _vector(sim[key], n, f"sim.{key}", ctx)
    if sim["warmup_steps"] is not None and sim["warmup_steps"] < 0:
        raise ctx.error("sim.warmup_steps", "must be >= 0")
    if not sim["tau_jump_max"] > 0:
        raise ctx.error("sim.tau_jump_max", "must be > 0")

    if ref["kind"] not in ("constant", "sinusoid", "polynomial"):
        raise ctx.error("reference.kind", "must be 'constant', 'sinusoid' or 'polynomial'")
    for key in ("offset", "amplitude", "frequency"):
        _vector(ref[key], n, f"reference.{key}", ctx)
    if ref["kind"] == "polynomial":
        coeffs = ref["coeffs"]
        if coeffs is None or not isinstance(coeffs, list) or not all(isinstance(r, list) for r in coeffs):
            raise ctx.error("reference.coeffs", "polynomial reference needs a nested list, one row per power")
        if any(len(r) != n for r in coeffs):
            raise ctx.error("reference.coeffs", f"each row must have {n} entries")
    for fmt in cfg["output"]["formats"]:
        if fmt != "csv":
            raise ctx.error("output.formats", f"unsupported format {fmt!r}; only 'csv' is written")


# --- builders -------------------------------------------------------------------------


def build_plant(cfg: ExperimentConfig) -> PlantModel:
    p = cfg["plant"]
    pcls, factory = PLANT_MODELS[p["model"]]
    d = p["disturbance"]
    dist = Disturbance(kind=d["kind"], amplitude=tuple(d["amplitude"]), frequency=d["frequency"],
                       t_step=d["t_step"], components=d["components"], seed=d["seed"])
    try:
        kw = dict(p["params"])
        if "dof" in kw:
            kw["dof"] = int(kw["dof"])
        params = pcls(**kw)
        return factory(params, uncertainty_scale=p["uncertainty_scale"], disturbance=dist,
                       noise_std=p["noise_std"], seed=p["seed"])
    except TarcLabError as exc:
        raise ConfigError("plant.params", str(exc)) from None


def build_gains(cfg: ExperimentConfig) -> GainSet:
    c, n, ctx = cfg["controller"], cfg.n, _Ctx()
    return build_error_matrices(_matrix(c["K1"], n, "controller.K1", ctx), _matrix(c["K2"], n, "controller.K2", ctx))


def build_stability_params(cfg: ExperimentConfig) -> StabilityParams:
    st, c, dt = cfg["stability"], cfg["controller"], cfg["sim"]["dt"]
    k, ctx = 2 * cfg.n, _Ctx()
    return StabilityParams(beta=st["beta"], xi=st["xi"], D=_matrix(st["D"], k, "stability.D", ctx),
                           Q=_matrix(st["Q"], k, "stability.Q", ctx), L=_matrix(st["L"], k, "stability.L", ctx),
                           h=c["h_lag"] * dt, sigma_win=c["m"] * dt)


def certificate_kind(cfg: ExperimentConfig) -> str:
    """Filtered laws are certified with Theta, the others with Psi."""
    return "FTDC" if STRATEGY_LABELS[cfg["controller"]["strategy"]][0] in ("FTDC", "TARC") else "TDC"


def build_kernel(cfg: ExperimentConfig):
    c = cfg["controller"]
    return build_weights(c["Lambda"], 1, c["m"] * cfg["sim"]["dt"], c["m"])


def build_certificate(cfg: ExperimentConfig, kind: Optional[str] = None) -> StabilityCertificate:
    kind = kind or certificate_kind(cfg)
    kernel = build_kernel(cfg) if kind == "FTDC" else None
    return certify(build_gains(cfg), build_stability_params(cfg), kind, kernel)


def build_controller(cfg: ExperimentConfig, plant: PlantModel, P: Optional[np.ndarray] = None,
                     label: Optional[str] = None) -> ControllerConfig:
    """Controller settings for ``label`` (defaults to ``controller.strategy``)."""
    c, ctx = cfg["controller"], _Ctx()
    label = label or c["strategy"]
    if label not in STRATEGY_LABELS:
        raise ConfigError("controller.strategy", f"unknown strategy {label!r}; expected one of {sorted(STRATEGY_LABELS)}")
    strategy, vel = STRATEGY_LABELS[label]
    if c["velocity_source"] == "fd":
        vel = "fd"
    a = c["asmc"]
    lam = None if a["lambda_s"] is None else _matrix(a["lambda_s"], cfg.n, "controller.asmc.lambda_s", ctx)
    if P is None:
        P = build_certificate(cfg, kind="TDC").P
    assert strategy in STRATEGIES
    return ControllerConfig(
        strategy=strategy, gains=build_gains(cfg), m_hat=plant.M_hat, dt=cfg["sim"]["dt"],
        h_lag=c["h_lag"], Lambda=c["Lambda"], m=c["m"], P=P, alpha=c["alpha"], alpha_down=c["alpha_down"],
        gamma_floor=c["gamma"], epsilon=c["epsilon"], c_hat0=c["c_hat0"], mhat_scale=c["mhat_scale"],
        asmc=AsmcConfig(c_bar=a["c_bar"], rho_mode=a["rho_mode"], rho=a["rho"], lambda_s=lam),
        velocity_source=vel, nhat=c["nhat"], n_hat_model=plant.N_hat_model,
    )


def build_reference(cfg: ExperimentConfig) -> ReferenceTrajectory:
    r, n, ctx = cfg["reference"], cfg.n, _Ctx()
    off = _vector(r["offset"], n, "reference.offset", ctx)
    if r["kind"] == "constant":
        return ReferenceTrajectory.constant(off)
    if r["kind"] == "sinusoid":
        return ReferenceTrajectory.sinusoid(off, _vector(r["amplitude"], n, "reference.amplitude", ctx),
                                            _vector(r["frequency"], n, "reference.frequency", ctx))
    return ReferenceTrajectory.polynomial(r["coeffs"])


def build_sim(cfg: ExperimentConfig) -> SimConfig:
    s, c, n, ctx = cfg["sim"], cfg["controller"], cfg.n, _Ctx()
    q0 = None if s["q0"] is None else tuple(_vector(s["q0"], n, "sim.q0", ctx))
    qdot0 = None if s["qdot0"] is None else tuple(_vector(s["qdot0"], n, "sim.qdot0", ctx))
    return SimConfig(dt=s["dt"], duration=s["duration"], h_lag=c["h_lag"], seed=cfg["plant"]["seed"],
                     record_every=s["record_every"], q0=q0, qdot0=qdot0, warmup_steps=s["warmup_steps"],
                     tau_jump_max=s["tau_jump_max"])
