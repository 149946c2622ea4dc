"""Run configuration: TOML loading, defaults and cross-field validation."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adapt import AdaptConfig
from .integrate import NewtonConfig, QuadratureRule
from .model import build_nls1d, build_swe2d, shift_model

__all__ = ["ConfigError", "RunConfig", "load_config", "DEFAULTS", "MODES"]

MODES = ("fom", "rom", "hrom", "hrom-adaptive")

DEFAULTS = {
    "problem": {"name": "nls1d"},
    "time": {"T": 6.0, "dt": 0.01, "scheme": "avf", "newton_tol": 1e-10, "newton_max_iter": 30,
             "quadrature_points": 3, "jacobian": "analytic"},
    "reduction": {"k": 40, "basis": "complex-svd", "snapshot_stride": 1, "training_points": [11]},
    "deim": {"m": [30], "snapshot_stride": 20, "energy_tol": None, "store_mj": False},
    "adapt": {"delta0": 5, "delta": 5, "w": 1, "gamma": 5, "rank": None, "rank_tol": 1e-12,
              "m_s": None, "sample_tol": 1e-10, "sampling": "projection", "init": "warmup"},
    "run": {"mode": "hrom", "test_params": [[1.0932]], "out": "runs/default", "seed": 0, "threads": 1},
}


class ConfigError(ValueError):
    pass


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    """Validated view of a configuration mapping."""

    raw: dict

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        try:
            self.validate()
        except ConfigError:
            raise
        except (TypeError, KeyError, AttributeError, ValueError) as exc:
            raise ConfigError(f"malformed config: {exc!r}") from exc

    def __getitem__(self, section):
        return self.raw[section]

    @property
    def problem(self):
        return self.raw["problem"]

    @property
    def dt(self):
        return float(self.raw["time"]["dt"])

    @property
    def n_steps(self):
        return int(round(float(self.raw["time"]["T"]) / self.dt))

    @property
    def scheme(self):
        return self.raw["time"]["scheme"].lower()

    @property
    def newton(self):
        t = self.raw["time"]
        return NewtonConfig(float(t["newton_tol"]), int(t["newton_max_iter"]), t["jacobian"])

    @property
    def quadrature(self):
        return QuadratureRule.gauss_legendre(int(self.raw["time"]["quadrature_points"]))

    @property
    def m_values(self):
        m = self.raw["deim"]["m"]
        return [int(v) for v in (m if isinstance(m, list) else [m])]

    @property
    def mode(self):
        return self.raw["run"]["mode"]

    @property
    def out(self):
        return Path(self.raw["run"]["out"])

    @property
    def test_params(self):
        return [np.atleast_1d(np.asarray(p, dtype=float)) for p in self.raw["run"]["test_params"]]

    def adapt_config(self, m):
        a = self.raw["adapt"]
        return AdaptConfig(
            m=int(m), delta0=int(a["delta0"]), delta=int(a["delta"]), w=int(a["w"]), gamma=int(a["gamma"]),
            rank=a["rank"], rank_tol=a["rank_tol"], m_s=a["m_s"], sample_tol=a["sample_tol"],
            sampling=a["sampling"], init=a["init"],
        )

    def build_model(self):
        """Full model after the initial-condition shift."""
        name = self.problem["name"]
        builder = {"swe2d": build_swe2d, "nls1d": build_nls1d}[name]
        return shift_model(builder(self.problem))

    def training_params(self):
        """Tensor grid of equispaced points in the parameter box, or an explicit list."""
        red = self.raw["reduction"]
        if "training_params" in red:
            return [np.atleast_1d(np.asarray(p, dtype=float)) for p in red["training_params"]]
        box = self.param_box()
        pts = red["training_points"]
        axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(box, pts)]
        grid = np.meshgrid(*axes, indexing="ij")
        return [np.array(p) for p in np.stack([g.ravel() for g in grid], axis=1)]

    def param_box(self):
        box = self.problem.get("param_box")
        if box is None:
            box = [[1.1, 1.7], [0.7, 1.3]] if self.problem["name"] == "swe2d" else [[0.9, 1.1]]
        return [tuple(map(float, b)) for b in box]

    def validate(self):
        r = self.raw
        errs = []
        name = r["problem"].get("name")
        if name not in ("swe2d", "nls1d"):
            errs.append(f"problem.name must be 'swe2d' or 'nls1d', got {name!r}")
        t = r["time"]
        if not float(t["dt"]) > 0:
            errs.append("time.dt must be positive")
        if not float(t["T"]) >= 0:
            errs.append("time.T must be non-negative")
        elif float(t["dt"]) > 0:
            ratio = float(t["T"]) / float(t["dt"])
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                errs.append("time.T / time.dt must be an integer number of steps")
        if t["scheme"].lower() not in ("avf", "imr"):
            errs.append("time.scheme must be 'avf' or 'imr'")
        if not float(t["newton_tol"]) > 0:
            errs.append("time.newton_tol must be positive")
        if int(t["quadrature_points"]) < 1:
            errs.append("time.quadrature_points must be >= 1")
        red = r["reduction"]
        if int(red["k"]) < 1:
            errs.append("reduction.k must be >= 1")
        if red["basis"] not in ("complex-svd", "cotangent-lift"):
            errs.append("reduction.basis must be 'complex-svd' or 'cotangent-lift'")
        if int(red["snapshot_stride"]) < 1 or int(r["deim"]["snapshot_stride"]) < 1:
            errs.append("snapshot strides must be >= 1")
        if name in ("swe2d", "nls1d") and "training_params" not in red:
            if len(red["training_points"]) != len(self.param_box()):
                errs.append("reduction.training_points must have one entry per parameter (problem.param_box)")
        m_vals = r["deim"]["m"]
        m_vals = m_vals if isinstance(m_vals, list) else [m_vals]
        if any(int(v) < 1 for v in m_vals):
            errs.append("deim.m entries must be >= 1")
        a = r["adapt"]
        if int(a["w"]) >= int(a["delta0"]):
            errs.append(f"adapt.w ({a['w']}) must be smaller than adapt.delta0 ({a['delta0']})")
        if int(a["delta"]) >= 1 and int(a["gamma"]) % int(a["delta"]):
            errs.append(f"adapt.gamma ({a['gamma']}) must be a multiple of adapt.delta ({a['delta']})")
        if a["m_s"] is not None and any(int(a["m_s"]) < int(v) for v in m_vals):
            errs.append(f"adapt.m_s ({a['m_s']}) must be >= deim.m ({max(m_vals)})")
        for key in ("delta0", "delta", "gamma", "w"):
            if int(a[key]) < 1:
                errs.append(f"adapt.{key} must be >= 1")
        if r["run"]["mode"] not in MODES:
            errs.append(f"run.mode must be one of {MODES}")
        if int(r["run"].get("threads", 1)) < 1:
            errs.append("run.threads must be >= 1")
        if errs:
            raise ConfigError("; ".join(errs))


def load_config(path, overrides=None):
    """Read a TOML config; TOML has no null, so absent keys keep defaults.

    The strings ``"none"``/``"auto"`` map to ``None`` for the optional rank and
    sampling keys.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key in ("rank", "rank_tol", "m_s", "sample_tol"):
        if str(raw.get("adapt", {}).get(key, "")).lower() in ("none", "auto"):
            raw["adapt"][key] = None
    if str(raw.get("deim", {}).get("energy_tol", "")).lower() == "none":
        raw["deim"]["energy_tol"] = None
    raw = _merge(raw, overrides or {})
    return RunConfig(raw)
