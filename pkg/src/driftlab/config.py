"""Run configuration: JSON file, schema validation, defaults, resolved copy."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources

import jsonschema

from .errors import ConfigError, DriftLabError
from .market_model import DEFAULT_STEPS, ModelParams

DEFAULTS = {
    "model": {
        "kappa": 1.0, "mu_bar": 0.1, "sigma_mu": 0.4, "sigma_R": 0.5, "Gamma": 0.16,
        "lam": 1.0, "theta": 0.5, "T": 1.0, "m0": 0.1, "q0": 0.08, "x0": 1.0,
        "m0_bar": None, "q0_bar": None, "strict": True,
    },
    "grid": {"n_m": 161, "n_q": 41, "n_t": 51, "dt": None, "q_factor": 1.2, "m_width": 6.0,
             "gh_order": 11, "richardson": True},
    "mc": {"n_paths": 10000, "n_steps": DEFAULT_STEPS, "n_bundles": 10, "seed": 0},
    "regularization": {"epsilon": None, "k_list": [10.0, 100.0, 1000.0, 10000.0], "delta": 0.5,
                       "rule": "myopic", "with_pide": True},
    "evaluate": {"rules": ["zero", "myopic"], "constant_value": 1.0, "runs": 1, "identity": True,
                 "value_grid": None},
    "output": {"directory": "out", "formats": ["csv", "json"]},
}

RESOLVED_NAME = "resolved_config.json"


def load_schema(name: str) -> dict:
    text = resources.files("driftlab").joinpath("schemas", name).read_text()
    return json.loads(text)


def _field_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate_against(data, schema_name: str) -> None:
    """Raise ConfigError listing every failing field."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errs = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errs:
        msg = "; ".join(f"{_field_path(e)}: {e.message}" for e in errs)
        raise ConfigError(msg)


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key].update(copy.deepcopy(val))
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class RunConfig:
    """Validated configuration with every default filled in."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict | None = None) -> "RunConfig":
        raw = {} if raw is None else raw
        validate_against(raw, "run_config.schema.json")
        cfg = cls(_merge(DEFAULTS, raw))
        cfg.model()   # surface parameter errors as config errors early
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["mc"]["seed"])

    def with_overrides(self, seed=None, out=None) -> "RunConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["mc"]["seed"] = int(seed)
        if out is not None:
            data["output"]["directory"] = str(out)
        return RunConfig.from_dict(data)

    def model(self) -> ModelParams:
        try:
            return ModelParams(**self.data["model"])
        except DriftLabError as exc:
            raise ConfigError(f"model: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def resolved(self) -> dict:
        return copy.deepcopy(self.data)
