"""Run configuration: one TOML file, every default listed in ``DEFAULTS``.

Unknown sections or keys are errors. The config hash is computed over the
resolved settings (defaults merged with the file and CLI overrides) so
reports can name the exact configuration they came from.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {
        "seed": 0,  # environment / exploration seed
        "lambda": 0.5,  # tradeoff in J = reward - lambda * cost
        "lambdas": [0.5],  # evaluated by `eval` and swept by `select`
    },
    "router": {
        "lambda_c": 0.5,
        "k": 3,
        "threshold": 0.1,
        "max_turns": 4,
        "terminal_mode": "answer",
        "on_failure": "continue",
        "failure_cost": 0.0,
    },
    "policy": {
        "kind": "rule",  # rule | scripted
        "order": [],  # rule table order of non-terminal modes; empty: world order
        "schedule": [],  # for kind = "scripted"
    },
    "simulate": {
        "n_queries": 300,
        "query_seed": 1,
        "modes": [],  # designated exploration modes; empty: each query's required modes
    },
    "learner": {
        "proposer": "oracle",  # oracle | baseline
        "judge_label": "trajectory",  # trajectory | step
        "success_threshold": 0.5,
        "cluster_threshold": 0.5,
        "dedup_threshold": 0.6,
        "max_bundles": None,
    },
    "refiner": {
        "min_queries": 6,
        "variance_threshold": 0.3,
        "significance_alpha": 0.05,
        "min_observations": 10,
    },
    "selector": {
        "n_queries": 100,
        "query_seed": 3,
    },
    "eval": {
        "n_queries": 200,
        "query_seed": 2,
    },
    "world": {},  # WorldSpec overrides, checked by the simulator
}


def _check(data: Mapping, base: Mapping, where: str) -> None:
    for key, value in data.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {where}{key!r} must be a table")
            _check(value, base[key], f"{where}{key}.")


def merge(data: Mapping) -> dict:
    """Defaults overlaid with ``data`` (validated, two levels deep)."""
    _check(data, DEFAULTS, "")
    out = copy.deepcopy(DEFAULTS)
    for section, values in data.items():
        out[section].update(values)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Mapping] | None = None) -> dict:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    cfg = merge(data)
    for section, values in (overrides or {}).items():
        for key, value in values.items():
            if value is not None:
                if key not in cfg[section] and section != "world":
                    raise ConfigError(f"unknown override {section}.{key}")
                cfg[section][key] = value
    return cfg


def config_hash(cfg: Mapping) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def defaults_table() -> str:
    """Markdown table of every default, for the README and `--help`."""
    rows = ["| key | default |", "|---|---|"]
    for section, values in DEFAULTS.items():
        for key, value in values.items():
            rows.append(f"| `{section}.{key}` | `{json.dumps(value)}` |")
    return "\n".join(rows)
