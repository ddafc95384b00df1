"""Run configuration: flat ``section.key = value`` text files.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Lists are comma separated. Unknown keys are rejected so that typos do not
silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

from .bc import TrainConfig
from .envs import TIER_EPSILONS, make_env
from .errors import ConfigError, SDRError
from .selection import METHODS

U64_MAX = 2**64 - 1


def _int(v: str) -> int:
    return int(v, 0)


def _float(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("not finite")
    return x


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError("expected true/false")


def _list(item):
    def parse(v: str):
        return tuple(item(p.strip()) for p in v.split(",") if p.strip())
    return parse


def _opt_int(v: str):
    return None if v.lower() in ("auto", "none", "") else _int(v)


def _repeat(v: str):
    low = v.lower()
    if low in ("dataset", "none"):
        return low
    return _int(v)


# key -> (parser, default); a default of ... marks a required key
SCHEMA = {
    "seed": (_int, 0),
    "seed_count": (_int, 5),
    "out": (str, "runs"),
    "workers": (_int, 1),
    "env.name": (str, ...),
    "data.tier": (str, "medium"),
    "data.n_trajectories": (_int, 2500),
    "estimate.enabled": (_bool, True),
    "estimate.k": (_opt_int, None),
    "estimate.rollouts_per_pair": (_int, 8),
    "estimate.k_q": (_int, 5),
    "estimate.n_ref": (_int, 2000),
    "select.methods": (_list(str), ("random", "sdr")),
    "select.lambda": (_float, 0.2),
    "select.scale": (_float, 100.0),
    "select.budgets": (_list(_int), (32, 64, 128)),
    "train.batch_size": (_int, 256),
    "train.learning_rate": (_float, 3e-4),
    "train.epochs": (_int, 20),
    "train.hidden": (_int, 64),
    "train.n_hidden": (_int, 2),
    "train.repeat_to": (_repeat, "dataset"),
    "eval.episodes": (_int, 100),
    "eval.reference_episodes": (_int, 10_000),
    "curve.sizes": (_list(_int), ()),
    "curve.points": (_int, 8),
    "curve.smallest": (_int, 8),
    "curve.trials": (_int, 10),
    "curve.k": (_list(_float), (50.0, 90.0)),
    "verify.shift_bound": (_int, 1000),
    "verify.performance_gap": (_int, 1000),
    "verify.coverage_m": (_list(_int), (10, 100, 1000)),
    "verify.coverage_delta": (_list(_float), (0.05, 0.2)),
    "verify.coverage_repetitions": (_int, 10_000),
    "verify.coverage_w_max": (_float, 4.0),
    "verify.allocation_instances": (_int, 20),
    "verify.allocation_samples": (_int, 100_000),
}

_ENV_PARAMS = {
    "gridworld": {"width": _int, "height": _int, "p_slip": _float, "horizon": _int,
                  "start": _list(_int), "goal": _list(_int)},
    "pointgoal": {"step": _float, "noise": _float, "horizon": _int, "goal_radius": _float,
                  "start": _list(_float), "goal": _list(_float)},
}


def parse_config_text(text: str) -> dict:
    """Raw ``{key: value-string}`` mapping; later duplicates are an error."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not UTF-8 text") from exc


@dataclass(frozen=True)
class RunConfig:
    values: dict  # fully resolved key -> typed value (env params included)
    env_params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def env_name(self) -> str:
        return self.values["env.name"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def train_config(self, dataset_size: int, seed: int = 0) -> TrainConfig:
        rep = self.values["train.repeat_to"]
        return TrainConfig(
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            epochs=self["train.epochs"],
            hidden=self["train.hidden"],
            n_hidden=self["train.n_hidden"],
            repeat_to=dataset_size if rep == "dataset" else (None if rep == "none" else rep),
            seed=seed,
        )

    def snapshot(self) -> dict:
        """JSON-ready view without the output directory and worker count,
        which do not affect results."""
        snap = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()
                if k not in ("out", "workers")}
        for k, v in self.env_params.items():
            snap[f"env.{k}"] = list(v) if isinstance(v, tuple) else v
        return dict(sorted(snap.items()))

    def config_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_config(raw: dict, overrides: dict | None = None, require_env: bool = True) -> RunConfig:
    """Type-check and validate a raw mapping; ``overrides`` win over ``raw``."""
    merged = dict(raw)
    merged.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    values, env_params = {}, {}
    env_name = merged.get("env.name")
    for key, text in merged.items():
        if key.startswith("env.") and key != "env.name":
            params = _ENV_PARAMS.get(env_name or "", {})
            sub = key[4:]
            if sub not in params:
                raise ConfigError(f"unknown key {key!r} for environment {env_name!r}")
            env_params[sub] = _coerce(key, params[sub], text)
        elif key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
    for key, (parser, default) in SCHEMA.items():
        if key in merged:
            values[key] = _coerce(key, parser, merged[key])
        elif default is ...:
            if require_env:
                raise ConfigError(f"missing required key {key!r}")
            values[key] = None
        else:
            values[key] = default
    cfg = RunConfig(values, env_params)
    validate(cfg, require_env)
    return cfg


def _coerce(key, parser, text):
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc


def _check(ok: bool, key: str, what: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {what}")


def validate(cfg: RunConfig, require_env: bool = True) -> None:
    v = cfg.values
    _check(0 <= v["seed"] <= U64_MAX, "seed", "must be an unsigned 64-bit integer")
    _check(v["workers"] >= 1, "workers", "must be >= 1")
    if require_env or v["env.name"] is not None:
        _check(v["env.name"] in _ENV_PARAMS, "env.name", f"expected one of {sorted(_ENV_PARAMS)}")
        try:
            make_env(v["env.name"], **cfg.env_params)
        except (TypeError, ValueError, IndexError, SDRError) as exc:
            raise ConfigError(f"env: {exc}") from exc
    _check(v["data.tier"] in TIER_EPSILONS, "data.tier", f"expected one of {sorted(TIER_EPSILONS)}")
    _check(v["data.n_trajectories"] >= 0, "data.n_trajectories", "must be >= 0")
    _check(v["estimate.k"] is None or v["estimate.k"] >= 1, "estimate.k", "must be >= 1 or auto")
    _check(v["estimate.rollouts_per_pair"] >= 1, "estimate.rollouts_per_pair", "must be >= 1")
    _check(v["estimate.k_q"] >= 1, "estimate.k_q", "must be >= 1")
    _check(v["estimate.n_ref"] >= 1, "estimate.n_ref", "must be >= 1")
    _check(len(v["select.methods"]) > 0, "select.methods", "must name at least one method")
    for m in v["select.methods"]:
        _check(m in METHODS, "select.methods", f"unknown method {m!r}; expected one of {METHODS}")
    _check(0.0 <= v["select.lambda"] <= 1.0, "select.lambda", "must lie in [0, 1]")
    _check(v["select.scale"] > 0, "select.scale", "must be positive")
    _check(all(b >= 0 for b in v["select.budgets"]), "select.budgets", "must be >= 0")
    for key in ("train.batch_size", "train.hidden", "eval.episodes", "eval.reference_episodes",
                "seed_count", "curve.trials", "curve.points", "curve.smallest"):
        _check(v[key] >= 1, key, "must be >= 1")
    _check(v["train.n_hidden"] >= 0, "train.n_hidden", "must be >= 0")
    _check(v["train.epochs"] >= 0, "train.epochs", "must be >= 0")
    _check(v["train.learning_rate"] > 0, "train.learning_rate", "must be positive")
    rep = v["train.repeat_to"]
    _check(rep in ("dataset", "none") or rep >= 1, "train.repeat_to", "must be dataset, none or >= 1")
    _check(all(s >= 1 for s in v["curve.sizes"]), "curve.sizes", "must be >= 1")
    _check(all(0 < k < 100 for k in v["curve.k"]), "curve.k", "must lie in (0, 100)")
    for key in ("verify.shift_bound", "verify.performance_gap", "verify.allocation_instances",
                "verify.allocation_samples"):
        _check(v[key] >= 0, key, "must be >= 0")
    _check(v["verify.coverage_repetitions"] >= 0, "verify.coverage_repetitions", "must be >= 0")
    _check(all(m >= 1 for m in v["verify.coverage_m"]), "verify.coverage_m", "must be >= 1")
    _check(all(0 < d < 1 for d in v["verify.coverage_delta"]), "verify.coverage_delta", "must lie in (0, 1)")
    _check(v["verify.coverage_w_max"] >= 1.0, "verify.coverage_w_max", "must be >= 1")
