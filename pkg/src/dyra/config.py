"""RunConfig: the JSON document every CLI subcommand reads.

Every key has a default (see ``DEFAULTS``); a config file only lists
overrides. Unknown keys and wrongly typed values raise :class:`ConfigError`
carrying the JSON path of the offending entry, e.g. ``$.harness.surrogate.k``.
"""
from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass

from .core import BalanceState, ScalerConfig
from .harness import AreaDistribution, SurrogateDetector, TrainConfig
from .sched import ConstCosineSchedule

OUTPUT_ENV = "DYRA_OUTPUT_DIR"

DEFAULTS = {
    "scaler": {
        "tau": 2.0,
        "architecture": {
            "input_mode": "features",
            "conv_layers": 3,
            "encoder_blocks": 1,
            "hidden_dim": 32,
            "ffn_dim": 64,
            "tokens": 16,
            "thumbnail_side": 32,
        },
    },
    "balance": {
        "gamma_init": 6.8,
        "s_ap": [32.0**2, 96.0**2],
        "m_bounds": [64.0**2, 256.0**2],
        "variant": "after_avg",
    },
    # drives `schedule dump` and `gamma-sim` (the latter over harness.gamma_steps)
    "schedule": {
        "base_lr": 0.01,
        "total_steps": 100,
        "switch_step": None,
        "final_lr": 0.0,
    },
    "harness": {
        "seed": 0,
        "n_images": 1000,
        "steps": 3000,
        "batch_size": 16,
        "lr": 0.02,
        "gamma_lr": 0.05,
        "momentum": 0.9,
        "holdout_fraction": 0.2,
        "aug_short_side": [640, 800],
        "aug_strata": 10,
        "chunk_size": 4,
        "threads": 1,
        "stage_mode": "one-stage",
        "symmetric_groups": False,
        "gamma_steps": 2000,
        "sweep_sizes": [400, 640, 800, 1200],
        "area_distribution": {
            "log_mean": 10.2,
            "image_sigma": 1.1,
            "box_sigma": 1.5,
            "aspect_sigma": 0.3,
            "min_boxes": 1,
            "max_boxes": 12,
        },
        "surrogate": {"s_opt": 128.0**2, "k": 0.05},
    },
    "output": {"directory": "dyra_out"},
}

CHOICES = {
    "$.scaler.architecture.input_mode": ("features", "thumbnail"),
    "$.balance.variant": ("after_avg", "before_avg"),
    "$.harness.stage_mode": ("one-stage", "two-stage"),
}
OPTIONAL_INT = {"$.schedule.switch_step"}


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _merge(default, user, path):
    if isinstance(default, dict):
        if not isinstance(user, dict):
            raise ConfigError(path, "expected an object")
        out = copy.deepcopy(default)
        for k, v in user.items():
            sub = f"{path}.{k}"
            if k not in default:
                raise ConfigError(sub, "unknown key")
            out[k] = _merge(default[k], v, sub)
        return out
    if path in OPTIONAL_INT:
        if user is not None and (not isinstance(user, int) or isinstance(user, bool)):
            raise ConfigError(path, "expected an integer or null")
        return user
    if isinstance(default, bool):
        if not isinstance(user, bool):
            raise ConfigError(path, "expected true or false")
        return user
    if isinstance(default, int):
        if not isinstance(user, int) or isinstance(user, bool):
            raise ConfigError(path, "expected an integer")
        return user
    if isinstance(default, float):
        if not _is_num(user):
            raise ConfigError(path, "expected a finite number")
        return float(user)
    if isinstance(default, str):
        if not isinstance(user, str):
            raise ConfigError(path, "expected a string")
        if path in CHOICES and user not in CHOICES[path]:
            raise ConfigError(path, f"expected one of {', '.join(CHOICES[path])}")
        return user
    if isinstance(default, list):
        if not isinstance(user, list) or len(user) != len(default):
            raise ConfigError(path, f"expected a list of {len(default)} numbers")
        for i, v in enumerate(user):
            if not _is_num(v):
                raise ConfigError(f"{path}[{i}]", "expected a finite number")
        return [type(d)(v) if isinstance(d, float) else v for d, v in zip(default, user)]
    raise ConfigError(path, "unsupported value")


@dataclass
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, doc, "$"))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError("$", f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        return cls.from_dict(doc)

    def __getitem__(self, key):
        return self.data[key]

    def validate(self):
        """Semantic checks beyond types; each failure names its path."""
        d = self.data
        checks = [
            ("$.scaler.tau", 0 < d["scaler"]["tau"] < 10, "tau must lie in (0, 10)"),
            ("$.balance.gamma_init", d["balance"]["gamma_init"] > 0, "must be positive"),
            ("$.balance.s_ap", 0 < d["balance"]["s_ap"][0] < d["balance"]["s_ap"][1],
             "need 0 < small < large"),
            ("$.balance.m_bounds", 0 < d["balance"]["m_bounds"][0] < d["balance"]["m_bounds"][1],
             "need 0 < lower < upper"),
            ("$.harness.n_images", d["harness"]["n_images"] >= 1, "must be >= 1"),
            ("$.harness.steps", d["harness"]["steps"] >= 0, "must be >= 0"),
            ("$.harness.batch_size", d["harness"]["batch_size"] >= 1, "must be >= 1"),
            ("$.harness.threads", d["harness"]["threads"] >= 1, "must be >= 1"),
            ("$.harness.gamma_steps", d["harness"]["gamma_steps"] >= 1, "must be >= 1"),
            ("$.harness.holdout_fraction", 0 <= d["harness"]["holdout_fraction"] < 1,
             "must lie in [0, 1)"),
            ("$.harness.aug_short_side",
             0 < d["harness"]["aug_short_side"][0] <= d["harness"]["aug_short_side"][1],
             "need 0 < low <= high"),
        ]
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(path, msg)
        builders = [
            ("$.scaler", self.scaler_config),
            ("$.balance", self.balance_state),
            ("$.schedule", self.schedule),
            ("$.harness.area_distribution", self.area_distribution),
            ("$.harness.surrogate", self.surrogate),
        ]
        for path, build in builders:
            try:
                build()
            except ValueError as exc:
                raise ConfigError(path, str(exc)) from exc

    def scaler_config(self) -> ScalerConfig:
        return ScalerConfig(tau=self["scaler"]["tau"], **self["scaler"]["architecture"])

    def balance_state(self, gamma=None) -> BalanceState:
        b = self["balance"]
        return BalanceState(
            gamma=b["gamma_init"] if gamma is None else gamma,
            s_ap_small=b["s_ap"][0], s_ap_large=b["s_ap"][1],
            m_lower=b["m_bounds"][0], m_upper=b["m_bounds"][1],
        )

    def schedule(self, total_steps=None) -> ConstCosineSchedule:
        s = self["schedule"]
        T = s["total_steps"] if total_steps is None else total_steps
        switch = s["switch_step"] if total_steps is None else None
        return ConstCosineSchedule(s["base_lr"], T, switch, s["final_lr"])

    def area_distribution(self) -> AreaDistribution:
        return AreaDistribution(**self["harness"]["area_distribution"])

    def surrogate(self) -> SurrogateDetector:
        return SurrogateDetector(**self["harness"]["surrogate"])

    def train_config(self, threads=None) -> TrainConfig:
        h = self["harness"]
        n_stages = 2 if h["stage_mode"] == "two-stage" else 1
        return TrainConfig(
            seed=h["seed"], steps=h["steps"], batch_size=h["batch_size"], base_lr=h["lr"],
            gamma_lr=h["gamma_lr"], momentum=h["momentum"], variant=self["balance"]["variant"],
            stage_mode=h["stage_mode"], aug_short_side=tuple(h["aug_short_side"]),
            aug_strata=h["aug_strata"], holdout_fraction=h["holdout_fraction"],
            chunk_size=h["chunk_size"], threads=h["threads"] if threads is None else threads,
            symmetric_groups=h["symmetric_groups"],
            surrogates=[self.surrogate() for _ in range(n_stages)],
        )

    def output_dir(self) -> str:
        return os.environ.get(OUTPUT_ENV) or self["output"]["directory"]
