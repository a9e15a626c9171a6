"""Run configuration: an INI file (``configparser`` grammar) with fixed
sections, overridable from command-line flags and, for paths only, from
environment variables.

Grammar: ``[section]`` headers, ``key = value`` lines, ``#`` or ``;``
comments (whole-line, or inline after whitespace). Unknown sections or keys are rejected. Lists are comma separated;
dataset weights are ``name:weight`` pairs. An empty value means "unset".
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .net import PRESETS
from .sampler import WeightPolicy

TASKS = ("pretrain", "modulation", "radar", "mixture")
POOLS = ("cls", "cls+mean")

# environment overrides, paths only
ENV_PATHS = {
    "IQMAE_RUN_DIR": "run_dir",
    "IQMAE_TRAIN": "train_path",
    "IQMAE_TEST": "test_path",
    "IQMAE_REFERENCES": "references_path",
    "IQMAE_INIT": "init",
}


def _item(section: str, default, kind=None, **kw):
    return field(default=default, metadata=dict(section=section, kind=kind or type(default)), **kw)


@dataclass
class RunConfig:
    # [run]
    run_dir: str = _item("run", "runs/default", str)
    seed: int = _item("run", 0)
    workers: int = _item("run", 1)
    deterministic: bool = _item("run", True)
    # [data]
    train_path: str = _item("data", "", str)
    test_path: str = _item("data", "", str)
    references_path: str = _item("data", "", str)
    weights: str = _item("data", "", str)
    records: int = _item("data", 2000)
    test_records: int = _item("data", 600)
    train_fraction: float = _item("data", 0.9)
    min_snr_db: str = _item("data", "", str)
    # [model]
    preset: str = _item("model", "full", str)
    mask_ratio: float = _item("model", 0.75)
    capacity: int = _item("model", 6000)
    init: str = _item("model", "", str)
    # [optim]
    lr: float = _item("optim", 1e-4)
    warmup_fraction: float = _item("optim", 0.10)
    steps: int = _item("optim", 1000)
    batch_size: int = _item("optim", 40)
    # [policy]
    policy_mode: str = _item("policy", "static", str)
    policy_window: int = _item("policy", 200)
    up_factor: float = _item("policy", 1.25)
    down_factor: float = _item("policy", 0.8)
    epsilon: float = _item("policy", 1e-4)
    min_weight: float = _item("policy", 0.1)
    max_weight: float = _item("policy", 10.0)
    eval_every: int = _item("policy", 50)
    # [task]
    task: str = _item("task", "modulation", str)
    snr_db: str = _item("task", "10", str)
    k: int = _item("task", 50)
    lam: float = _item("task", 1.0)
    lam_z: float = _item("task", 1e-4)
    freeze_backbone: bool = _item("task", False)
    pool: str = _item("task", "cls", str)
    separation_mode: str = _item("task", "separated", str)
    expansion: str = _item("task", "query", str)
    fewshot_probe: bool = _item("task", True)

    # ------------------------------------------------------------------

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    @property
    def snr_values(self) -> tuple[float, ...]:
        return _floats(self.snr_db, "snr_db")

    @property
    def min_snr(self) -> float | None:
        return None if self.min_snr_db.strip() == "" else _floats(self.min_snr_db, "min_snr_db")[0]

    @property
    def weight_map(self) -> dict[str, float]:
        out = {}
        for part in filter(None, (p.strip() for p in self.weights.split(","))):
            name, sep, value = part.rpartition(":")
            if not sep or not name:
                raise ConfigError(f"weights entry {part!r} is not name:weight")
            out[name.strip()] = _floats(value, "weights")[0]
        return out

    def policy(self) -> WeightPolicy:
        return WeightPolicy(
            self.policy_mode, self.policy_window, self.up_factor, self.down_factor, self.epsilon,
            self.min_weight, self.max_weight,
        )

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.capacity < 3:
            raise ConfigError("capacity must hold at least one record")
        if self.lr < 0 or not 0 <= self.warmup_fraction < 1:
            raise ConfigError("need lr >= 0 and warmup_fraction in [0, 1)")
        for name in ("steps", "batch_size", "workers", "records", "test_records", "k", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.pool not in POOLS:
            raise ConfigError(f"unknown pool {self.pool!r}; choose from {POOLS}")
        if self.separation_mode not in ("separated", "mixture"):
            raise ConfigError(f"unknown separation_mode {self.separation_mode!r}")
        if self.expansion not in ("linear", "query"):
            raise ConfigError(f"unknown expansion {self.expansion!r}")
        if self.lam < 0 or self.lam_z < 0:
            raise ConfigError("loss weights must be >= 0")
        self.policy()
        self.snr_values, self.min_snr, self.weight_map  # parse checks
        if any(w <= 0 for w in self.weight_map.values()):
            raise ConfigError("dataset weights must be > 0")
        return self

    # ------------------------------------------------------------------

    def to_ini(self) -> str:
        """Every resolved value, grouped by section."""
        parser = configparser.ConfigParser(interpolation=None)
        for f in fields(self):
            sec = f.metadata["section"]
            if not parser.has_section(sec):
                parser.add_section(sec)
            v = getattr(self, f.name)
            parser.set(sec, f.name, ("true" if v else "false") if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write_snapshot(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _floats(text: str, name: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as numbers") from exc
    if not vals:
        raise ConfigError(f"{name} is empty")
    return vals


def _coerce(f, raw: str):
    kind = f.metadata["kind"]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind.__name__}") from exc


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """File values, then environment path overrides, then explicit overrides."""
    by_name = {f.name: f for f in fields(RunConfig)}
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for sec in parser.sections():
            for key, raw in parser.items(sec):
                f = by_name.get(key)
                if f is None or f.metadata["section"] != sec:
                    raise ConfigError(f"unknown key [{sec}] {key}")
                values[key] = _coerce(f, raw)
    env = os.environ if environ is None else environ
    for var, key in ENV_PATHS.items():
        if env.get(var):
            values[key] = env[var]
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in by_name:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = _coerce(by_name[key], v) if isinstance(v, str) and by_name[key].metadata["kind"] is not str else v
    return replace(RunConfig(), **values).validate()
