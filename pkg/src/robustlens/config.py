"""Flat ``dotted.key = value`` experiment configuration."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import IDX_FILES, SYNTHETIC
from .models import ConfigError

# key -> (type, default); None default means "optional, unset"
SCHEMA = {
    "seed": (int, 0),
    "out": (str, "run"),
    "data.root": (str, None),
    "data.source": (str, "shapes4"),
    "data.train_size": (int, 2000),
    "data.test_size": (int, 500),
    "model.arch": (str, "mlp"),
    "model.widths": ("ints", (256, 128)),
    "model.norm": (bool, False),
    "model.activation": (str, "relu"),
    "attack.eps": (float, 1.0),
    "attack.steps": (int, 8),
    "attack.step_size": (float, None),
    "train.mode": (str, "at"),
    "train.epochs": (int, 20),
    "train.batch_size": (int, 128),
    "train.lr": (float, 0.05),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.beta": (float, 6.0),
    "train.eval_size": (int, 256),
    "fisher.decoder": (str, "gaussian-unit"),
    "fisher.sigma": (float, 1.0),
    "fisher.samples": (int, 32),
    "fisher.weight_samples": (int, 200),
    "fisher.ridge": (float, 1e-6),
    "fisher.floor": (float, 1e-8),
    "invert.mode": (str, "deterministic"),
    "invert.iters": (int, 500),
    "invert.lr": (float, 0.1),
    "invert.init_sigma": (float, 0.1),
    "invert.images": (int, 8),
    "invert.beta": (float, None),
    "invert.lam": (float, 0.01),
    "transfer.targets": ("strs", ()),
    "transfer.modes": ("ints", (0,)),
    "transfer.seeds": ("ints", (0,)),
    "transfer.epochs": (int, 10),
    "transfer.lr": (float, 0.05),
    "transfer.train_size": (int, 1000),
    "transfer.test_size": (int, 300),
    "transfer.probe_eps": (float, None),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low in _TRUE | _FALSE:
                return low in _TRUE
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        self.values[key] = _convert(key, kind, value) if isinstance(value, str) else value

    def dump(self) -> str:
        lines = []
        for k in SCHEMA:
            v = self.values[k]
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = parse_text(p.read_text(encoding="utf-8"), str(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg.set(k, v)
    validate(cfg)
    return cfg


def _dataset_root(cfg: ExperimentConfig):
    root = cfg["data.root"] or os.environ.get("ROBUSTLENS_DATA")
    return Path(root) if root else None


def check_dataset(cfg: ExperimentConfig, spec: str, key: str) -> None:
    """Fail at parse time when a named dataset cannot be found."""
    name = spec.split("+")[0]
    if name in SYNTHETIC:
        return
    if name not in IDX_FILES and name != "cifar10":
        raise ConfigError(f"{key}: unknown dataset {name!r}")
    root = _dataset_root(cfg)
    if root is None:
        raise ConfigError(f"data.root: dataset {name!r} needs a data root (set data.root or ROBUSTLENS_DATA)")
    files = ([p.format(split="train") for p in IDX_FILES[name]] if name in IDX_FILES
             else ["data_batch_1.bin"])
    for f in files:
        if not (root / name / f).is_file():
            raise ConfigError(f"data.root: missing dataset file {root / name / f} (needed by {key})")


def validate(cfg: ExperimentConfig) -> None:
    if cfg["data.root"] is not None and not Path(cfg["data.root"]).is_dir():
        raise ConfigError(f"data.root: directory {cfg['data.root']} does not exist")
    check_dataset(cfg, cfg["data.source"], "data.source")
    for t in cfg["transfer.targets"]:
        check_dataset(cfg, t, "transfer.targets")
    if cfg["train.mode"] not in ("standard", "at", "trades"):
        raise ConfigError(f"train.mode: unknown mode {cfg['train.mode']!r}")
    if cfg["fisher.decoder"] not in ("gaussian-unit", "gaussian", "categorical"):
        raise ConfigError(f"fisher.decoder: unknown decoder {cfg['fisher.decoder']!r}")
    if cfg["invert.mode"] not in ("deterministic", "noise-once", "noise-each-step", "all"):
        raise ConfigError(f"invert.mode: unknown mode {cfg['invert.mode']!r}")
    if cfg["attack.eps"] < 0:
        raise ConfigError("attack.eps: must be >= 0")
    for m in cfg["transfer.modes"]:
        if m not in (0, 1, 2):
            raise ConfigError(f"transfer.modes: unknown mode {m}")
    for k in ("data.train_size", "data.test_size", "train.epochs", "invert.iters", "invert.images"):
        if cfg[k] < 0 or (cfg[k] == 0 and k != "train.epochs"):
            raise ConfigError(f"{k}: must be positive")
