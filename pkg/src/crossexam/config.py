"""Experiment configuration, seed derivation and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .detection import FineTuneConfig, ScreeningRule
from .inversion import InversionConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """A configuration field is missing, unknown or out of its domain."""


@dataclass
class DatasetConfig:
    num_classes: int = 5
    n: int = 2000
    channels: int = 3
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"dataset.num_classes must be >= 2, got {self.num_classes}")
        if self.n < 20 * self.num_classes:
            raise ConfigError(f"dataset.n must be >= 20 * num_classes, got {self.n}")
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError("dataset.channels/height/width must be positive")


@dataclass
class AttackConfig:
    kinds: list[str] = field(default_factory=lambda: ["patch", "blended"])
    poison_rate: float = 0.1
    target_label: int | None = None  # None: member index modulo the class count
    trigger_size: list[int] = field(default_factory=lambda: [4, 4])
    blend_strength: float = 0.2

    def __post_init__(self):
        if not self.kinds or any(k not in ("patch", "blended") for k in self.kinds):
            raise ConfigError(f"attack.kinds must be a non-empty list of 'patch'/'blended', got {self.kinds}")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ConfigError(f"attack.poison_rate must be in [0, 1], got {self.poison_rate}")
        if len(self.trigger_size) != 2 or min(self.trigger_size) < 1:
            raise ConfigError(f"attack.trigger_size must be two positive ints, got {self.trigger_size}")
        if not 0.0 < self.blend_strength <= 1.0:
            raise ConfigError(f"attack.blend_strength must be in (0, 1], got {self.blend_strength}")


@dataclass
class PopulationConfig:
    n_clean: int = 10
    n_backdoored: int = 10
    calibration_pairs: int = 0
    metrics: list[str] = field(default_factory=lambda: ["cka", "cca", "svcca", "cos"])
    rates: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])
    layers: list[str] = field(default_factory=lambda: ["layer1", "layer2", "layer4"])
    probe_fraction: float = 0.5

    def __post_init__(self):
        if self.n_clean < 0 or self.n_backdoored < 0 or self.n_clean + self.n_backdoored < 1:
            raise ConfigError("population needs n_clean, n_backdoored >= 0 and at least one member")
        if self.calibration_pairs < 0:
            raise ConfigError(f"population.calibration_pairs must be >= 0, got {self.calibration_pairs}")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ConfigError(f"population.probe_fraction must be in (0, 1], got {self.probe_fraction}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    jobs: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    screening: ScreeningRule = field(default_factory=ScreeningRule)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    population: PopulationConfig = field(default_factory=PopulationConfig)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """sha256 of the canonical JSON form, excluding the output location and job count."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_json(text)

    def save(self, path, portable: bool = False) -> None:
        """``portable`` drops out_dir and jobs so the copy does not depend on where the run wrote to."""
        d = self.to_dict()
        if portable:
            d.pop("out_dir")
            d.pop("jobs")
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _check_value(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is typing.Any:
        return value
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(value, inner[0], where)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where + ".")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_check_value(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, d, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(prefix + u for u in unknown)}")
    kwargs = {k: _check_value(v, hints[k], prefix + k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


# ---- seeds ------------------------------------------------------------------------

def derive_seed(master: int, *stage) -> int:
    """Per-stage 64-bit seed: the stage path is hashed into the SeedSequence spawn key."""
    key = []
    for part in stage:
        h = hashlib.sha256(str(part).encode()).digest()
        key.append(int.from_bytes(h[:4], "little"))
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])


# ---- manifest ---------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    tool_version: str = __version__
    timings: dict[str, float] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)

    def timed(self, stage: str):
        return _Timer(self, stage)

    def collect(self, root) -> None:
        """Digest every file under ``root`` except the manifest itself."""
        root = Path(root)
        self.files = {p.relative_to(root).as_posix(): file_digest(p)
                      for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}

    def write(self, root) -> Path:
        self.collect(root)
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class _Timer:
    def __init__(self, manifest: RunManifest, stage: str):
        self.manifest, self.stage = manifest, stage

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings[self.stage] = round(time.perf_counter() - self.start, 3)
        return False
