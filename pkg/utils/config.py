"""
Run configuration.

A run is described by one JSON document with a ``schema_version`` and one
section per module. Every key defaults to the module's own dataclass
defaults; unknown sections or keys are rejected.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from utils.errors import ConfigError

SCHEMA_VERSION = 1
SEED_ENV = "NSP_SEED"


@dataclass
class DataConfig:
    manifest: str = ""
    n_folds: int = 3
    fold: Optional[int] = None
    apply_filters: bool = True
    threads: int = 1
    seed: int = 42
    eval_context_ratio: float = 1.0
    use_gauges: bool = True
    inference_mode: str = "standard"
    max_horizon: int = 8
    export_hours: tuple = ()

    def __post_init__(self) -> None:
        self.export_hours = tuple(int(h) for h in self.export_hours)
        if self.n_folds < 1:
            raise ConfigError(f"n_folds must be at least 1, got {self.n_folds}")
        if self.fold is not None and not 0 <= self.fold < self.n_folds:
            raise ConfigError(f"fold must lie in [0, {self.n_folds}), got {self.fold}")
        if not 0.0 <= self.eval_context_ratio <= 1.0:
            raise ConfigError(f"eval_context_ratio must lie in [0, 1], got {self.eval_context_ratio}")
        if self.threads < 1 or self.max_horizon < 1:
            raise ConfigError("threads and max_horizon must be at least 1")


def _sections() -> dict:
    from baselines import BaselineConfig
    from metrics import MetricConfig
    from nsp import NSPConfig
    from objective import LossWeights
    from sampler import SplitConfig
    from synth import SynthConfig
    from train import TrainConfig

    return {
        "data": DataConfig,
        "model": NSPConfig,
        "objective": LossWeights,
        "sampler": SplitConfig,
        "train": TrainConfig,
        "metrics": MetricConfig,
        "synth": SynthConfig,
        "baselines": BaselineConfig,
    }


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"section {name!r}: {e}") from e


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        for name, cls in _sections().items():
            if name not in self.sections:
                self.sections[name] = cls()

    def __getattr__(self, name: str):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    @classmethod
    def from_dict(cls, doc: dict, source: str = "<config>") -> "RunConfig":
        """
        Merge a config document over the defaults.

        Raises:
            ConfigError: Missing or unsupported schema version, unknown
                section or key, or a value a section rejects
        """
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: config must be a JSON object")
        if "schema_version" not in doc:
            raise ConfigError(f"{source}: missing schema_version")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"{source}: unsupported schema_version {doc['schema_version']!r}")
        known = _sections()
        unknown = sorted(set(doc) - set(known) - {"schema_version"})
        if unknown:
            raise ConfigError(f"{source}: unknown sections: {', '.join(unknown)}")
        built = {name: _build_section(name, cls_, doc.get(name, {})) for name, cls_ in known.items()}
        return cls(built, SCHEMA_VERSION)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "RunConfig":
        """Read a config file; the defaults when ``path`` is None."""
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(doc, path)

    def to_dict(self) -> dict:
        doc = {"schema_version": self.schema_version}
        for name, section in self.sections.items():
            doc[name] = asdict(section)
        return doc

    def update(self, name: str, **changes) -> "RunConfig":
        """Apply overrides to one section, re-running its validation."""
        if not changes:
            return self
        values = asdict(self.sections[name])
        values.update(changes)
        self.sections[name] = _build_section(name, type(self.sections[name]), values)
        return self

    def apply_env(self, environ=None) -> "RunConfig":
        """``NSP_SEED`` overrides every seed in the document."""
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw in (None, ""):
            return self
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        for name, section in self.sections.items():
            if any(f.name == "seed" for f in fields(section)):
                self.sections[name] = replace(section, seed=seed)
        return self

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_effective(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "effective_config.json")
        self.write(path)
        return path
