"""Run configuration: a flat dataclass persisted as an INI file with sections."""
import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

METHODS = ("bp", "ddg", "fdg")
ORDERINGS = ("backward-first", "forward-first")
MODES = ("lockstep", "freerun")
OUTPUT_ROOT_ENV = "FDG_OUTPUT_ROOT"


def _section(name, default=None, default_factory=None):
    kw = {"metadata": {"section": name}}
    if default_factory is not None:
        return field(default_factory=default_factory, **kw)
    return field(default=default, **kw)


@dataclass
class RunConfig:
    # [run]
    method: str = _section("run", "fdg")
    k: int = _section("run", 2)
    beta: float = _section("run", 1.0)
    ordering: str = _section("run", "backward-first")
    mode: str = _section("run", "lockstep")
    deterministic: bool = _section("run", True)
    seed: int = _section("run", 0)
    iterations: int = _section("run", 1000)
    batch_size: int = _section("run", 128)
    eval_every: int = _section("run", 0)
    partition: str = _section("run", "even-layers")
    dtype: str = _section("run", "float64")
    record_digests: bool = _section("run", True)
    deadlock_timeout: float = _section("run", 30.0)
    # [optimizer]
    lr: float = _section("optimizer", 0.1)
    momentum: float = _section("optimizer", 0.9)
    weight_decay: float = _section("optimizer", 5e-4)
    milestones: tuple = _section("optimizer", (150, 225, 275))
    lr_divisor: float = _section("optimizer", 10.0)
    warmup_epochs: float = _section("optimizer", 0.0)
    warmup_lr: float = _section("optimizer", 0.01)
    # [model]
    arch: str = _section("model", "dense:64,relu,dense:64,relu,dense:4,head")
    # [data]
    dataset: str = _section("data", "random-teacher")
    n_train: int = _section("data", 2000)
    n_test: int = _section("data", 1000)
    features: int = _section("data", 10)
    classes: int = _section("data", 4)
    data_seed: int = _section("data", 1234)
    images: str = _section("data", "")
    labels: str = _section("data", "")
    test_images: str = _section("data", "")
    test_labels: str = _section("data", "")
    standardize: bool = _section("data", False)
    # [output]
    output_dir: str = _section("output", "runs/default")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def resolved_output_dir(self):
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, text):
    f = _FIELDS[name]
    default = f.default
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) if v.strip().lstrip("-").isdigit() else float(v)
                         for v in text.split(",") if v.strip())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def to_ini(config):
    cp = configparser.ConfigParser(interpolation=None)
    for f in fields(config):
        sec = f.metadata["section"]
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, f.name, _format(getattr(config, f.name)))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def from_ini(text, base=None):
    """Parse INI text. Unknown sections or keys, or keys in the wrong section, are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    known = {f.metadata["section"] for f in _FIELDS.values()}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            name = key.replace("-", "_")
            if name not in _FIELDS:
                raise ConfigError(f"unknown key [{sec}] {key}")
            if _FIELDS[name].metadata["section"] != sec:
                raise ConfigError(f"key {key} belongs in [{_FIELDS[name].metadata['section']}]")
            values[name] = _coerce(name, raw)
    base = base or RunConfig()
    return dataclasses.replace(base, **values)


def load_config(path):
    with open(path) as f:
        return from_ini(f.read())


def save_config(config, path):
    with open(path, "w") as f:
        f.write(to_ini(config))


def apply_overrides(config, overrides):
    """Apply ``key=value`` strings (or a dict) on top of ``config``."""
    if isinstance(overrides, dict):
        items = overrides.items()
    else:
        items = []
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            items.append((key, value))
    values = {}
    for key, value in items:
        name = key.strip().split(".")[-1].replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"unknown key {key}")
        values[name] = _coerce(name, value) if isinstance(value, str) else value
    return dataclasses.replace(config, **values)
