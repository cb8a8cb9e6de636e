"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Sections are ``model`` (architecture and loss weights), ``train`` (optimizer
and loop), ``data`` and ``run``. Every key has a default; unknown sections
and keys are errors reported with ``file:line``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import HyntConfig
from .training import TrainOptions


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


@dataclass
class DataSection:
    dir: str = "data"
    normalize: bool = True


@dataclass
class RunSection:
    output: str = "run"


@dataclass
class RunConfig:
    model: HyntConfig = field(default_factory=HyntConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("model", "train", "data", "run")

    def set(self, section: str, key: str, raw: str, path=None, line: int | None = None) -> None:
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, line)
        target = getattr(self, section)
        names = {f.name for f in fields(target)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
        try:
            value = _coerce(getattr(target, key), raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", path, line) from None
        setattr(target, key, value)

    def validate(self) -> None:
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(f"[model] {exc}") from None
        t = self.train
        if t.epochs < 1 or t.batch_size < 1:
            raise ConfigError("[train] epochs and batch_size must be positive")
        if t.lr <= 0 or t.t0 <= 0 or t.t_mult < 1:
            raise ConfigError("[train] need lr > 0, t0 > 0, t_mult >= 1")
        if t.strategy not in ("enumerate", "sample"):
            raise ConfigError("[train] strategy must be enumerate or sample")
        if t.eval_mode not in ("raw", "filtered"):
            raise ConfigError("[train] eval_mode must be raw or filtered")
        from .training import NO_MASK_CHOICES

        bad = set(t.no_mask) - set(NO_MASK_CHOICES)
        if bad:
            raise ConfigError(f"[train] no_mask entries must be among {NO_MASK_CHOICES}, got {sorted(bad)}")

    def dumps(self) -> str:
        """The fully resolved configuration, loadable by :func:`parse_config`."""
        lines = []
        for section in self.SECTIONS:
            lines.append(f"[{section}]")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {_render(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def parse_config(text: str, path=None, base: RunConfig | None = None) -> RunConfig:
    # configparser drops line numbers, which the error messages need
    config = base or RunConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("malformed section header", path, lineno)
            section = stripped[1:-1].strip()
            if section not in RunConfig.SECTIONS:
                raise ConfigError(f"unknown section [{section}]", path, lineno)
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError("expected key = value", path, lineno)
        if section is None:
            raise ConfigError("key outside of a section", path, lineno)
        config.set(section, key.strip(), value, path, lineno)
    return config


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)


def apply_override(config: RunConfig, assignment: str) -> None:
    """Apply a ``section.key=value`` command-line override."""
    lhs, sep, value = assignment.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    config.set(section, key, value)
