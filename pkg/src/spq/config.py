"""Flat ``key = value`` run configuration.

One file covers the training, augmentation and loss settings plus data
paths. Unknown keys are rejected; :meth:`RunConfig.echo` writes every
resolved value (defaults included) in a form that parses back identically.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .augment import AugmentConfig
from .errors import ConfigurationError
from .trainer import TrainConfig, coerce_field

PATH_KEYS = ("data", "data_kind", "loss_log", "out")
_TUPLE_INT = {"output_size"}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        train_kw, aug_kw, paths = {}, {}, {}
        train_names = {f.name for f in fields(TrainConfig)}
        aug_names = {f.name for f in fields(AugmentConfig)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in train_names:
                train_kw[key] = coerce_field(TrainConfig, key, value)
            elif key in aug_names:
                aug_kw[key] = _parse_aug(key, value)
            elif key in PATH_KEYS:
                paths[key] = value
            else:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        return cls(TrainConfig(**train_kw), AugmentConfig(**aug_kw), paths)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def with_train(self, **kw) -> "RunConfig":
        return replace(self, train=replace(self.train, **kw))

    def with_paths(self, **kw) -> "RunConfig":
        merged = dict(self.paths)
        merged.update({k: v for k, v in kw.items() if v is not None})
        return replace(self, paths=merged)

    def echo(self) -> str:
        lines = ["# resolved run configuration"]
        for k, v in asdict(self.train).items():
            lines.append(f"{k} = {_fmt(v)}")
        for k, v in asdict(self.augment).items():
            lines.append(f"{k} = {_fmt(v)}")
        for k in PATH_KEYS:
            if k in self.paths:
                lines.append(f"{k} = {self.paths[k]}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_aug(key: str, value: str):
    try:
        if key in _TUPLE_INT:
            parts = tuple(int(p) for p in value.split(","))
        elif "," in value or key.endswith("_range"):
            parts = tuple(float(p) for p in value.split(","))
        else:
            return float(value)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None
    if len(parts) != 2:
        raise ConfigurationError(f"{key}: expected two comma-separated values")
    return parts
