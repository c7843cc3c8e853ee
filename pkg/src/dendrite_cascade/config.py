"""Plain-text run configuration.

One ``key = value`` pair per line, ``#`` starts a comment.  Keys are the
field names of the generator, pipeline, architecture, training and patch
sampler settings; ``seed`` drives both data generation and training.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cpdn import CpdnArch
from .errors import ConfigurationError
from .hsr import PatchSamplerConfig
from .pipeline import PipelineConfig, TrainConfig
from .synthgen import SynthConfig

PAPER_EPOCHS = {"epochs1": 100, "epochs2": 100, "epochs_hsr": 50}

SECTIONS = {
    "synth": SynthConfig,
    "pipeline": PipelineConfig,
    "arch": CpdnArch,
    "train": TrainConfig,
    "sampler": PatchSamplerConfig,
}
# fixed by the data layout or derived from ``seed``; not user settable
HIDDEN = {("arch", "in_channels"), ("arch", "out_channels"), ("sampler", "seed"), ("train", "seed")}


def _key_table():
    table = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if (section, f.name) in HIDDEN:
                continue
            if f.name in table:
                raise RuntimeError(f"config key {f.name!r} defined twice")
            table[f.name] = (section, f.name, type(f.default))
    return table


KEYS = _key_table()


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    arch: CpdnArch = field(default_factory=CpdnArch)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: PatchSamplerConfig = field(default_factory=PatchSamplerConfig)

    @property
    def seed(self):
        return self.synth.seed

    def with_values(self, values: dict):
        """New config with ``{key: value}`` overrides applied and validated."""
        per_section = {name: {} for name in SECTIONS}
        for key, value in values.items():
            if key not in KEYS:
                raise ConfigurationError(f"unknown config key {key!r}")
            section, name, kind = KEYS[key]
            per_section[section][name] = _coerce(key, value, kind)
            if key == "seed":
                per_section["train"]["seed"] = per_section[section][name]
        out = {}
        for section in SECTIONS:
            try:
                out[section] = replace(getattr(self, section), **per_section[section])
            except ConfigurationError as exc:
                raise ConfigurationError(f"invalid config: {exc}") from exc
        return RunConfig(**out)

    def with_paper_epochs(self):
        return replace(self, train=replace(self.train, **PAPER_EPOCHS))

    def values(self):
        out = {}
        for key, (section, name, _) in KEYS.items():
            out[key] = getattr(getattr(self, section), name)
        return out


def _coerce(key, value, kind):
    if not isinstance(value, str):
        raw = value
    elif kind is str:
        return value.strip().strip("'\"")
    else:
        try:
            raw = ast.literal_eval(value.strip())
        except (ValueError, SyntaxError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {value!r}") from exc
    try:
        if kind is bool:
            if not isinstance(raw, bool):
                raise TypeError
            return raw
        if kind is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise TypeError
            return int(raw)
        if kind is float:
            if isinstance(raw, bool):
                raise TypeError
            return float(raw)
        if kind is tuple:
            if isinstance(raw, int):
                raw = (raw,)
            return tuple(int(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {key!r}: {value!r} (expected {kind.__name__})") from exc
    return raw


def parse_config(text, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = value
    return (base or RunConfig()).with_values(values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def _fmt_value(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v) if len(v) != 1 else f"{v[0]},"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Effective configuration as parseable text, grouped by section."""
    lines = []
    vals = cfg.values()
    for section in SECTIONS:
        lines.append(f"# {section}")
        for key, (sec, _, _) in KEYS.items():
            if sec == section:
                lines.append(f"{key} = {_fmt_value(vals[key])}")
        lines.append("")
    return "\n".join(lines)


def write_config_echo(cfg: RunConfig, out_dir, name="config.txt"):
    path = Path(out_dir) / name
    path.write_text(format_config(cfg))
    return path
