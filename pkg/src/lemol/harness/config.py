"""Experiment configuration as flat INI sections with typed keys.

Sections: ``[experiment]``, ``[env]``, ``[train]``, ``[om]``. Every key maps
to a dataclass field; its type comes from the field's default. Unknown
sections or keys are rejected with the offending line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import re
from dataclasses import dataclass, field, fields, replace

from ..agent import AgentVariant, RunConfig
from ..keepaway import EnvConfig
from ..maddpg import TrainHyper
from ..opponent_model import OmHyper


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field_name = field_name


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0..4"`` (inclusive), ``"3"`` or ``"0,2,5"``."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\s*\.\.\s*(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    seeds = tuple(int(s) for s in text.split(",") if s.strip())
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def render_seeds(seeds: tuple[int, ...]) -> str:
    if len(seeds) > 1 and seeds == tuple(range(seeds[0], seeds[-1] + 1)):
        return f"{seeds[0]}..{seeds[-1]}"
    return ",".join(str(s) for s in seeds)


@dataclass(frozen=True)
class ExperimentSection:
    variant: str = "lemol-ep"
    episodes: int = 61024
    seeds: tuple[int, ...] = tuple(range(15))
    output_dir: str = "lemol_out"
    om_trajectories: int = 15
    plot_window: int = 50

    def __post_init__(self):
        AgentVariant.parse(self.variant)
        if self.episodes < 1:
            raise ValueError("episodes must be positive")
        if self.om_trajectories < 0:
            raise ValueError("om_trajectories must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    om: OmHyper = field(default_factory=OmHyper)

    @property
    def variant(self) -> AgentVariant:
        return AgentVariant.parse(self.experiment.variant)

    def run_config(self) -> RunConfig:
        return RunConfig(self.experiment.episodes, self.env, self.train, self.om)

    def with_variant(self, variant: str | AgentVariant) -> "ExperimentConfig":
        label = variant.label if isinstance(variant, AgentVariant) else AgentVariant.parse(variant).label
        return replace(self, experiment=replace(self.experiment, variant=label))

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seeds=tuple(seeds)))

    def with_output(self, path) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, output_dir=str(path)))

    def hash(self) -> str:
        """Content hash of everything that affects results (the output location does not)."""
        text = render_config(self.with_output(ExperimentSection().output_dir))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def full_config() -> ExperimentConfig:
    return ExperimentConfig()


def desk_config() -> ExperimentConfig:
    """Scaled-down preset that fits one commodity core."""
    c = ExperimentConfig()
    return replace(
        c,
        experiment=replace(c.experiment, episodes=2000, seeds=tuple(range(5)), om_trajectories=4),
        train=replace(c.train, hidden=32, buffer_capacity=100_000),
        om=replace(c.om, chunk_length=250, epochs=10),
    )


PRESETS = {"full": full_config, "desk": desk_config}


def _render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return render_seeds(v)
    return str(v)


def render_config(config: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        section = getattr(config, name)
        out.append(f"[{name}]")
        for f in fields(section):
            out.append(f"{f.name} = {_render_value(getattr(section, f.name))}")
        out.append("")
    return "\n".join(out)


def _parse_value(default, text: str):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return parse_seeds(text)
    return text.strip()


def _line_index(text: str) -> dict[tuple[str | None, str | None], int]:
    """(section, key) -> 1-based line number; key None marks the section header."""
    index: dict[tuple[str | None, str | None], int] = {}
    section = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            index.setdefault((section, None), i)
        elif "=" in line:
            index.setdefault((section, line.split("=", 1)[0].strip().lower()), i)
    return index


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Keys not mentioned keep the values of ``base`` (the full-scale preset by default)."""
    base = base or full_config()
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    updates = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", lines.get((sec, None)))
        current = getattr(base, sec)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        values = {}
        for key, raw in parser.items(sec):
            line = lines.get((sec, key))
            if key not in known:
                raise ConfigError(f"unknown key in [{sec}]", line, key)
            try:
                values[key] = _parse_value(known[key], raw)
            except ValueError as exc:
                raise ConfigError(str(exc), line, key) from None
        try:
            updates[sec] = replace(current, **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{sec}] {exc}", lines.get((sec, None))) from None
    return replace(base, **updates)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)


def config_fields() -> dict[str, list[str]]:
    return {name: [f.name for f in dataclasses.fields(getattr(ExperimentConfig(), name))] for name in SECTIONS}
