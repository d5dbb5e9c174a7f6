"""Run configuration: a sectioned ``key = value`` text file.

Sections mirror the pipeline stages (``[run]``, ``[explore]``, ``[sim]``,
``[graph]``, ``[agent]``, ``[eval]``, ``[sweep]``).  Every key has a default,
so an empty file is a valid config.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .agent import AgentConfig, parse_cells
from .errors import ConfigError


@dataclass
class RunSection:
    maze: str = "maze-small"
    seed: int = 0
    out: str = "run"

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class ExploreSection:
    policy: str = "random"
    steps: int = 2000
    noise_sigma: float = 0.0
    episode_length: int = 0  # 0: trajectories end only on goal respawns
    follow_noise: float = 0.2

    def validate(self):
        if self.policy not in ("random", "wall-follow"):
            raise ConfigError("explore.policy must be 'random' or 'wall-follow'")
        if self.steps < 1 or self.episode_length < 0 or self.noise_sigma < 0:
            raise ConfigError("explore.steps must be positive; episode_length, noise_sigma non-negative")
        if not 0.0 <= self.follow_noise <= 1.0:
            raise ConfigError("explore.follow_noise must lie in [0, 1]")


@dataclass
class SimSection:
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    n_pairs: int = 20000
    holdout: float = 0.1
    embed_dim: int = 32
    hidden: int = 64

    def validate(self):
        if min(self.epochs, self.batch, self.n_pairs, self.embed_dim, self.hidden) < 1 or self.lr <= 0:
            raise ConfigError("sim sizes and lr must be positive")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("sim.holdout must lie in (0, 1)")


@dataclass
class GraphSection:
    stride: int = 5
    l_global: int = -1  # -1: round(0.65 N)

    def validate(self):
        if self.stride < 1 or self.l_global < -1:
            raise ConfigError("graph.stride must be >= 1 and graph.l_global >= -1")


@dataclass
class EvalSection:
    max_steps: int = 500
    score_steps: int = -1  # -1: the maze's scoring window
    n_novel_starts: int = 6

    def validate(self):
        if self.max_steps < 1 or self.score_steps < -1 or self.n_novel_starts < 1:
            raise ConfigError("eval.max_steps and eval.n_novel_starts must be positive")


@dataclass
class SweepSection:
    k_values: str = "0,1,3,10,100,1000"
    train: bool = True

    def ks(self) -> list[int]:
        try:
            ks = [int(v) for v in self.k_values.replace(" ", "").split(",") if v]
        except ValueError as exc:
            raise ConfigError(f"bad sweep.k_values {self.k_values!r}") from exc
        if not ks or min(ks) < 0:
            raise ConfigError("sweep.k_values needs non-negative integers")
        return ks

    def validate(self):
        self.ks()


SECTIONS = {
    "run": RunSection,
    "explore": ExploreSection,
    "sim": SimSection,
    "graph": GraphSection,
    "agent": AgentConfig,
    "eval": EvalSection,
    "sweep": SweepSection,
}


def _convert(value: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {value!r} as {type(default).__name__}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    explore: ExploreSection = field(default_factory=ExploreSection)
    sim: SimSection = field(default_factory=SimSection)
    graph: GraphSection = field(default_factory=GraphSection)
    agent: AgentConfig = field(default_factory=AgentConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def set(self, dotted: str, value: str) -> None:
        """Override one option, ``section.key``, from its text form."""
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        obj = getattr(self, sec)
        if key not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown option {key!r} in [{sec}]")
        setattr(obj, key, _convert(value, getattr(obj, key), f"[{sec}] {key}"))

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, value in cp[sec].items():
                cfg.set(f"{sec}.{key}", value)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def parse_cell(text: str) -> tuple[int, int]:
    cells = parse_cells(text)
    if len(cells) != 1:
        raise ConfigError(f"expected one cell x,y, got {text!r}")
    return cells[0]
