"""Run configuration and seed derivation."""
from __future__ import annotations

import dataclasses
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .volume.types import BT_RECIPE, WML_RECIPE, FeatureRecipe

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *labels) -> int:
    """Per-phase seed: fold each label's CRC32 into a splitmix64 chain from ``master``."""
    state = splitmix64(int(master) & MASK64)
    for label in labels:
        state = splitmix64(state ^ zlib.crc32(str(label).encode()))
    return state


@dataclass
class StudyConfig:
    """One simulated study: a scanner appearance per channel plus population priors."""

    name: str
    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    bias_amplitude: float = 0.0
    bias_scale: float = 40.0
    noise_sigma: float = 0.02
    prior_shift: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    lesion_fraction: float = 0.0
    lesion_fraction_spread: float = 0.0
    invert: bool = False
    channel_gamma: dict = field(default_factory=dict)
    images: Optional[int] = None
    matches: List[str] = field(default_factory=list)


@dataclass
class SimulationConfig:
    dims: List[int] = field(default_factory=lambda: [32, 32, 32])
    spacing: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    images_per_study: int = 6
    wobble: float = 0.15
    tissue_noise: float = 0.04
    fraction_jitter: float = 0.1
    studies: List[StudyConfig] = field(default_factory=list)


def default_studies(task):
    """Studies A and B share a scanner look; C differs in contrast and population."""
    if task == "wml":
        return [
            StudyConfig("A", gamma=1.0, noise_sigma=0.02, lesion_fraction=0.03, matches=["B"]),
            StudyConfig("B", gamma=1.1, noise_sigma=0.02, lesion_fraction=0.02, matches=["A"]),
            StudyConfig("C", gamma=2.5, noise_sigma=0.01, lesion_fraction=0.004, prior_shift=[0.3, 1.0, 1.2]),
        ]
    return [
        StudyConfig("A", gamma=1.0, noise_sigma=0.02, matches=["B"]),
        StudyConfig("B", gamma=1.1, noise_sigma=0.02, matches=["A"]),
        StudyConfig("C", gamma=2.5, noise_sigma=0.01, prior_shift=[0.3, 1.0, 1.2]),
    ]


@dataclass
class RunConfig:
    task: str = "bt"
    seed: int = 0
    seeds: List[int] = field(default_factory=list)
    tree_count: int = 100
    mtry: Optional[int] = None
    p: float = 10.0
    measure: str = "bag"
    direction: str = "t2s"
    measures: List[str] = field(default_factory=lambda: ["sup", "clu", "div", "bag"])
    directions: List[str] = field(default_factory=lambda: ["t2s", "s2t", "avg"])
    train_count: int = 10000
    eval_count: int = 50000
    distance_count: int = 2000
    gate_threshold: Optional[float] = None
    oversample_factor: float = 1.0
    source_pool: str = "different_study"
    p_grid: List[float] = field(default_factory=lambda: [1, 2, 5, 10, 20, 50])
    threads: int = 1
    knn_method: str = "brute"
    scales: Optional[List[float]] = None
    include_position: Optional[bool] = None
    channels: Optional[List[str]] = None
    designated_channel: Optional[int] = None
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    source_text: str = ""

    def __post_init__(self):
        if self.task not in ("bt", "wml", "custom"):
            raise ValueError(f"task must be bt, wml or custom, got {self.task!r}")
        for name in ("tree_count", "train_count", "eval_count", "distance_count", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.p < 0:
            raise ValueError("p must be >= 0")
        if self.source_pool not in ("different_study", "all_others"):
            raise ValueError("source_pool must be different_study or all_others")
        if self.task == "wml":
            if self.gate_threshold is None:
                self.gate_threshold = 0.75
            if self.oversample_factor == 1.0:
                self.oversample_factor = 10.0
        if not self.simulation.studies:
            self.simulation.studies = default_studies(self.task)
        if self.task == "custom" and self.channels is None:
            raise ValueError("custom task needs explicit channels/scales")
        if not self.seeds:
            self.seeds = [self.seed]

    @property
    def recipe(self) -> FeatureRecipe:
        base = WML_RECIPE if self.task == "wml" else BT_RECIPE
        return FeatureRecipe(
            scales=tuple(self.scales) if self.scales is not None else base.scales,
            include_position=base.include_position if self.include_position is None else self.include_position,
            channels=tuple(self.channels) if self.channels is not None else base.channels,
            designated_channel=base.designated_channel if self.designated_channel is None else self.designated_channel,
        )

    @property
    def class_names(self):
        return ("non-WML", "WML") if self.task == "wml" else ("CSF", "GM", "WM")

    def replace(self, **changes) -> "RunConfig":
        changes.setdefault("source_text", "")
        return dataclasses.replace(self, **changes)


def _build(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict, source_text="") -> RunConfig:
    data = dict(data)
    sim = dict(data.pop("simulation", {}))
    studies = [_build(StudyConfig, s, "study") for s in sim.pop("studies", [])]
    simulation = _build(SimulationConfig, {**sim, "studies": studies}, "simulation")
    return _build(RunConfig, {**data, "simulation": simulation, "source_text": source_text}, "config")


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    return config_from_dict(tomllib.loads(text), source_text=text)


def snapshot(config: RunConfig) -> str:
    """The config text as given, or a TOML rendering when built in code."""
    if config.source_text:
        return config.source_text
    return dumps_toml(config)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot render {type(v)}")


def dumps_toml(config: RunConfig) -> str:
    d = dataclasses.asdict(config)
    d.pop("source_text")
    sim = d.pop("simulation")
    studies = sim.pop("studies")
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if v is not None]
    lines.append("")
    lines.append("[simulation]")
    lines += [f"{k} = {_toml_value(v)}" for k, v in sim.items() if v is not None]
    for s in studies:
        lines.append("")
        lines.append("[[simulation.studies]]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in s.items() if v is not None]
    return "\n".join(lines) + "\n"
