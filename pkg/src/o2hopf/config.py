"""Run configuration: a nested YAML document mapped onto dataclasses.

Every tolerance used by the numerical modules has a field here with the
module default.  Loading walks the composed YAML node tree so that unknown
keys and type errors are reported with their line and column.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import InvalidInput, IoError, ParseError

COMMANDS = ("profile", "spectrum", "evans", "crossing", "energy-check", "reduce", "bifurcate", "verify",
            "selftest")


@dataclass
class ModelConfig:
    id: str = "M1"
    params: Dict[str, Any] = field(default_factory=dict)
    # M0 only: retune the activator gain so the crossing sits at eps = 0 on this grid
    tune: bool = True


@dataclass
class GridConfig:
    L: float = 20.0
    N1: int = 161
    K: int = 4
    dt: float = 0.05


@dataclass
class SweepConfig:
    base: float = 0.0
    values: List[float] = field(default_factory=list)
    crossing_interval: List[float] = field(default_factory=lambda: [-0.2, 0.2])
    k_star: int = 1


@dataclass
class SpectrumConfig:
    modes: List[int] = field(default_factory=lambda: [0, 1])
    region: List[float] = field(default_factory=lambda: [-1.0, 0.5, -3.0, 3.0])
    method: str = "auto"
    nev: int = 12


@dataclass
class ContourConfig:
    shape: str = "circle"
    k: int = 0
    center: List[float] = field(default_factory=lambda: [0.5, 0.0])
    radius: float = 0.25
    bounds: List[float] = field(default_factory=list)
    points: int = 32


@dataclass
class EvansConfig:
    L: float = 12.0
    gap_lemma: bool = False
    contours: List[ContourConfig] = field(default_factory=lambda: [ContourConfig()])


@dataclass
class EnergyConfig:
    base_amplitude: float = 1e-2
    halvings: int = 3
    amplitudes: List[float] = field(default_factory=lambda: [1e-3, 2e-3, 5e-3, 1e-2])
    T: float = 1.0
    s: int = 1


@dataclass
class ToleranceConfig:
    profile: float = 1e-10
    profile_endstate: float = 1e-8
    profile_max_iter: int = 50
    eigen_residual: float = 1e-8
    evans_rtol: float = 1e-10
    evans_atol: float = 1e-12
    evans_root: float = 1e-8
    evans_max_points: int = 4096
    crossing: float = 1e-10
    crossing_d_eps: float = 1e-4
    crossing_max_iter: int = 100
    symmetry: float = 1e-8
    picard: float = 1e-10
    picard_max: int = 100
    null_tol: float = 1e-4
    cond_max: float = 1e10
    smallness: float = 0.5
    fit_sample_radius: float = 0.05
    fit_samples: int = 4
    fit_spurious: float = 1e-3
    fit_picard: float = 1e-13
    fit_max_halvings: int = 4
    fit_quintic_limit: float = 0.1
    fit_recovery: float = 0.02
    genericity: float = 1e-10
    newton: float = 1e-8
    newton_max_iter: int = 20
    newton_fd_step: float = 1e-6
    return_residual: float = 1e-5
    speed: float = 0.1
    exponent: float = 0.05


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    eps: SweepConfig = field(default_factory=SweepConfig)
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    evans: EvansConfig = field(default_factory=EvansConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    output_dir: str = "o2hopf-out"
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, command: Optional[str] = None) -> None:
        """Semantic checks that do not depend on running anything."""
        if self.model.id not in ("M0", "M1"):
            raise InvalidInput(f"model.id must be M0 or M1, got {self.model.id!r}")
        if len(self.eps.crossing_interval) != 2 or not self.eps.crossing_interval[0] < self.eps.crossing_interval[1]:
            raise InvalidInput("eps.crossing_interval must be [lo, hi] with lo < hi")
        if len(self.spectrum.region) != 4:
            raise InvalidInput("spectrum.region must be [re_min, re_max, im_min, im_max]")
        for c in self.evans.contours:
            if c.shape not in ("circle", "rectangle"):
                raise InvalidInput(f"contour shape must be circle or rectangle, got {c.shape!r}")
            if c.shape == "rectangle" and len(c.bounds) != 4:
                raise InvalidInput("rectangle contours need bounds [re_min, re_max, im_min, im_max]")
            if c.shape == "circle" and (len(c.center) != 2 or c.radius <= 0):
                raise InvalidInput("circle contours need center [re, im] and a positive radius")
        if self.threads < 1:
            raise InvalidInput("threads must be at least 1")
        if command is not None and command not in COMMANDS:
            raise InvalidInput(f"unknown command {command!r}")
        if command == "bifurcate":
            if not self.eps.values:
                raise InvalidInput("eps.values is empty; bifurcate needs at least one eps")
            if any(e == 0 for e in self.eps.values):
                raise InvalidInput("eps.values must not contain 0")
        if command in ("crossing", "reduce", "bifurcate") and self.model.id != "M0":
            raise InvalidInput(f"{command} needs a model with a Hopf crossing (M0)")


# --------------------------------------------------------------------------
# YAML <-> dataclasses


def _where(node):
    m = node.start_mark
    return m.line + 1, m.column + 1


def _fail(msg, node, key=None):
    line, col = _where(node)
    raise ParseError(msg, key=key, line=line, column=col)


def _scalar(node, path=None):
    return yaml.safe_load(yaml.serialize(node))


def _convert(tp, node, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, node, path)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(node, yaml.SequenceNode):
            _fail(f"{path} must be a list", node, path)
        return [_convert(item, n, f"{path}[{i}]") for i, n in enumerate(node.value)]
    if origin is dict:
        if not isinstance(node, yaml.MappingNode):
            _fail(f"{path} must be a mapping", node, path)
        return _scalar(node, path)
    if origin is Union:  # Optional[...]
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        value = _scalar(node, path)
        return None if value is None else _convert(args[0], node, path)
    value = _scalar(node, path)
    if tp is bool:
        if not isinstance(value, bool):
            _fail(f"{path} must be true or false", node, path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(f"{path} must be an integer", node, path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(f"{path} must be a number", node, path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            _fail(f"{path} must be a string", node, path)
        return value
    return value


def _build(cls, node, path: str = ""):
    if not isinstance(node, yaml.MappingNode):
        _fail(f"{path or 'document'} must be a mapping", node, path or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for knode, vnode in node.value:
        key = knode.value
        full = f"{path}.{key}" if path else key
        if key not in names:
            _fail(f"unknown key {full!r}", knode, full)
        if key in kwargs:
            _fail(f"duplicate key {full!r}", knode, full)
        kwargs[key] = _convert(hints[key], vnode, full)
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        m = exc.problem_mark
        raise ParseError(f"invalid YAML: {exc.problem}", line=m.line + 1 if m else None,
                         column=m.column + 1 if m else None) from None
    if node is None:
        return RunConfig()
    return _build(RunConfig, node)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=False)


def save_config(config: RunConfig, path) -> None:
    try:
        Path(path).write_text(dump_config(config))
    except OSError as exc:
        raise IoError(f"cannot write config {path}: {exc.strerror}") from None
