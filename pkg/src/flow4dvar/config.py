"""Experiment configuration: plain ``key = value`` files, CLI > file > defaults.

Section headers (``[model]`` etc.) are allowed for readability and ignored;
keys must be unique across the file.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, fields

from .control import RegularisationConfig
from .fem import ConfigurationError
from .forward import ModelConfig
from .mesh import BifurcationParams
from .optimize import OptimizerConfig
from .twin import TruthConfig


@dataclass(frozen=True)
class AssimilationConfig:
    # model
    nu: float = 3.5
    dt: float = 0.004625
    T: float = 0.555
    theta: float = 0.5
    sigma: float = 100.0
    beta: float = 1e-3
    swap_outlets: bool = False
    newton_atol: float = 1e-10
    newton_rtol: float = 1e-11
    newton_max_iter: int = 50
    # observations
    operator: str = "inst"
    N: int = 16
    snr: float = math.inf
    seed: int = 0
    quadrature: str = "rectangle"
    # regularisation
    alpha: float = 1e-5
    gamma: float = 1e-5
    anchor_initial_trace: bool = True
    # optimiser
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    ftol_rel: float = 1e-4
    max_iter: int = 100
    max_ls_trials: int = 25
    # twin truth
    inlet_peak: float = 1000.0
    outlet_peak: float = 870.0
    # geometry (mesh-gen and run-study)
    scale: float = 1.0
    edge_length: float = 0.2

    def __post_init__(self):
        if self.operator not in ("inst", "avg"):
            raise ConfigurationError("operator must be inst or avg")
        if self.N < 1:
            raise ConfigurationError("N must be positive")
        if not self.snr > 0:
            raise ConfigurationError("snr must be positive (inf for no noise)")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")

    @property
    def kind(self) -> str:
        return "instantaneous" if self.operator == "inst" else "averaged"

    def model(self) -> ModelConfig:
        return ModelConfig(nu=self.nu, dt=self.dt, T=self.T, theta=self.theta, sigma=self.sigma, beta=self.beta,
                           outlet="out2" if self.swap_outlets else "out1", newton_atol=self.newton_atol,
                           newton_rtol=self.newton_rtol, newton_max_iter=self.newton_max_iter)

    def regularisation(self) -> RegularisationConfig:
        return RegularisationConfig(self.alpha, self.gamma, self.anchor_initial_trace)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(memory=self.memory, c1=self.c1, c2=self.c2, ftol_rel=self.ftol_rel,
                               max_iter=self.max_iter, max_ls_trials=self.max_ls_trials)

    def truth(self) -> TruthConfig:
        # the data are generated with the other outlet under Dirichlet control
        return TruthConfig(self.inlet_peak, self.outlet_peak, "out1" if self.swap_outlets else "out2")

    def geometry(self) -> BifurcationParams:
        return BifurcationParams().scaled(self.scale, self.edge_length)

    def replace(self, **kw) -> "AssimilationConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _coerce(name: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (N, T)
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config parse error: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            if key in out:
                raise ConfigurationError(f"duplicate config key {key!r}")
            out[key] = val
    return out


def load_config_file(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def resolve(file_values: dict | None = None, cli_values: dict | None = None,
            base: AssimilationConfig | None = None) -> AssimilationConfig:
    """Merge defaults, then file values, then CLI values (``None`` means unset)."""
    base = base or AssimilationConfig()
    types = {f.name: f.type for f in fields(AssimilationConfig)}
    merged = {}
    for source in (file_values or {}, {k: v for k, v in (cli_values or {}).items() if v is not None}):
        for key, val in source.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, types[key], val)
    return dataclasses.replace(base, **merged)
