"""
Experiment configuration: YAML in, validated frozen dataclasses out.

Every section has explicit defaults; ``to_dict`` returns the effective
configuration so records never depend on the file that was loaded.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np
import yaml

from ..bnn import BnnConfig, HmcSettings
from ..bo import BoConfig
from ..errors import ConfigError
from ..gp import FitOptions
from ..neural_cost import ParamLayout
from ..plant_mpc import FAILURE_COST, X_INIT, CartPoleConstants, EvalWeights, OcpConfig

SURROGATES = ("random", "matern_gp", "bnn", "ibnn")


@dataclass(frozen=True)
class SearchBox:
    """Affine map from the unit box to raw cost parameters.

    q and r entries (pre-softplus) live in [-q_bound, q_bound]; network
    weights and biases in [-weight_bound, weight_bound].
    """

    q_bound: float = 3.0
    weight_bound: float = 1.0

    def __post_init__(self):
        if not (self.q_bound > 0 and self.weight_bound > 0):
            raise ConfigError("search box bounds must be > 0")

    def bounds(self, layout: ParamLayout):
        n_qr = layout.n_x + layout.n_u
        hi = np.r_[np.full(n_qr, self.q_bound), np.full(layout.n_network, self.weight_bound)]
        return -hi, hi

    def to_raw(self, z, layout: ParamLayout) -> np.ndarray:
        lo, hi = self.bounds(layout)
        return lo + (hi - lo) * np.asarray(z, dtype=float)


@dataclass(frozen=True)
class EvalSettings:
    M: int = 80
    tail_start: int = 70
    x_init: Tuple[float, ...] = X_INIT
    failure_cost: float = FAILURE_COST

    def __post_init__(self):
        object.__setattr__(self, "x_init", tuple(float(v) for v in self.x_init))
        if self.M < 1 or not 0 <= self.tail_start <= self.M:
            raise ConfigError("need M >= 1 and 0 <= tail_start <= M")

    def weights(self) -> EvalWeights:
        return EvalWeights(tail_start=self.tail_start)


@dataclass(frozen=True)
class GpSettings:
    n_starts: int = 16
    n_iters: int = 50
    ibnn_depth: int = 3
    ibnn_centered: bool = True  # NNGP kernel sees (2 theta - 1) * sqrt(3)

    def fit_options(self) -> FitOptions:
        return FitOptions(n_starts=self.n_starts, n_iters=self.n_iters)


@dataclass(frozen=True)
class BnnSettings:
    hidden_sizes: Tuple[int, ...] = (64, 64)
    prior_variance: float = 1.0
    likelihood_noise: float = 0.1
    n_samples: int = 200
    n_burnin: int = 200
    n_leapfrog: int = 20
    thinning: int = 5
    step_size: float = 0.01
    max_params: int = 600  # bnn cells are skipped above this parameter count

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def config(self) -> BnnConfig:
        hmc = HmcSettings(step_size=self.step_size, n_leapfrog=self.n_leapfrog,
                          n_burnin=self.n_burnin, thinning=self.thinning)
        return BnnConfig(hidden_sizes=self.hidden_sizes, prior_variance=self.prior_variance,
                         likelihood_noise=self.likelihood_noise, n_samples=self.n_samples, hmc=hmc)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    surrogates: Tuple[str, ...] = SURROGATES
    hidden_width: int = 5
    n_seeds: int = 21
    master_seed: int = 0
    output_dir: str = "runs/experiment"
    bo: BoConfig = field(default_factory=BoConfig)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    plant: CartPoleConstants = field(default_factory=CartPoleConstants)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    search_box: SearchBox = field(default_factory=SearchBox)
    gp: GpSettings = field(default_factory=GpSettings)
    bnn: BnnSettings = field(default_factory=BnnSettings)

    def __post_init__(self):
        object.__setattr__(self, "surrogates", tuple(self.surrogates))
        unknown = [s for s in self.surrogates if s not in SURROGATES]
        if unknown:
            raise ConfigError(f"unknown surrogates {unknown}; choose from {list(SURROGATES)}")
        if len(set(self.surrogates)) != len(self.surrogates):
            raise ConfigError("surrogates must not repeat")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(4, 1, (self.hidden_width, self.hidden_width))

    def bnn_allowed(self) -> bool:
        return self.layout.n_theta <= self.bnn.max_params

    def replace(self, **changes) -> "ExperimentConfig":
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        d["bo"].pop("seed", None)  # per-cell seeds derive from master_seed
        return d


_SECTIONS = {
    "bo": BoConfig,
    "ocp": OcpConfig,
    "plant": CartPoleConstants,
    "evaluation": EvalSettings,
    "search_box": SearchBox,
    "gp": GpSettings,
    "bnn": BnnSettings,
}
_TUPLE_FIELDS = {"u_min", "u_max", "x_min", "x_max", "x_init", "hidden_sizes", "surrogates"}


def _plain(obj):
    """Tuples to lists, numpy scalars to Python floats (YAML/JSON friendly)."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build(cls, values, where):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is BoConfig:
        names.discard("seed")  # seeds come from master_seed
    extra = sorted(set(values) - names)
    if extra:
        raise ConfigError(f"unknown keys in {where!r}: {extra}")
    kwargs = {}
    for k, v in values.items():
        if k in _TUPLE_FIELDS:
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"{where}.{k} must be a list")
            v = tuple(float(x) if k != "hidden_sizes" else int(x) for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    extra = sorted(set(data) - top)
    if extra:
        raise ConfigError(f"unknown top-level keys: {extra}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS:
            kwargs[k] = _build(_SECTIONS[k], v, k)
        elif k == "surrogates":
            if isinstance(v, str):
                v = [s.strip() for s in v.split(",") if s.strip()]
            kwargs[k] = tuple(v or ())
        else:
            kwargs[k] = v
    for k in ("hidden_width", "n_seeds", "master_seed"):
        if k in kwargs and (isinstance(kwargs[k], bool) or not isinstance(kwargs[k], int)):
            raise ConfigError(f"{k} must be an integer")
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
