"""Run configuration: TOML in, validated dataclasses out.

Every file is checked against ``config_schema.json`` before any value is
used. Optional adapt settings left unset resolve to shot-dependent or
resolution-dependent defaults; :meth:`RunConfig.effective` spells them out.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adversarial import AdversarialConfig
from .compression import ModulationSchedule
from .generator import DiscriminatorConfig, GeneratorConfig
from .structural import ResolutionPolicy, StructuralLossConfig

# shots -> (batch size, iteration budget)
SHOT_BUDGETS = {10: (4, 2500), 5: (4, 2000), 1: (1, 1250)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    z_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 3
    resolution: int = 32

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(z_dim=self.z_dim, w_dim=self.w_dim, resolution=self.resolution,
                               mapping_layers=self.mapping_layers)

    def discriminator(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(resolution=self.resolution)


@dataclass(frozen=True)
class DataSection:
    family: str = "shapes"
    source_count: int = 4000
    source_seed: int = 0
    target_style: str = "palette"
    target_count: int = 10
    target_seed: int = 1000


@dataclass(frozen=True)
class PretrainSection:
    iterations: int = 20000
    batch_size: int = 16
    g_lr: float = 2e-3
    d_lr: float = 2e-3
    betas: tuple[float, float] = (0.0, 0.99)
    r1_gamma: float = 0.1
    r1_interval: int = 16
    pl_weight: float = 2.0
    pl_interval: int = 8
    pl_decay: float = 0.99
    min_images: int = 2000
    checkpoint_every: int = 5000
    log_every: int = 100

    def adversarial(self) -> AdversarialConfig:
        return AdversarialConfig(r1_gamma=self.r1_gamma, r1_interval=self.r1_interval, pl_weight=self.pl_weight,
                                 pl_interval=self.pl_interval, pl_decay=self.pl_decay)


@dataclass(frozen=True)
class AdaptSection:
    mode: str = "rssa"
    shots: int = 10
    iterations: int | None = None
    batch_size: int | None = None
    batch_mode: str = "disturbance"
    g_lr: float = 1.6e-4
    d_lr: float = 1.8e-4
    betas: tuple[float, float] = (0.0, 0.99)
    alpha: float = 1.0
    beta: float = 1.0
    radius_ratio: float = 0.2
    # neighbours per anchor; in disturbance mode this is always batch_size - 1
    disturbance_n: int | None = None
    smooth_l1_transition: float = 1.0
    scc_global_max: int | None = None
    scc_pool: int | None = None
    scc_patch: int | None = None
    dcc_max_res: int | None = None
    dcc_window_ratio: float = 0.25
    dcc_window: int | None = None
    pairs: str = "all"
    projection: bool = True
    schedule: tuple[float, ...] | None = None
    lam: float = 1e-6
    inversion_steps: int = 500
    inversion_lr: float = 0.01
    inversion_mean_samples: int = 10000
    image_weight: float = 1.0
    patch_weight: float = 1.0
    r1_gamma: float = 10.0
    r1_interval: int = 16
    pl_weight: float = 2.0
    pl_interval: int = 8
    pl_decay: float = 0.99
    scs_every: int = 500
    scs_samples: int = 100
    checkpoint_every: int = 500

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        if self.shots not in SHOT_BUDGETS:
            raise ConfigError(f"no default batch size for {self.shots}-shot; set adapt.batch_size")
        return SHOT_BUDGETS[self.shots][0]

    @property
    def effective_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        if self.shots not in SHOT_BUDGETS:
            raise ConfigError(f"no default iteration budget for {self.shots}-shot; set adapt.iterations")
        return SHOT_BUDGETS[self.shots][1]

    @property
    def neighbours(self) -> int:
        if self.batch_mode == "disturbance":
            return self.effective_batch_size - 1
        return 3 if self.disturbance_n is None else self.disturbance_n

    @property
    def uses_projection(self) -> bool:
        return self.mode == "rssa" and self.projection

    @property
    def uses_structure(self) -> bool:
        return self.mode == "rssa" and (self.alpha > 0 or self.beta > 0)

    def structural(self, resolution: int) -> StructuralLossConfig:
        policy = ResolutionPolicy.for_output(resolution)
        policy = ResolutionPolicy(
            global_max=self.scc_global_max or policy.global_max,
            pool=self.scc_pool or policy.pool,
            patch=self.scc_patch or policy.patch,
        )
        alpha, beta = (self.alpha, self.beta) if self.mode == "rssa" else (0.0, 0.0)
        return StructuralLossConfig(
            alpha=alpha,
            beta=beta,
            smooth_l1_transition=self.smooth_l1_transition,
            scc_policy=policy,
            dcc_max_res=self.dcc_max_res or resolution // 2,
            dcc_window_ratio=self.dcc_window_ratio,
            dcc_window=self.dcc_window,
            pairs=self.pairs,
        )

    def modulation(self, num_layers: int) -> ModulationSchedule:
        if self.schedule is None:
            return ModulationSchedule.default(num_layers)
        return ModulationSchedule(tuple(self.schedule))

    def adversarial(self) -> AdversarialConfig:
        return AdversarialConfig(image_weight=self.image_weight, patch_weight=self.patch_weight,
                                 r1_gamma=self.r1_gamma, r1_interval=self.r1_interval, pl_weight=self.pl_weight,
                                 pl_interval=self.pl_interval, pl_decay=self.pl_decay)


@dataclass(frozen=True)
class ScsSection:
    samples: int = 500
    seed: int = 0
    detector: str = "sobel"
    projection: bool = True
    # number of leading samples drawn into the optional PNG grid
    grid: int = 8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    scs: ScsSection = field(default_factory=ScsSection)

    def to_dict(self) -> dict:
        return _strip_none(asdict(self))

    def effective(self) -> RunConfig:
        """A copy with every derived default written out explicitly."""
        a = self.adapt
        res = self.model.resolution
        s = a.structural(res)
        L = self.model.generator().num_layers
        adapt = replace(
            a,
            iterations=a.effective_iterations,
            batch_size=a.effective_batch_size,
            disturbance_n=a.neighbours,
            scc_global_max=s.scc_policy.global_max,
            scc_pool=s.scc_policy.pool,
            scc_patch=s.scc_policy.patch,
            dcc_max_res=s.dcc_max_res,
            schedule=a.modulation(L).alphas,
        )
        return replace(self, adapt=adapt)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _strip_none(d: Any) -> Any:
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def schema() -> dict:
    return json.loads(resources.files("rssa").joinpath("config_schema.json").read_text())


_SECTIONS = {"model": ModelSection, "data": DataSection, "pretrain": PretrainSection, "adapt": AdaptSection,
             "scs": ScsSection}


def from_dict(raw: dict) -> RunConfig:
    """Validate ``raw`` against the schema and the cross-field rules, then build a :class:`RunConfig`."""
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    kwargs: dict[str, Any] = {k: raw[k] for k in ("seed", "device") if k in raw}
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        for f in fields(cls):
            if f.name in section and isinstance(section[f.name], list):
                section[f.name] = tuple(section[f.name])
        kwargs[name] = cls(**section)
    cfg = RunConfig(**kwargs)
    _check(cfg)
    return cfg


def _check(cfg: RunConfig) -> None:
    a = cfg.adapt
    try:
        batch = a.effective_batch_size
        a.effective_iterations
        a.adversarial()
        cfg.pretrain.adversarial()
        L = cfg.model.generator().num_layers
        schedule = a.modulation(L)
        a.structural(cfg.model.resolution)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if len(schedule) != L:
        raise ConfigError(f"adapt.schedule has {len(schedule)} entries but the generator has {L} layers")
    if a.batch_mode == "disturbance" and a.disturbance_n is not None and a.disturbance_n != batch - 1:
        raise ConfigError("in disturbance batch mode adapt.disturbance_n must equal batch_size - 1")
    if a.shots > cfg.data.target_count:
        raise ConfigError(f"adapt.shots={a.shots} exceeds data.target_count={cfg.data.target_count}")


def parse_override(item: str) -> tuple[list[str], Any]:
    """``"adapt.iterations=10"`` -> (["adapt", "iterations"], 10), values parsed as TOML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key.strip().split("."), parsed


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides or []:
        keys, value = parse_override(item)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table")
        node[keys[-1]] = value
    return from_dict(raw)
