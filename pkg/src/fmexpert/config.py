"""Run configuration: a JSON object validated against dataclass schemas.

Every section is checked before anything runs; unknown keys are rejected
with their full dotted path. See ``configs/README.md`` for the schema.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from fmexpert.encoder import EncoderConfig
from fmexpert.foundation import ConfigError
from fmexpert.stream import StreamConfig

EXPERIMENTS = ("transfer", "ablation", "generalization")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_requests: int = 64


@dataclass(frozen=True)
class ExpertSpec:
    short_d: int = 16
    short_layers: int = 1
    short_history: int = 8
    fusion_hidden: int = 32
    fusion_out: int = 16
    expert_hidden: int = 32
    noise_std: float = 0.0
    dropout: float = 0.0
    lr: float = 2e-3
    batch_requests: int = 32
    missing_join: str = "skip"


@dataclass(frozen=True)
class SyncConfig:
    fraction: float = 0.3
    period: float = 1800.0


@dataclass(frozen=True)
class TransferConfig:
    surface: int = 0
    donor_fraction: float = 0.5
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class AblationConfig:
    surface: int = 0
    ue_refresh_events: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class GeneralizationConfig:
    surface: int = 3
    fm_aux_task: str = "surface_D_task_5"
    withheld: tuple[str, ...] = ("surface_D_task_1", "surface_D_task_2", "surface_D_task_3", "surface_D_task_4")
    fm_downsample: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class LoggingConfig:
    write_events: bool = True
    write_embeddings: bool = True
    batch_size: int = 4096
    capacity: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    stream: StreamConfig = field(default_factory=StreamConfig)
    fm_small: EncoderConfig = field(default_factory=lambda: EncoderConfig(d=32, n_layers=1, max_history=16))
    fm_large: EncoderConfig = field(default_factory=lambda: EncoderConfig(d=64, n_layers=3, max_history=48))
    fm_train: TrainConfig = field(default_factory=TrainConfig)
    expert: ExpertSpec = field(default_factory=ExpertSpec)
    sync: SyncConfig = field(default_factory=SyncConfig)
    join_latency: float = 1800.0
    holdout_fraction: float = 0.2
    downsample: dict[int, float] = field(default_factory=dict)
    experiments: tuple[str, ...] = EXPERIMENTS
    transfer: TransferConfig = field(default_factory=TransferConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    generalization: GeneralizationConfig = field(default_factory=GeneralizationConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def stream_config(self) -> StreamConfig:
        return replace(self.stream, seed=self.seed)


_SECTIONS = {
    "stream": StreamConfig, "fm_small": EncoderConfig, "fm_large": EncoderConfig, "fm_train": TrainConfig,
    "expert": ExpertSpec, "sync": SyncConfig, "transfer": TransferConfig, "ablation": AblationConfig,
    "generalization": GeneralizationConfig, "logging": LoggingConfig,
}
_TUPLES = {"experiments", "withheld", "seeds", "aux_tasks_per_surface", "surface_shares"}


def _build(cls, obj, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"config section '{path or 'root'}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in obj.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key '{where}'")
        if cls is RunConfig and key == "stream" and isinstance(val, dict) and "seed" in val:
            raise ConfigError("unknown config key 'stream.seed' (use the top-level seed)")
        if cls is RunConfig and key in _SECTIONS:
            val = _build(_SECTIONS[key], val, where)
        elif key == "downsample":
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must map surface id to fraction")
            try:
                val = {int(k): float(v) for k, v in val.items()}
            except (TypeError, ValueError):
                raise ConfigError(f"'{where}' must map surface id to fraction") from None
        elif key in _TUPLES and val is not None:
            if not isinstance(val, list):
                raise ConfigError(f"'{where}' must be a list")
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"config section '{path or 'root'}': {e}") from None


def _check_types(cfg, path: str = "") -> None:
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        where = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(v):
            _check_types(v, where)
            continue
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"'{where}' must be a boolean")
        if isinstance(default, int) and not isinstance(default, bool) and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"'{where}' must be an integer")
        if isinstance(default, float) and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"'{where}' must be a number")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"'{where}' must be a string")


def validate(cfg: RunConfig) -> RunConfig:
    _check_types(cfg)
    s = cfg.stream_config()
    names = set(s.task_names)
    if not 0.0 < cfg.sync.fraction <= 1.0:
        raise ConfigError("'sync.fraction' must be in (0, 1]")
    if cfg.sync.period <= 0:
        raise ConfigError("'sync.period' must be positive")
    if cfg.join_latency < 0:
        raise ConfigError("'join_latency' must be non-negative")
    if not 0.0 < cfg.holdout_fraction < 1.0:
        raise ConfigError("'holdout_fraction' must be in (0, 1)")
    for sid, frac in cfg.downsample.items():
        if not 0 <= sid < s.n_surfaces:
            raise ConfigError(f"'downsample.{sid}': unknown surface")
        if not 0.0 < frac <= 1.0:
            raise ConfigError(f"'downsample.{sid}' must be in (0, 1]")
    bad = [e for e in cfg.experiments if e not in EXPERIMENTS]
    if bad:
        raise ConfigError(f"'experiments': unknown experiment(s) {bad}")
    for sec in (cfg.transfer, cfg.ablation, cfg.generalization):
        if not 0 <= sec.surface < s.n_surfaces:
            raise ConfigError(f"experiment surface {sec.surface} outside 0..{s.n_surfaces - 1}")
    if not 0.0 < cfg.transfer.donor_fraction < 1.0 - cfg.holdout_fraction:
        raise ConfigError("'transfer.donor_fraction' must leave a non-empty warm-start window")
    g = cfg.generalization
    if g.fm_aux_task not in names:
        raise ConfigError(f"'generalization.fm_aux_task': unknown task {g.fm_aux_task!r}")
    unknown = [t for t in g.withheld if t not in names]
    if unknown:
        raise ConfigError(f"'generalization.withheld': unknown task(s) {unknown}")
    if g.fm_aux_task in g.withheld:
        raise ConfigError("'generalization.fm_aux_task' cannot also be withheld")
    scope = s.task_surface()
    if any(scope[t] != g.surface for t in (*g.withheld, g.fm_aux_task)):
        raise ConfigError("generalization tasks must belong to the generalization surface")
    if not 0.0 < g.fm_downsample <= 1.0:
        raise ConfigError("'generalization.fm_downsample' must be in (0, 1]")
    for name, sec in (("transfer", cfg.transfer), ("ablation", cfg.ablation), ("generalization", g)):
        if not sec.seeds:
            raise ConfigError(f"'{name}.seeds' must not be empty")
    e = cfg.expert
    if e.missing_join not in ("skip", "zero"):
        raise ConfigError("'expert.missing_join' must be 'skip' or 'zero'")
    if e.short_history < 0 or e.batch_requests <= 0 or cfg.fm_train.batch_requests <= 0:
        raise ConfigError("history lengths and batch sizes must be non-negative / positive")
    if not (0.0 <= e.dropout < 1.0 and e.noise_std >= 0.0):
        raise ConfigError("'expert.dropout' must be in [0, 1) and 'expert.noise_std' >= 0")
    return cfg


def from_dict(obj) -> RunConfig:
    return validate(_build(RunConfig, obj, ""))


def load(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return from_dict(obj)


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    if isinstance(cfg, RunConfig):
        d["stream"].pop("seed")
        d["downsample"] = {str(k): v for k, v in cfg.downsample.items()}
    return d


def expert_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["tasks"] = [{"name": t.name, "kind": t.kind, "surface_scope": sorted(t.surface_scope), "weight": t.weight}
                  for t in cfg.tasks]
    return d


def expert_from_dict(obj):
    from fmexpert.expert import ExpertConfig
    from fmexpert.foundation import TaskSpec

    if not isinstance(obj, dict):
        raise ConfigError("expert config must be an object")
    obj = dict(obj)
    try:
        obj["tasks"] = tuple(TaskSpec(t["name"], t.get("kind", "main"), frozenset(t.get("surface_scope", ())),
                                      float(t.get("weight", 1.0))) for t in obj["tasks"])
        if "short_encoder" in obj:
            obj["short_encoder"] = _build(EncoderConfig, obj["short_encoder"], "expert.short_encoder")
        obj["embedding_inputs"] = tuple(obj.get("embedding_inputs", ("tae",)))
        return _build(ExpertConfig, obj, "expert")
    except (KeyError, TypeError) as e:
        raise ConfigError(f"bad expert config: {e}") from None
