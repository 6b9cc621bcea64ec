"""Run configuration: one JSON file with a section per module.

Overrides use dotted paths, e.g. ``model.layers=2`` or ``sampler.top_k=50``.
Values are parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .evaluator import EvalConfig
from .model import ModelConfig
from .training import TrainConfig
from .world_sim import SimConfig

CONFIG_ENV = "DRIVELM_CONFIG"
SCHEMA = "drivelm-config/1"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


@dataclass
class DataConfig:
    n_seq: int = 32
    frames: int = 16
    frame_hz: float = 10.0
    flips: bool = True
    profile: str | None = None  # force one speed profile for every scenario


@dataclass
class TokenizerConfig:
    D: int = 256
    S: int = 8
    iters: int = 20
    max_images: int = 4096  # subsample for codebook fitting


@dataclass
class CodecConfig:
    M: int = 16
    lo_pct: float = 1.0
    hi_pct: float = 99.0


@dataclass
class SamplingConfig:
    temperature: float = 1.0
    top_k: int | None = None
    greedy: bool = False


@dataclass
class RolloutSection:
    window_generate: int = 16
    window_condition: int = 8
    total_frames: int = 64


@dataclass(frozen=True)
class EvalSection(EvalConfig):
    n_scenarios: int = 64
    seed_offset: int = 1_000_000  # held-out scenarios never overlap training seeds


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplingConfig = field(default_factory=SamplingConfig)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------ derived
    @property
    def tokens_per_frame(self) -> int:
        return (self.sim.height // self.tokenizer.S) * (self.sim.width // self.tokenizer.S) + 3

    @property
    def vocab(self) -> int:
        return self.tokenizer.D + 3 * self.codec.M

    def validate(self) -> "RunConfig":
        p = []
        S = self.tokenizer.S
        if S < 1 or self.sim.height % S or self.sim.width % S:
            p.append(f"tokenizer.S={S} must divide sim.height={self.sim.height} and sim.width={self.sim.width}")
        if self.codec.M < 2:
            p.append(f"codec.M={self.codec.M} must be >= 2")
        if self.tokenizer.D < 1:
            p.append(f"tokenizer.D={self.tokenizer.D} must be >= 1")
        if not 0 <= self.codec.lo_pct < self.codec.hi_pct <= 100:
            p.append("codec.lo_pct < codec.hi_pct within [0, 100] required")
        if self.model.vocab != self.vocab:
            p.append(f"model.vocab={self.model.vocab} != tokenizer.D + 3*codec.M = {self.vocab}")
        if p:  # the remaining checks need a sane frame size
            raise ConfigError(p)
        tpf = self.tokens_per_frame
        if self.model.context < self.data.frames * tpf:
            p.append(f"model.context={self.model.context} < data.frames*tokens_per_frame = {self.data.frames * tpf}")
        cap = self.model.context // tpf
        if self.rollout.window_condition >= cap:
            p.append(f"rollout.window_condition={self.rollout.window_condition} must be < context capacity {cap} frames")
        if self.eval.history + self.eval.horizon - 1 > cap:
            p.append(f"eval.history + eval.horizon - 1 = {self.eval.history + self.eval.horizon - 1} frames "
                     f"exceed context capacity {cap}")
        if self.sampler.top_k is not None and not 1 <= self.sampler.top_k <= self.vocab:
            p.append(f"sampler.top_k={self.sampler.top_k} must be in [1, {self.vocab}]")
        if not self.sampler.greedy and not self.sampler.temperature > 0:
            p.append("sampler.temperature must be > 0 unless sampler.greedy")
        if self.data.frames < 2 or self.data.n_seq < 1:
            p.append("data.frames >= 2 and data.n_seq >= 1 required")
        hz_ratio = self.sim.hz / self.data.frame_hz
        if abs(hz_ratio - round(hz_ratio)) > 1e-9:
            p.append(f"data.frame_hz={self.data.frame_hz} must divide sim.hz={self.sim.hz}")
        if (self.eval.history - 1) / self.eval.frame_hz + self.eval.duration > self.sim.duration + 1e-9:
            p.append("eval history + duration exceed sim.duration")
        try:
            self.sim.validate()
        except Exception as exc:  # noqa: BLE001 - report alongside the others
            p.append(f"sim: {exc}")
        if p:
            raise ConfigError(p)
        return self

    # ------------------------------------------------------------ io
    def to_dict(self) -> dict:
        return {"schema": SCHEMA, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError([f"schema {schema!r} != {SCHEMA!r}"])
        return _build(cls, d, "")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError([f"{prefix.rstrip('.') or 'config'} must be an object"])
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError([f"unknown key {prefix}{k}" for k in unknown])
    kw = {}
    for name, val in d.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), val, f"{prefix}{name}.")
        elif isinstance(default, tuple):
            kw[name] = tuple(val)
        else:
            kw[name] = val
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"{prefix.rstrip('.') or 'config'}: {exc}"]) from exc


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Return a copy of ``cfg`` with ``a.b=value`` assignments applied."""
    d = asdict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"override {item!r} is not key=value"])
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError([f"unknown section in override {key!r}"])
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError([f"unknown key in override {key!r}"])
        node[parts[-1]] = val
    return RunConfig.from_dict(d)


def preset(name: str) -> RunConfig:
    """``desk``: 16-frame clips at 10 Hz. ``planning``: 12-frame clips at 2 Hz (4 history + 8 future)."""
    if name == "desk":
        return RunConfig()
    if name == "planning":
        cfg = RunConfig()
        cfg.data = DataConfig(n_seq=512, frames=12, frame_hz=2.0)
        cfg.codec = CodecConfig(M=32)
        cfg.model = dataclasses.replace(cfg.model, vocab=cfg.vocab)
        cfg.model = dataclasses.replace(cfg.model, context=12 * cfg.tokens_per_frame, layers=2)
        cfg.rollout = RolloutSection(window_generate=4, window_condition=8, total_frames=12)
        cfg.train = dataclasses.replace(cfg.train, steps=4000, batch_size=8, lr=1e-3, eval_every=1000)
        return cfg
    raise ConfigError([f"unknown preset {name!r} (known: desk, planning)"])


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                base: RunConfig | None = None) -> RunConfig:
    """Load from ``path`` (or ``$DRIVELM_CONFIG``), apply overrides and validate."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file {p} not found"])
        try:
            cfg = RunConfig.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{p}: {exc}"]) from exc
    else:
        cfg = base or RunConfig()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()
