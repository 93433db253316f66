"""JSON experiment configuration with an explicit schema version."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import toyworld as tw
from .pacogrpo import GrpoConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ToyworldParams:
    k_id: int = tw.K_ID
    k_st: int = tw.K_ST
    k_ct: int = tw.K_CT
    tau_c: float = tw.TAU_C
    tau_a: float = tw.TAU_A

    def __post_init__(self):
        # the band layout is baked into the scorer and policy feature maps
        if (self.k_id, self.k_st, self.k_ct, self.tau_c, self.tau_a) != (tw.K_ID, tw.K_ST, tw.K_CT, tw.TAU_C, tw.TAU_A):
            raise ConfigError("toyworld constants are fixed at k_id=4, k_st=2, k_ct=4, tau_c=tau_a=0.5")


@dataclass
class DatasetParams:
    prompts: int = 708
    grids_per_prompt: int = 4
    rows: int = 2
    cols: int = 2
    jitter: float = 0.1
    noise_scale: float = 0.5
    holdout: int = 3136
    resolution: int = 64
    policy: str = "extremes"
    rationale: bool = True


@dataclass
class ScorerParams:
    alpha: float = 0.1
    lr: float = 2e-4
    epochs: int = 20
    batch_size: int = 32
    hidden: int = 64
    max_pairs: int = 0  # 0 = use every pair
    fast: bool = False  # decision token only (alpha = 1, no rationale supervision)


@dataclass
class PolicyParams:
    prompts: int = 64
    train_prompts: int = 32
    steps: int = 2000
    lr: float = 2e-3
    resolution: int = 32
    batch_size: int = 16


@dataclass
class ChannelSpec:
    name: str
    weight: float = 1.0


@dataclass
class AblationParams:
    logtame_weights: list[float] = field(default_factory=lambda: [6.0, 1.0])
    logtame_seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    resolutions: list[int] = field(default_factory=lambda: [64, 32, 16])


@dataclass
class ExperimentConfig:
    seed: int = 0
    version: int = CONFIG_VERSION
    toyworld: ToyworldParams = field(default_factory=ToyworldParams)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    scorer: ScorerParams = field(default_factory=ScorerParams)
    policy: PolicyParams = field(default_factory=PolicyParams)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    channels: list[ChannelSpec] = field(
        default_factory=lambda: [ChannelSpec("consistency", 1.0), ChannelSpec("alignment", 1.0)])
    ablation: AblationParams = field(default_factory=AblationParams)
    eval_every: int = 10

    def to_json(self) -> dict:
        out = asdict(self)
        out["grpo"] = self.grpo.to_json()
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        version = obj.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
        _reject_unknown(cls, obj, "config")
        kw = {k: obj[k] for k in ("seed", "version", "eval_every") if k in obj}
        sections = {"toyworld": ToyworldParams, "dataset": DatasetParams, "scorer": ScorerParams,
                    "policy": PolicyParams, "grpo": GrpoConfig, "ablation": AblationParams}
        try:
            for name, typ in sections.items():
                if name in obj:
                    _reject_unknown(typ, obj[name], name)
                    kw[name] = typ(**obj[name])
            if "channels" in obj:
                kw["channels"] = [ChannelSpec(**c) for c in obj["channels"]]
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(**kw)
        if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg.seed!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_json(obj)

    def weights_for(self, names) -> list[float]:
        table = {c.name: c.weight for c in self.channels}
        missing = [n for n in names if n not in table]
        if missing:
            raise ConfigError(f"no configured weight for channel(s) {missing}")
        return [float(table[n]) for n in names]


def _reject_unknown(cls, obj: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
