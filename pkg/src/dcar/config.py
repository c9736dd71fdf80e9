"""Run configuration: nested JSON sections with defaults for every field.

Unknown keys are rejected with their full dotted path. Seeds are not set per
section; every component derives its randomness from the single global
``seed`` through named streams.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .dcpo import DcpoConfig
from .decode import SamplingConfig
from .model import CarModelConfig
from .policy import PolicyConfig
from .train import TrainConfig
from .world import CorpusSpec, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    symbol_count: int = 24
    region_size: int = 8
    run_length_min: int = 2
    run_length_max: int = 5
    jitter_step: int = 1
    frame_rate: int = 50
    duration_model: str = "uniform"
    duration_jitter: float = 0.0
    walk_move_prob: float = 1.0
    prompt_seconds: float = 3.0
    n_train: int = 2000
    n_eval: int = 100
    n_policy: int = 980
    text_len_min: int = 6
    text_len_max: int = 12


@dataclass
class ModelSection:
    n_layers: int = 2
    n_attn_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    n_additional_heads: int = 3
    gamma: float = 1.0
    max_seq_len: int = 160
    dropout: float = 0.0
    n_res_blocks: int = 4


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    grad_clip: float = 1.0
    final_lr_ratio: float = 0.1


@dataclass
class PolicySection:
    d_policy: int = 32
    n_attn_heads: int = 4
    d_ff: int = 64


@dataclass
class DcpoSection:
    guidance: list = field(default_factory=lambda: [2, 3])
    clip_epsilon: float = 0.2
    lam: float = 0.1
    reward_floor: float = -10.0
    epochs: int = 3
    inner_iters: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 4
    beta_step: float = 0.1
    std_guard: float = 1e-8
    collapse_patience: int = 25


@dataclass
class DecodeSection:
    temperature: float = 1.0
    top_k: int = 16
    greedy: bool = False
    max_len: int = 128


@dataclass
class EvalSection:
    split: str = "eval"
    methods: list = field(default_factory=lambda: ["far", "car:2", "car:3", "dcar"])
    policy_mode: str = "argmax"
    profile_split: str = "policy"
    profile_k: int = 2
    transcribe_noise: float = 0.0


SECTIONS = {"world": WorldSection, "model": ModelSection, "train": TrainSection,
            "policy": PolicySection, "dcpo": DcpoSection, "decode": DecodeSection,
            "eval": EvalSection}

_KINDS = {int: (int,), float: (int, float), str: (str,), bool: (bool,), list: (list,)}


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    policy: PolicySection = field(default_factory=PolicySection)
    dcpo: DcpoSection = field(default_factory=DcpoSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------ plumbing

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        out = cls()
        for key, value in raw.items():
            if key == "seed":
                if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                    raise ConfigError("seed: expected a non-negative integer")
                out.seed = value
            elif key in SECTIONS:
                setattr(out, key, _section(SECTIONS[key], value, key))
            else:
                raise ConfigError(f"unknown config key '{key}'")
        out.validate()
        return out

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)

    def validate(self) -> None:
        """Build every domain config once so bad values fail up front."""
        try:
            self.world_config()
            self.corpus_spec()
            self.model_config(2, 2)
            self.train_config()
            self.policy_config((1,))
            self.dcpo_config()
            self.sampling()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        if self.eval.policy_mode not in ("argmax", "sample"):
            raise ConfigError("eval.policy_mode: expected 'argmax' or 'sample'")

    # ------------------------------------------------------- domain configs

    def world_config(self) -> WorldConfig:
        w = asdict(self.world)
        for k in ("n_train", "n_eval", "n_policy", "text_len_min", "text_len_max"):
            w.pop(k)
        return WorldConfig(seed=self.seed, **w)

    def corpus_spec(self) -> CorpusSpec:
        w = self.world
        return CorpusSpec(w.n_train, w.n_eval, w.n_policy, w.text_len_min, w.text_len_max)

    def model_config(self, text_vocab: int, token_vocab: int) -> CarModelConfig:
        return CarModelConfig(text_vocab=text_vocab, token_vocab=token_vocab, seed=self.seed,
                              **asdict(self.model))

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **asdict(self.train))

    def policy_config(self, action_set, d_model: int | None = None) -> PolicyConfig:
        return PolicyConfig(d_model=d_model or self.model.d_model, action_set=tuple(action_set),
                            seed=self.seed, **asdict(self.policy))

    def dcpo_config(self, guidance=None) -> DcpoConfig:
        d = asdict(self.dcpo)
        if guidance is not None:
            d["guidance"] = list(guidance)
        return DcpoConfig(seed=self.seed, max_len=self.decode.max_len,
                          **{**d, "guidance": tuple(d["guidance"])})

    def sampling(self) -> SamplingConfig:
        d = self.decode
        return SamplingConfig(temperature=d.temperature, top_k=d.top_k, seed=self.seed, greedy=d.greedy)


def _section(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        f = known[key]
        default = f.default if f.default is not MISSING else f.default_factory()
        kinds = _KINDS[type(default)]
        if not isinstance(value, kinds) or (isinstance(value, bool) and bool not in kinds):
            raise ConfigError(f"{path}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
        values[key] = float(value) if isinstance(default, float) else value
    return cls(**values)
