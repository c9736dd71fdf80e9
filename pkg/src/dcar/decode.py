"""FAR, fixed-chunk CAR and policy-scheduled DCAR decoding with a KV cache.

All three engines run the same loop: at the last accepted position pick a
chunk size ``c``, draw one token from each of heads ``0..c-1``, cut the chunk
at the first EOS, then push the accepted tokens through the trunk in a
single batched pass. FAR is ``c = 1``; CAR fixes ``c``; DCAR asks a policy.

Token draws consume one uniform each from a per-decode Philox stream;
policy draws use a separate stream, so the token stream advances identically
whatever schedules the chunks.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .model import CarModel
from .world import rng_stream


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_k: int = 16
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")


@dataclass
class DecodeTrace:
    tokens: list[int] = field(default_factory=list)
    prompt_len: int = 0
    decision_positions: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    chunk_sizes: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    hidden: np.ndarray | None = None
    duration: float = 0.0
    steps: int = 0
    eos: bool = False
    hit_max_len: bool = False

    @property
    def avg_token(self) -> float:
        return len(self.tokens) / self.steps if self.steps else 0.0

    def hidden_rows(self) -> np.ndarray:
        """Hidden-state rows the policy saw at each decision."""
        return np.asarray([self.prompt_len - 1 + p for p in self.decision_positions], dtype=np.int64)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "prompt_len": self.prompt_len,
                "decision_positions": self.decision_positions, "actions": self.actions,
                "chunk_sizes": self.chunk_sizes, "log_probs": self.log_probs,
                "duration": self.duration, "steps": self.steps, "eos": self.eos,
                "hit_max_len": self.hit_max_len}


def dump_traces(path, traces: dict[str, DecodeTrace]) -> None:
    with open(path, "w") as fh:
        for uid, tr in traces.items():
            fh.write(json.dumps({"id": uid, **tr.to_json()}) + "\n")


def sample_from_logits(logits: np.ndarray, sampling: SamplingConfig, u: float) -> int:
    """Inverse-CDF draw from a temperature / top-k filtered distribution."""
    if sampling.greedy:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / sampling.temperature
    if 0 < sampling.top_k < z.shape[0]:
        idx = np.argsort(-z, kind="stable")[: sampling.top_k]
    else:
        idx = np.arange(z.shape[0])
    p = np.exp(z[idx] - z[idx].max())
    cdf = np.cumsum(p)
    j = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return int(idx[min(j, len(idx) - 1)])


class ChunkScheduler(Protocol):
    def observe(self, hidden_rows: np.ndarray) -> None: ...

    def decide(self) -> tuple[int, float]: ...


class FixedChunk:
    """Always returns the same chunk size (CAR, and FAR when size is 1)."""

    def __init__(self, size: int):
        self.size = size

    def observe(self, hidden_rows: np.ndarray) -> None:
        pass

    def decide(self) -> tuple[int, float]:
        return self.size, 0.0


def _run(model: CarModel, text: Sequence[int], prompt: Sequence[int], scheduler,
         sampling: SamplingConfig, max_len: int, stream: int | str = 0) -> DecodeTrace:
    eos = model.cfg.token_vocab - 1
    n_heads = model.cfg.n_heads_total
    if len(prompt) < 1:
        raise DecodeError("decoding needs at least one prompt token")
    budget = min(max_len, model.cfg.max_seq_len - len(text) - len(prompt))
    if budget < 1:
        raise DecodeError("no room left to generate under max_seq_len")
    rng = rng_stream(sampling.seed, "tokens", stream)
    trace = DecodeTrace(prompt_len=len(prompt))
    hidden = []

    t0 = time.perf_counter()
    cache, h = model.start(text, prompt)
    hidden.append(h)
    scheduler.observe(h)
    last = h[-1]
    while True:
        size, logp = scheduler.decide()
        if not 1 <= size <= n_heads:
            raise DecodeError(f"chunk size {size} outside [1, {n_heads}]")
        logits = model.head_logits(last, size)
        chunk = []
        for i in range(size):
            tok = sample_from_logits(logits[i], sampling, rng.random())
            chunk.append(tok)
            if tok == eos:
                break
        room = budget - len(trace.tokens)
        chunk = chunk[:room]
        trace.decision_positions.append(len(trace.tokens))
        trace.actions.append(size)
        trace.chunk_sizes.append(len(chunk))
        trace.log_probs.append(logp)
        trace.tokens.extend(chunk)
        trace.steps += 1
        if chunk[-1] == eos:
            trace.eos = True
            break
        if len(trace.tokens) >= budget:
            trace.hit_max_len = True
            break
        h = model.extend(cache, chunk)
        hidden.append(h)
        scheduler.observe(h)
        last = h[-1]
    trace.duration = time.perf_counter() - t0
    trace.hidden = np.concatenate(hidden, axis=0)
    return trace


def decode_far(model: CarModel, text, prompt, sampling: SamplingConfig, max_len: int,
               stream: int | str = 0) -> DecodeTrace:
    return _run(model, text, prompt, FixedChunk(1), sampling, max_len, stream)


def decode_car(model: CarModel, text, prompt, chunk_size: int, sampling: SamplingConfig,
               max_len: int, stream: int | str = 0) -> DecodeTrace:
    if not 1 <= chunk_size <= model.cfg.n_heads_total:
        raise DecodeError(f"chunk size {chunk_size} outside [1, {model.cfg.n_heads_total}]")
    return _run(model, text, prompt, FixedChunk(chunk_size), sampling, max_len, stream)


def decode_dcar(model: CarModel, policy, text, prompt, sampling: SamplingConfig,
                policy_mode: str = "argmax", max_len: int = 256,
                stream: int | str = 0) -> DecodeTrace:
    """Let ``policy`` pick every chunk size from the history of hidden states."""
    if max(policy.action_set) > model.cfg.n_heads_total or min(policy.action_set) < 1:
        raise DecodeError("policy action set must lie within [1, N+1]")
    action_rng = rng_stream(sampling.seed, "actions", stream)
    return _run(model, text, prompt, policy.session(policy_mode, action_rng), sampling, max_len, stream)


def measure(trace: DecodeTrace, frame_rate: float) -> dict:
    """Tokens, RTF, average chunk and duration for one finished trace."""
    n = len(trace.tokens)
    if n == 0:
        raise DecodeError("trace generated no tokens")
    return {"tokens": list(trace.tokens), "n_tokens": n, "avg_token": n / trace.steps,
            "rtf": trace.duration / (n / frame_rate), "duration": trace.duration}
