"""Lightweight chunk-size scheduler.

The base model's hidden states are projected down to a small width, passed
through one pre-norm causal transformer layer, and mapped to logits over the
action set (chunk sizes). No extra position encoding is added; the hidden
states already carry it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as F
from .decode import FixedChunk
from .tensor import Tensor


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 128
    action_set: tuple[int, ...] = (1, 2, 3, 4)
    d_policy: int = 32
    n_attn_heads: int = 4
    d_ff: int = 64
    seed: int = 0

    def __post_init__(self):
        acts = tuple(int(a) for a in self.action_set)
        object.__setattr__(self, "action_set", acts)
        if not acts:
            raise ValueError("action_set must be non-empty")
        if min(acts) < 1 or any(b <= a for a, b in zip(acts, acts[1:])):
            raise ValueError("action_set must be positive and strictly increasing")
        if self.d_policy % self.n_attn_heads:
            raise ValueError("d_policy must be divisible by n_attn_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action_set"] = list(self.action_set)
        return d


class SchedulerPolicy:
    def __init__(self, cfg: PolicyConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params()
        self._index = {a: i for i, a in enumerate(cfg.action_set)}

    @property
    def action_set(self) -> tuple[int, ...]:
        return self.cfg.action_set

    def _init_params(self) -> dict[str, Tensor]:
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        d, dp, ff, A = c.d_model, c.d_policy, c.d_ff, len(c.action_set)
        p = {
            "w_in": rng.normal(0, 1.0 / np.sqrt(d), (d, dp)), "b_in": np.zeros(dp),
            "ln1.g": np.ones(dp), "ln1.b": np.zeros(dp),
            "wq": rng.normal(0, 0.1, (dp, dp)), "wk": rng.normal(0, 0.1, (dp, dp)),
            "wv": rng.normal(0, 0.1, (dp, dp)), "wo": rng.normal(0, 0.1, (dp, dp)),
            "ln2.g": np.ones(dp), "ln2.b": np.zeros(dp),
            "w1": rng.normal(0, 0.1, (dp, ff)), "b1": np.zeros(ff),
            "w2": rng.normal(0, 0.1, (ff, dp)), "b2": np.zeros(dp),
            "ln_f.g": np.ones(dp), "ln_f.b": np.zeros(dp),
            "w_out": rng.normal(0, 0.01, (dp, A)), "b_out": np.zeros(A),
        }
        return {k: Tensor(v.astype(F.default_dtype()), requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> "SchedulerPolicy":
        return SchedulerPolicy(self.cfg, {k: Tensor(t.data.copy(), requires_grad=True, name=k)
                                          for k, t in self.params.items()})

    def action_index(self, actions: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self._index[int(a)] for a in actions], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"action {e.args[0]} not in action set {self.action_set}") from None

    # ------------------------------------------------------------ tape path

    def action_logits(self, hidden: np.ndarray | Tensor) -> Tensor:
        """Logits ``[T, |A|]``; row t depends only on hidden rows ``0..t``."""
        c, P = self.cfg, self.params
        H = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
        if H.ndim != 2 or H.shape[1] != c.d_model:
            raise ValueError(f"policy expects hidden [T, {c.d_model}], got {H.shape}")
        T, dp, nh = H.shape[0], c.d_policy, c.n_attn_heads
        dh = dp // nh
        x = F.add(F.matmul(H, P["w_in"]), P["b_in"])
        h = F.layer_norm(x, P["ln1.g"], P["ln1.b"])

        def split(w):
            return F.transpose(F.reshape(F.matmul(h, P[w]), (T, nh, dh)), (1, 0, 2))

        q, k, v = split("wq"), split("wk"), split("wv")
        scores = F.scale(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        att = F.softmax(scores, np.tril(np.ones((T, T), dtype=bool))[None])
        o = F.reshape(F.transpose(F.matmul(att, v), (1, 0, 2)), (T, dp))
        x = F.add(x, F.matmul(o, P["wo"]))
        h = F.layer_norm(x, P["ln2.g"], P["ln2.b"])
        f = F.add(F.matmul(F.silu(F.add(F.matmul(h, P["w1"]), P["b1"])), P["w2"]), P["b2"])
        x = F.add(x, f)
        x = F.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return F.add(F.matmul(x, P["w_out"]), P["b_out"])

    def log_prob_of(self, hidden, positions: Sequence[int], actions: Sequence[int]) -> Tensor:
        """Current log-probabilities of recorded ``(position, action)`` pairs."""
        cols = self.action_index(actions)
        rows = np.asarray(positions, dtype=np.int64)
        upto = int(rows.max()) + 1 if rows.size else 0
        H = hidden[:upto] if not isinstance(hidden, Tensor) else hidden
        return F.gather(F.log_softmax(self.action_logits(H)), rows, cols)

    def act(self, hidden: np.ndarray, position: int, mode: str = "sample",
            rng: np.random.Generator | None = None) -> tuple[int, float]:
        logits = self.action_logits(np.asarray(hidden)[: position + 1]).data[position]
        return self._choose(logits, mode, rng)

    def _choose(self, logits: np.ndarray, mode: str, rng) -> tuple[int, float]:
        logp = F.log_softmax_array(logits.astype(np.float64))
        if mode == "argmax":
            j = int(np.argmax(logp))
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            cdf = np.cumsum(np.exp(logp))
            j = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
        else:
            raise ValueError(f"unknown policy mode {mode!r}")
        return self.action_set[j], float(logp[j])

    def session(self, mode: str, rng: np.random.Generator | None) -> "PolicySession":
        return PolicySession(self, mode, rng)


class PolicySession:
    """Incremental numpy evaluation of the policy during one decode."""

    def __init__(self, policy: SchedulerPolicy, mode: str, rng):
        c = policy.cfg
        self.policy, self.mode, self.rng = policy, mode, rng
        self.P = {k: t.data for k, t in policy.params.items()}
        self.keys = np.zeros((c.n_attn_heads, 0, c.d_policy // c.n_attn_heads), dtype=F.default_dtype())
        self.vals = self.keys.copy()
        self.last_logits: np.ndarray | None = None

    def observe(self, hidden_rows: np.ndarray) -> None:
        c, P = self.policy.cfg, self.P
        n, nh = hidden_rows.shape[0], c.n_attn_heads
        dh = c.d_policy // nh
        x = hidden_rows @ P["w_in"] + P["b_in"]
        h = F.layer_norm_array(x, P["ln1.g"], P["ln1.b"])
        q = (h @ P["wq"]).reshape(n, nh, dh).transpose(1, 0, 2)
        k = (h @ P["wk"]).reshape(n, nh, dh).transpose(1, 0, 2)
        v = (h @ P["wv"]).reshape(n, nh, dh).transpose(1, 0, 2)
        past = self.keys.shape[1]
        self.keys = np.concatenate([self.keys, k], axis=1)
        self.vals = np.concatenate([self.vals, v], axis=1)
        mask = np.ones((n, past + n), dtype=bool)
        mask[:, past:] = np.tril(np.ones((n, n), dtype=bool))
        att = F.softmax_array((q @ self.keys.transpose(0, 2, 1)) / float(np.sqrt(dh)), mask[None])
        o = (att @ self.vals).transpose(1, 0, 2).reshape(n, c.d_policy)
        x = x + o @ P["wo"]
        h = F.layer_norm_array(x, P["ln2.g"], P["ln2.b"])
        x = x + F.silu_array(h @ P["w1"] + P["b1"]) @ P["w2"] + P["b2"]
        x = F.layer_norm_array(x[-1], P["ln_f.g"], P["ln_f.b"])
        self.last_logits = x @ P["w_out"] + P["b_out"]

    def decide(self) -> tuple[int, float]:
        return self.policy._choose(self.last_logits, self.mode, self.rng)


class ConstantPolicy:
    """Degenerate scheduler that always picks one chunk size."""

    def __init__(self, size: int, action_set: Sequence[int] | None = None):
        self.size = size
        self.action_set = tuple(action_set) if action_set else (size,)

    def session(self, mode: str, rng) -> FixedChunk:
        return FixedChunk(self.size)


def act(policy: SchedulerPolicy, hidden, position: int, mode: str = "sample", rng=None):
    return policy.act(hidden, position, mode, rng)


def log_prob_of(policy: SchedulerPolicy, hidden, positions, actions) -> np.ndarray:
    return policy.log_prob_of(hidden, positions, actions).data


def action_logits(policy: SchedulerPolicy, hidden) -> np.ndarray:
    return policy.action_logits(hidden).data
