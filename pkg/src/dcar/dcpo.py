"""Dynamic chunk-wise policy optimization.

Each prompt gets a group of ``2|C|`` rollouts: ``|C|`` guided ones that decode
with a fixed chunk size taken from the guidance range ``C``, and ``|C|`` drawn
from the frozen old policy. Every rollout earns one outcome reward (WER term
floored at ``reward_floor`` minus a size-proportional penalty for chunk sizes
outside ``C``); group-normalised rewards become per-decision advantages for a
clipped-ratio objective with a ``rho - log(rho) - 1`` KL term against a
per-epoch reference policy. The base model stays frozen throughout.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as F
from .decode import DecodeError, SamplingConfig, decode_car, decode_dcar
from .model import CarModel
from .policy import SchedulerPolicy
from .tensor import Tensor
from .world import Utterance, WorldConfig, rng_stream, transcribe, word_error_rate

log = logging.getLogger(__name__)


class RewardCollapse(RuntimeError):
    pass


@dataclass(frozen=True)
class DcpoConfig:
    guidance: tuple[int, ...] = (2, 3)
    clip_epsilon: float = 0.2
    lam: float = 0.1
    reward_floor: float = -10.0
    epochs: int = 3
    inner_iters: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 4
    beta_step: float = 0.1
    std_guard: float = 1e-8
    max_len: int = 128
    seed: int = 0
    collapse_patience: int = 25
    no_guidance: bool = False
    no_outrange_penalty: bool = False
    totally_free: bool = False

    def __post_init__(self):
        object.__setattr__(self, "guidance", tuple(sorted(int(c) for c in self.guidance)))
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.guidance and not self.totally_free:
            raise ValueError("guidance range must be non-empty unless totally_free")
        if self.epochs < 1 or self.inner_iters < 1 or self.batch_size < 1:
            raise ValueError("epochs, inner_iters and batch_size must be >= 1")

    @property
    def group_size(self) -> int:
        return 2 * max(len(self.guidance), 1)

    @property
    def n_guided(self) -> int:
        return 0 if (self.no_guidance or self.totally_free) else len(self.guidance)

    @property
    def effective_lam(self) -> float:
        return 0.0 if (self.no_outrange_penalty or self.totally_free) else self.lam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["guidance"] = list(self.guidance)
        return d


def beta_for_epoch(epoch: int, step: float = 0.1) -> float:
    """KL weight warm-up: 0 in the first epoch, then ``step`` more per epoch."""
    return step * (epoch - 1)


@dataclass
class Rollout:
    uid: str
    tokens: list[int]
    rows: np.ndarray
    actions: list[int]
    hidden: np.ndarray
    guided: bool
    old_logp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_logp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failed: bool = False
    wer_gen: float = float("nan")
    reward: float = 0.0
    advantage: float = 0.0


@dataclass
class RolloutGroup:
    utterance: Utterance
    rollouts: list[Rollout]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])


# ---------------------------------------------------------------- rewards

def reward_value(wer_gen: float, wer_gt: float, actions: Sequence[int], n_tokens: int,
                 guidance: Sequence[int], lam: float, floor: float = -10.0) -> float:
    """``max(1 - ln(WER_gen - WER_gt + 1), floor) - lam * sum_{a not in C} a / T``."""
    if n_tokens <= 0:
        return floor
    arg = max(wer_gen - wer_gt + 1.0, 1e-300)
    quality = max(1.0 - math.log(arg), floor)
    allowed = set(guidance)
    penalty = sum(a for a in actions if a not in allowed) / n_tokens
    return quality - lam * penalty


def reward(rollout: Rollout, gt: Utterance, cfg: DcpoConfig, world: WorldConfig,
           lam: float | None = None) -> float:
    if rollout.failed or not rollout.tokens:
        return cfg.reward_floor
    # the continuation is heard together with its prompt, as in the reference
    wer_gen = word_error_rate(gt.text, transcribe(gt.prompt_tokens + tuple(rollout.tokens), world).symbols)
    wer_gt = word_error_rate(gt.text, transcribe(gt.target_tokens, world).symbols)
    rollout.wer_gen = wer_gen
    return reward_value(wer_gen, wer_gt, rollout.actions, len(rollout.tokens), cfg.guidance,
                        cfg.effective_lam if lam is None else lam, cfg.reward_floor)


def advantages(rewards: Sequence[float], std_guard: float = 1e-8) -> np.ndarray:
    """Group-normalised rewards (population std); all zeros for a flat group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of at least two rollouts")
    sd = r.std()
    if sd < std_guard:
        return np.zeros_like(r)
    return (r - r.mean()) / sd


# ---------------------------------------------------------------- rollouts

def _score(policy: SchedulerPolicy, ro: Rollout) -> np.ndarray:
    return policy.log_prob_of(ro.hidden, ro.rows, ro.actions).data.astype(np.float64)


def generate_group(q: Utterance, model: CarModel, policy_old: SchedulerPolicy, cfg: DcpoConfig,
                   sampling: SamplingConfig, stream: str,
                   policy_ref: SchedulerPolicy | None = None) -> RolloutGroup:
    """``|C|`` guided + ``|C|`` policy rollouts (all policy in no-guidance modes)."""
    prompt = q.prompt_tokens
    plan: list[int | None] = list(cfg.guidance[: cfg.n_guided])
    plan += [None] * (cfg.group_size - len(plan))
    rollouts = []
    for j, size in enumerate(plan):
        sub = f"{stream}:{j}"
        try:
            if size is None:
                tr = decode_dcar(model, policy_old, q.text, prompt, sampling, "sample", cfg.max_len, sub)
            else:
                tr = decode_car(model, q.text, prompt, size, sampling, cfg.max_len, sub)
        except DecodeError as e:
            log.warning("rollout %s failed: %s", sub, e)
            rollouts.append(Rollout(q.id, [], np.zeros(0, np.int64), [], np.zeros((0, model.cfg.d_model)),
                                    size is not None, failed=True))
            continue
        rows = tr.hidden_rows()
        ro = Rollout(q.id, tr.tokens, rows, tr.actions, tr.hidden[: int(rows.max()) + 1], size is not None)
        ro.old_logp = _score(policy_old, ro)
        ro.ref_logp = _score(policy_ref, ro) if policy_ref is not None else ro.old_logp.copy()
        rollouts.append(ro)
    return RolloutGroup(q, rollouts)


def score_group(group: RolloutGroup, cfg: DcpoConfig, world: WorldConfig) -> None:
    for ro in group.rollouts:
        ro.reward = reward(ro, group.utterance, cfg, world)
    adv = advantages(group.rewards, cfg.std_guard)
    for ro, a in zip(group.rollouts, adv):
        ro.advantage = float(a)


# ---------------------------------------------------------------- objective

def rollout_objective(policy: SchedulerPolicy, ro: Rollout, eps: float, beta: float) -> Tensor:
    """Mean over decisions of ``min(ratio*A, clip(ratio)*A) - beta*KL`` for one rollout."""
    logp = policy.log_prob_of(ro.hidden, ro.rows, ro.actions)
    ratio = F.exp(F.sub(logp, Tensor(ro.old_logp)))
    surr = F.minimum(F.scale(ratio, ro.advantage), F.scale(F.clip(ratio, 1 - eps, 1 + eps), ro.advantage))
    log_rho = F.sub(Tensor(ro.ref_logp), logp)
    kl = F.sub(F.sub(F.exp(log_rho), log_rho), Tensor(np.ones(len(ro.actions))))
    return F.mean(F.sub(surr, F.scale(kl, beta)))


def dcpo_objective(policy: SchedulerPolicy, groups: Sequence[RolloutGroup], cfg: DcpoConfig,
                   beta: float) -> Tensor:
    """Average rollout objective over every usable rollout in the batch (to maximise)."""
    terms = [rollout_objective(policy, ro, cfg.clip_epsilon, beta)
             for g in groups for ro in g.rollouts if not ro.failed and len(ro.actions)]
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = F.add(total, t)
    return F.scale(total, 1.0 / len(terms))


def kl_terms(logp: np.ndarray, ref_logp: np.ndarray) -> np.ndarray:
    log_rho = np.asarray(ref_logp) - np.asarray(logp)
    return np.exp(log_rho) - log_rho - 1.0


# ---------------------------------------------------------------- training

def train_dcpo(model: CarModel, policy: SchedulerPolicy, prompts: Sequence[Utterance], cfg: DcpoConfig,
               sampling: SamplingConfig, world: WorldConfig,
               on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Run the full optimisation loop in place on ``policy``; returns epoch logs."""
    if not set(cfg.guidance) <= set(policy.action_set):
        raise ValueError(f"guidance {cfg.guidance} not within action set {policy.action_set}")
    state = F.AdamState(learning_rate=cfg.learning_rate)
    params = policy.parameters()
    order_rng = rng_stream(cfg.seed, "dcpo-order")
    logs = []
    collapsed = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        ref = policy.copy()
        beta = beta_for_epoch(epoch, cfg.beta_step)
        order = order_rng.permutation(len(prompts))
        stats = {"reward": [], "wer": [], "in_range": [], "chunk": [], "policy_ref_reward": []}
        for b in range(0, len(order), cfg.batch_size):
            old = policy.copy()
            groups = []
            for idx in order[b: b + cfg.batch_size]:
                q = prompts[int(idx)]
                g = generate_group(q, model, old, cfg, sampling, f"{epoch}:{q.id}", ref)
                score_group(g, cfg, world)
                groups.append(g)
            rewards = np.concatenate([g.rewards for g in groups])
            collapsed = collapsed + 1 if np.all(rewards <= cfg.reward_floor) else 0
            if collapsed >= cfg.collapse_patience:
                raise RewardCollapse(f"all rewards at the floor for {collapsed} consecutive batches")
            for _ in range(cfg.inner_iters):
                F.zero_grads(params)
                with F.Tape() as tape:
                    loss = F.scale(dcpo_objective(policy, groups, cfg, beta), -1.0)
                if len(tape):
                    F.backward(loss, tape)
                    F.adam_step(params, state)
            for g in groups:
                for ro in g.rollouts:
                    stats["reward"].append(ro.reward)
                    if not ro.failed:
                        stats["wer"].append(ro.wer_gen)
                    if not ro.guided and not ro.failed:
                        stats["in_range"].extend(a in cfg.guidance for a in ro.actions)
                        stats["chunk"].append(len(ro.tokens) / len(ro.actions))
                        stats["policy_ref_reward"].append(reward(ro, g.utterance, cfg, world, lam=cfg.lam))
        entry = {"epoch": epoch, "beta": beta,
                 "mean_reward": float(np.mean(stats["reward"])),
                 "mean_wer_gen": float(np.mean(stats["wer"])) if stats["wer"] else float("nan"),
                 "in_range_fraction": float(np.mean(stats["in_range"])) if stats["in_range"] else float("nan"),
                 "mean_chunk": float(np.mean(stats["chunk"])) if stats["chunk"] else float("nan"),
                 "policy_reward_ref": float(np.mean(stats["policy_ref_reward"])) if stats["policy_ref_reward"] else float("nan"),
                 "wall_time": time.perf_counter() - t0}
        logs.append(entry)
        log.info("dcpo epoch %d: %s", epoch, entry)
        if on_epoch is not None:
            on_epoch(entry)
    return logs


def ablation(cfg: DcpoConfig, name: str | None) -> DcpoConfig:
    """Map an ablation name from the command line onto config flags."""
    if not name:
        return cfg
    flags = {"no-guidance": {"no_guidance": True},
             "no-outrange-penalty": {"no_outrange_penalty": True},
             "totally-free": {"totally_free": True}}
    if name not in flags:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(flags)}")
    return replace(cfg, **flags[name])
