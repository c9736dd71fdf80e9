"""Synthetic symbol-to-token world with an exact inverse transcriber.

Each text symbol ``s`` is rendered as a run of tokens ``s * R + u`` where
``u`` is a bounded random walk over ``[0, R-1]`` that carries across runs
(its starting offset plays the role of speaker identity). Because texts
never repeat a symbol back to back, collapsing runs of ``token // R``
recovers the text exactly.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class WorldError(ValueError):
    pass


def rng_stream(seed: int, *names: str | int) -> np.random.Generator:
    """Counter-based generator for a named sub-stream of a global seed."""
    words = [int(seed) & 0xFFFFFFFF]
    for n in names:
        words.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class WorldConfig:
    symbol_count: int = 24
    region_size: int = 8
    run_length_min: int = 2
    run_length_max: int = 5
    jitter_step: int = 1
    frame_rate: int = 50
    seed: int = 0
    # "uniform": every run length ~ U[min, max].
    # "per_symbol": each symbol owns a base duration in [min, max] (fixed by
    # the seed); a run deviates from it by +-1 with prob duration_jitter.
    duration_model: str = "uniform"
    duration_jitter: float = 0.0
    # probability that the sub-index walk takes a step at a given token
    walk_move_prob: float = 1.0
    prompt_seconds: float = 3.0

    def __post_init__(self):
        if self.symbol_count < 1:
            raise WorldError("symbol_count must be >= 1")
        if self.run_length_min < 1 or self.run_length_max < self.run_length_min:
            raise WorldError("need 1 <= run_length_min <= run_length_max")
        if self.jitter_step < 0 or self.region_size < 2 * self.jitter_step + 1:
            raise WorldError("region_size must be >= 2*jitter_step + 1")
        if self.frame_rate < 1:
            raise WorldError("frame_rate must be >= 1")
        if self.duration_model not in ("uniform", "per_symbol"):
            raise WorldError(f"unknown duration_model {self.duration_model!r}")
        if not 0.0 <= self.duration_jitter <= 1.0 or not 0.0 <= self.walk_move_prob <= 1.0:
            raise WorldError("probabilities must lie in [0, 1]")

    @property
    def eos(self) -> int:
        return self.symbol_count * self.region_size

    @property
    def token_vocab(self) -> int:
        return self.symbol_count * self.region_size + 1

    @property
    def prompt_cap(self) -> int:
        return int(round(self.prompt_seconds * self.frame_rate))

    def base_durations(self) -> np.ndarray:
        rng = rng_stream(self.seed, "durations")
        return rng.integers(self.run_length_min, self.run_length_max + 1, size=self.symbol_count)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Utterance:
    id: str
    text: tuple[int, ...]
    prompt_len: int
    target_tokens: tuple[int, ...]

    @property
    def prompt_tokens(self) -> tuple[int, ...]:
        return self.target_tokens[: self.prompt_len]


@dataclass
class Transcript:
    symbols: list[int]
    clamped: int = 0


def check_text(text: Sequence[int], cfg: WorldConfig) -> None:
    for i, s in enumerate(text):
        if not 0 <= s < cfg.symbol_count:
            raise WorldError(f"symbol {s} outside [0, {cfg.symbol_count})")
        if i and text[i - 1] == s:
            raise WorldError(f"adjacent repeat of symbol {s} at position {i}")


def render(text: Sequence[int], run_lengths: Sequence[int], walk: Sequence[int],
           region_size: int, eos: int) -> list[int]:
    """Deterministic token layout: runs of ``s * R + u`` followed by EOS."""
    if len(run_lengths) != len(text) or len(walk) != sum(run_lengths):
        raise WorldError("run lengths / walk do not match the text")
    out, j = [], 0
    for s, n in zip(text, run_lengths):
        for _ in range(n):
            out.append(s * region_size + walk[j])
            j += 1
    out.append(eos)
    return out


def sample_run_lengths(text: Sequence[int], cfg: WorldConfig, rng: np.random.Generator) -> list[int]:
    if cfg.duration_model == "uniform":
        return [int(x) for x in rng.integers(cfg.run_length_min, cfg.run_length_max + 1, size=len(text))]
    base = cfg.base_durations()
    lengths = []
    for s in text:
        n = int(base[s])
        if rng.random() < cfg.duration_jitter:
            n += 1 if rng.random() < 0.5 else -1
        lengths.append(max(1, n))
    return lengths


def sample_walk(n: int, cfg: WorldConfig, rng: np.random.Generator) -> list[int]:
    if n == 0:
        return []
    u = int(rng.integers(0, cfg.region_size))
    walk = [u]
    for _ in range(n - 1):
        if cfg.jitter_step and rng.random() < cfg.walk_move_prob:
            u = int(np.clip(u + rng.integers(-cfg.jitter_step, cfg.jitter_step + 1), 0, cfg.region_size - 1))
        walk.append(u)
    return walk


def generate(text: Sequence[int], cfg: WorldConfig, rng: np.random.Generator) -> list[int]:
    check_text(text, cfg)
    lengths = sample_run_lengths(text, cfg, rng)
    walk = sample_walk(sum(lengths), cfg, rng)
    return render(text, lengths, walk, cfg.region_size, cfg.eos)


def transcribe(tokens: Iterable[int], cfg: WorldConfig, noise: float = 0.0,
               rng: np.random.Generator | None = None) -> Transcript:
    """Map tokens to symbols, collapse repeats, stop at the first EOS.

    ``noise`` > 0 replaces each token's symbol by a random one with that
    probability (a crude stand-in for ASR errors; off by default).
    """
    eos, limit = cfg.eos, cfg.symbol_count * cfg.region_size
    out: list[int] = []
    clamped = 0
    for t in tokens:
        t = int(t)
        if t == eos:
            break
        if t < 0 or t >= limit:
            clamped += 1
            t = min(max(t, 0), limit - 1)
        s = t // cfg.region_size
        if noise > 0.0 and rng is not None and rng.random() < noise:
            s = int(rng.integers(0, cfg.symbol_count))
        if not out or out[-1] != s:
            out.append(s)
    return Transcript(out, clamped)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_error_rate(reference: Sequence, hypothesis: Sequence) -> float:
    if isinstance(reference, Transcript):
        reference = reference.symbols
    if isinstance(hypothesis, Transcript):
        hypothesis = hypothesis.symbols
    if len(reference) == 0:
        raise WorldError("WER undefined for an empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


# ---------------------------------------------------------------- corpus

@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 2000
    n_eval: int = 100
    n_policy: int = 980
    text_len_min: int = 6
    text_len_max: int = 12


SPLITS = ("train", "eval", "policy")


def sample_text(length: int, cfg: WorldConfig, rng: np.random.Generator) -> list[int]:
    text = []
    for _ in range(length):
        if not text:
            text.append(int(rng.integers(0, cfg.symbol_count)))
        else:
            s = int(rng.integers(0, cfg.symbol_count - 1))
            text.append(s + (s >= text[-1]))
    return text


def prompt_length(n_tokens: int, cfg: WorldConfig) -> int:
    """``min(3 s * F, len // 2)`` tokens, never less than one."""
    return max(1, min(cfg.prompt_cap, n_tokens // 2))


def make_utterance(uid: str, text: Sequence[int], cfg: WorldConfig, rng: np.random.Generator) -> Utterance:
    tokens = generate(text, cfg, rng)
    return Utterance(uid, tuple(text), prompt_length(len(tokens) - 1, cfg), tuple(tokens))


def build_corpus(cfg: WorldConfig, spec: CorpusSpec) -> dict[str, list[Utterance]]:
    counts = {"train": spec.n_train, "eval": spec.n_eval, "policy": spec.n_policy}
    for name, n in counts.items():
        if n < 1:
            raise WorldError(f"split {name!r} must hold at least one utterance")
    lo, hi = spec.text_len_min, spec.text_len_max
    if lo < 1 or hi < lo:
        raise WorldError("text_len_range must satisfy 1 <= min <= max")
    if cfg.symbol_count == 1 and hi > 1:
        raise WorldError("a single symbol cannot form texts longer than 1 without repeats")
    capacity = sum(cfg.symbol_count * (cfg.symbol_count - 1) ** (n - 1) for n in range(lo, hi + 1))
    if capacity < sum(counts.values()):
        raise WorldError("text_len_range too narrow for the requested number of distinct texts")

    seen: set[tuple[int, ...]] = set()
    out: dict[str, list[Utterance]] = {}
    for name in SPLITS:
        rng = rng_stream(cfg.seed, "corpus", name)
        items = []
        while len(items) < counts[name]:
            text = tuple(sample_text(int(rng.integers(lo, hi + 1)), cfg, rng))
            if text in seen:
                continue
            seen.add(text)
            items.append(make_utterance(f"{name}-{len(items):05d}", text, cfg, rng))
        out[name] = items
    return out


def format_record(u: Utterance) -> str:
    return "\t".join([u.id, " ".join(map(str, u.text)), str(u.prompt_len),
                      " ".join(map(str, u.target_tokens))])


def parse_record(line: str) -> Utterance:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise WorldError(f"malformed dataset record: {line[:60]!r}")
    uid, text, plen, toks = parts
    return Utterance(uid, tuple(int(x) for x in text.split()), int(plen),
                     tuple(int(x) for x in toks.split()))


def write_corpus(out_dir: str | Path, cfg: WorldConfig, spec: CorpusSpec,
                 splits: dict[str, list[Utterance]] | None = None) -> dict[str, str]:
    """Write ``<split>.tsv`` files plus ``manifest.json``; returns sha256 per file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = splits if splits is not None else build_corpus(cfg, spec)
    hashes = {}
    for name in SPLITS:
        body = "".join(format_record(u) + "\n" for u in splits[name]).encode()
        (out_dir / f"{name}.tsv").write_bytes(body)
        hashes[f"{name}.tsv"] = hashlib.sha256(body).hexdigest()
    manifest = {"world": cfg.to_dict(), "corpus": asdict(spec), "seed": cfg.seed,
                "counts": {k: len(v) for k, v in splits.items()}, "sha256": hashes}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return hashes


def read_split(path: str | Path) -> list[Utterance]:
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip()]


@dataclass
class Corpus:
    world: WorldConfig
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[Utterance]:
        return self.splits[name]


def load_corpus(data_dir: str | Path) -> Corpus:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    world = WorldConfig(**manifest["world"])
    return Corpus(world, {name: read_split(data_dir / f"{name}.tsv") for name in SPLITS})
