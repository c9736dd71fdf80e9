"""Chunk-size profiling, method comparison tables, head ranking and attention dumps.

Binary dumps (head-rank matrices, attention maps) share one container: the
magic ``b"DCARBLOB"``, a u32 header length, a UTF-8 JSON header, then raw
little-endian arrays at the offsets the header lists.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as F
from .decode import DecodeError, SamplingConfig, decode_car, decode_dcar, decode_far
from .model import CarModel, SequenceError, forward
from .world import Utterance, WorldConfig, edit_distance, rng_stream, transcribe

MAGIC = b"DCARBLOB"

# Large-scale reference numbers (real speech, external ASR). Reported next to
# the desk results as metadata only; nothing is checked against them.
REFERENCE_SCALE = {"FAR": {"wer": 9.99, "speedup": 1.0},
                   "DCAR": {"wer": 2.77, "speedup": 2.61}}


class EvalError(ValueError):
    pass


# ------------------------------------------------------------ blob files

def write_blob(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    index, offset, payload = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<i4" if np.issubdtype(arr.dtype, np.integer) else "<f4")
        index.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset})
        payload.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(head)) + head)
        for chunk in payload:
            fh.write(chunk)


def read_blob(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise EvalError(f"{path}: not a dump file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12: 12 + n])
    base = 12 + n
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=count,
                                          offset=base + e["offset"]).reshape(e["shape"])
    return header, arrays


# ------------------------------------------------------------ profiling

def select_guidance(wer: dict[int, float], k: int) -> tuple[list[int], tuple[int, ...]]:
    """Rank sizes by WER (ties to the smaller size) and keep the best ``k``."""
    if not 1 <= k <= len(wer):
        raise EvalError(f"k must lie in [1, {len(wer)}], got {k}")
    ranked = sorted(wer, key=lambda c: (wer[c], c))
    return ranked, tuple(sorted(ranked[:k]))


@dataclass
class ProfileReport:
    wer: dict[int, float]
    ranked: list[int]
    selected: tuple[int, ...]
    k: int

    def to_json(self) -> dict:
        return {"wer": {str(c): w for c, w in self.wer.items()}, "ranked": self.ranked,
                "selected": list(self.selected), "k": self.k}

    def table(self) -> str:
        lines = [f"{'Rank':>4}  {'Chunk':>5}  {'WER(%)':>7}"]
        for r, c in enumerate(self.ranked, 1):
            mark = "  *" if c in self.selected else ""
            lines.append(f"{r:>4}  {c:>5}  {self.wer[c]:>7.2f}{mark}")
        return "\n".join(lines)


def corpus_wer(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Total edits over total reference length, in percent."""
    edits = sum(edit_distance(r, h) for r, h in pairs)
    words = sum(len(r) for r, _ in pairs)
    if words == 0:
        raise EvalError("empty reference set")
    return 100.0 * edits / words


def _hypothesis(u: Utterance, generated: Sequence[int], world: WorldConfig, noise: float,
                seed: int) -> tuple[int, ...]:
    rng = rng_stream(seed, "asr", u.id) if noise > 0 else None
    return transcribe(u.prompt_tokens + tuple(generated), world, noise, rng).symbols


def profile_guidance(model: CarModel, split: Sequence[Utterance], candidate_sizes: Sequence[int], k: int,
                     sampling: SamplingConfig, world: WorldConfig, max_len: int = 128) -> ProfileReport:
    if not split:
        raise EvalError("profiling split is empty")
    sizes = sorted(set(int(c) for c in candidate_sizes))
    if not sizes or sizes[0] < 1 or sizes[-1] > model.cfg.n_heads_total:
        raise EvalError(f"candidate sizes must lie in [1, {model.cfg.n_heads_total}]")
    wer = {}
    for c in sizes:
        pairs = []
        for u in split:
            tr = decode_car(model, u.text, u.prompt_tokens, c, sampling, max_len, u.id)
            pairs.append((u.text, _hypothesis(u, tr.tokens, world, 0.0, sampling.seed)))
        wer[c] = corpus_wer(pairs)
    ranked, selected = select_guidance(wer, k)
    return ProfileReport(wer, ranked, selected, k)


# ------------------------------------------------------------ evaluation

def parse_method(name: str) -> tuple[str, int | None]:
    """``far`` | ``car:<c>`` | ``dcar`` -> (kind, size)."""
    key = name.strip().lower()
    if key in ("far", "dcar"):
        return key, None
    if key.startswith("car:"):
        try:
            return "car", int(key[4:])
        except ValueError:
            pass
    raise EvalError(f"unknown method {name!r}; use far, car:<size> or dcar")


def method_label(name: str) -> str:
    kind, size = parse_method(name)
    return {"far": "FAR", "dcar": "DCAR"}.get(kind) or f"CAR({size})"


@dataclass
class EvalReport:
    rows: list[dict]
    details: list[dict]
    timing: list[dict] = field(default_factory=list)

    def row(self, label: str) -> dict:
        for r in self.rows:
            if r["method"] == label:
                return r
        raise KeyError(label)

    def to_json(self) -> dict:
        """Deterministic part: everything except wall-clock measurements."""
        keep = ("method", "avg_token", "wer", "n_utterances", "n_tokens", "steps", "in_range_fraction")
        return {"rows": [{k: r[k] for k in keep if k in r} for r in self.rows],
                "reference_scale": REFERENCE_SCALE}

    def timing_json(self) -> dict:
        return {"rows": [{"method": r["method"], "rtf": r["rtf"], "speedup": r["speedup"],
                          "duration": r["duration"]} for r in self.rows],
                "utterances": self.timing}

    def table(self) -> str:
        head = f"{'Method':<8} {'Avg.Token':>9} {'WER(%)':>7} {'RTF':>8} {'Speedup':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            sp = f"{r['speedup']:.2f}x" if r.get("speedup") is not None else "-"
            lines.append(f"{r['method']:<8} {r['avg_token']:>9.2f} {r['wer']:>7.2f} {r['rtf']:>8.4f} {sp:>8}")
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps(self.timing_json(), indent=2, sort_keys=True) + "\n")
        with open(out / "details.jsonl", "w") as fh:
            for d in self.details:
                fh.write(json.dumps(d, sort_keys=True) + "\n")


def evaluate(model: CarModel, policy, split: Sequence[Utterance], methods: Sequence[str],
             sampling: SamplingConfig, world: WorldConfig, max_len: int = 128,
             policy_mode: str = "argmax", guidance: Sequence[int] | None = None,
             transcribe_noise: float = 0.0) -> EvalReport:
    """Decode every utterance with every method; per-utterance seeds are shared across methods."""
    if not split:
        raise EvalError("evaluation split is empty")
    parsed = [(m, *parse_method(m)) for m in methods]
    if any(kind == "dcar" for _, kind, _ in parsed) and policy is None:
        raise EvalError("DCAR evaluation needs a policy checkpoint")
    rows, details, timing = [], [], []
    for name, kind, size in parsed:
        label = method_label(name)
        pairs, n_tok, steps, dur, actions = [], 0, 0, 0.0, []
        for u in split:
            text, prompt = u.text, u.prompt_tokens
            if kind == "far":
                tr = decode_far(model, text, prompt, sampling, max_len, u.id)
            elif kind == "car":
                tr = decode_car(model, text, prompt, size, sampling, max_len, u.id)
            else:
                tr = decode_dcar(model, policy, text, prompt, sampling, policy_mode, max_len, u.id)
            hyp = _hypothesis(u, tr.tokens, world, transcribe_noise, sampling.seed)
            pairs.append((u.text, hyp))
            n_tok += len(tr.tokens)
            steps += tr.steps
            dur += tr.duration
            actions.extend(tr.actions)
            details.append({"id": u.id, "method": label, "n_tokens": len(tr.tokens), "steps": tr.steps,
                            "edits": edit_distance(u.text, hyp), "ref_len": len(u.text),
                            "actions": tr.actions, "chunk_sizes": tr.chunk_sizes,
                            "eos": tr.eos, "hit_max_len": tr.hit_max_len})
            timing.append({"id": u.id, "method": label, "duration": tr.duration})
        if n_tok == 0:
            raise DecodeError(f"{label} generated no tokens")
        row = {"method": label, "avg_token": n_tok / steps, "wer": corpus_wer(pairs),
               "n_utterances": len(split), "n_tokens": n_tok, "steps": steps,
               "duration": dur, "rtf": dur / (n_tok / world.frame_rate)}
        if kind == "dcar" and guidance:
            row["in_range_fraction"] = float(np.mean([a in set(guidance) for a in actions]))
        rows.append(row)
    far = next((r for r in rows if r["method"] == "FAR"), None)
    for r in rows:
        r["speedup"] = far["rtf"] / r["rtf"] if far is not None else None
    return EvalReport(rows, details, timing)


def in_range_fraction(model: CarModel, policy, split: Sequence[Utterance], guidance: Sequence[int],
                      sampling: SamplingConfig, max_len: int = 128, policy_mode: str = "argmax") -> float:
    """Share of policy decisions on held-out prompts that fall inside ``guidance``."""
    allowed, hits, n = set(guidance), 0, 0
    for u in split:
        tr = decode_dcar(model, policy, u.text, u.prompt_tokens, sampling, policy_mode, max_len, u.id)
        hits += sum(a in allowed for a in tr.actions)
        n += len(tr.actions)
    return hits / n if n else float("nan")


def merge_reports(runs: Sequence[dict]) -> list[dict]:
    """Merge loaded eval runs into rows keyed by method and config hash.

    Each run dict holds ``world``, ``config_hash``, ``eval`` (deterministic
    rows) and ``timing``. Runs sharing a key have their RTFs averaged; speedup
    is recomputed from the merged RTFs within each config hash.
    """
    if not runs:
        raise EvalError("no runs to merge")
    world = runs[0]["world"]
    for r in runs[1:]:
        if r["world"] != world:
            raise EvalError("runs were produced under different world configs; refusing to merge")
    merged: dict[tuple[str, str], dict] = {}
    rtfs: dict[tuple[str, str], list[float]] = {}
    for run in runs:
        timing = {t["method"]: t for t in run["timing"]["rows"]}
        for row in run["eval"]["rows"]:
            key = (row["method"], run["config_hash"])
            if key not in merged:
                merged[key] = {**row, "config_hash": run["config_hash"]}
                rtfs[key] = []
            rtfs[key].append(timing[row["method"]]["rtf"])
    out = []
    for key, row in merged.items():
        row["rtf"] = float(np.mean(rtfs[key]))
        row["n_runs"] = len(rtfs[key])
        out.append(row)
    for row in out:
        far = merged.get(("FAR", row["config_hash"]))
        row["speedup"] = far["rtf"] / row["rtf"] if far is not None else None
    return out


# ------------------------------------------------------------ head analysis

@dataclass
class HeadRankMatrix:
    """Teacher-forced per-head losses and ranks, one column per target position.

    ``losses[u]`` is ``[N+1, n_cols]`` with NaN where head ``i`` would need a
    context before the prompt; ``ranks[u]`` holds 1-based ranks (0 = invalid).
    """

    ids: list[str]
    losses: list[np.ndarray]
    ranks: list[np.ndarray]
    n_heads: int

    def _scored(self):
        for rk in self.ranks:
            valid = rk > 0
            nv = valid.sum(axis=0)
            yield rk[:, nv >= 2], nv[nv >= 2]

    def summary(self) -> dict:
        best = np.zeros(self.n_heads)
        worst = np.zeros(self.n_heads)
        cols = 0
        for rk, nv in self._scored():
            best += (rk == 1).sum(axis=1)
            worst += (rk == nv[None, :]).sum(axis=1)
            cols += rk.shape[1]
        if cols == 0:
            raise EvalError("no column has two or more valid heads")
        best, worst = best / cols, worst / cols
        return {"columns": cols, "best_fraction": best.tolist(), "worst_fraction": worst.tolist(),
                "base_best": float(best[0]), "base_worst": float(worst[0])}

    def export(self, path: str | Path) -> None:
        arrays = {}
        for uid, lo, rk in zip(self.ids, self.losses, self.ranks):
            arrays[f"{uid}/loss"] = lo
            arrays[f"{uid}/rank"] = rk
        write_blob(path, {"kind": "head_rank", "n_heads": self.n_heads, "ids": self.ids,
                          "summary": self.summary()}, arrays)


def head_losses(model: CarModel, u: Utterance) -> np.ndarray:
    """``[N+1, n - P]`` losses; column ``j`` scores token ``P + j``."""
    toks = u.target_tokens
    n, P, nh = len(toks), max(u.prompt_len, 1), model.cfg.n_heads_total
    if n < nh:
        raise SequenceError(f"utterance {u.id} is shorter than the {nh} heads")
    _, logits = forward(model, u.text, toks)
    logp = F.log_softmax_array(logits.astype(np.float64))
    out = np.full((nh, n - P), np.nan)
    for j, p in enumerate(range(P, n)):
        for i in range(nh):
            c = p - 1 - i
            if c >= P - 1:
                out[i, j] = -logp[i, c, toks[p]]
    return out


def rank_columns(losses: np.ndarray) -> np.ndarray:
    """Rank valid entries per column, 1 = lowest loss; exact ties go to the lower head."""
    ranks = np.zeros(losses.shape, dtype=np.int64)
    for j in range(losses.shape[1]):
        valid = np.flatnonzero(~np.isnan(losses[:, j]))
        order = valid[np.argsort(losses[valid, j], kind="stable")]
        ranks[order, j] = np.arange(1, len(order) + 1)
    return ranks


def analyze_heads(model: CarModel, split: Sequence[Utterance]) -> HeadRankMatrix:
    ids, losses, ranks = [], [], []
    for u in split:
        lo = head_losses(model, u)
        ids.append(u.id)
        losses.append(lo)
        ranks.append(rank_columns(lo))
    return HeadRankMatrix(ids, losses, ranks, model.cfg.n_heads_total)


# ------------------------------------------------------------ attention

def export_attention(model: CarModel, u: Utterance, out_path: str | Path) -> dict:
    """Write every layer/head attention map of ``[text || tokens]``; returns the header."""
    maps = model.attention_maps(u.text, u.target_tokens)
    arrays, entries = {}, []
    for layer, m in enumerate(maps):
        for h in range(m.shape[0]):
            name = f"layer{layer}/head{h}"
            arrays[name] = m[h]
            entries.append({"name": name, "layer": layer, "head": h, "shape": list(m[h].shape)})
    header = {"kind": "attention", "id": u.id, "text_len": len(u.text),
              "token_len": len(u.target_tokens), "maps": entries}
    write_blob(out_path, header, arrays)
    return header
