"""Decoder-only transformer with a base head and N additional prediction heads.

Sequences are laid out as ``[text || tokens]``. Text positions attend
bidirectionally among themselves; token positions see all text and earlier
(or equal) token positions. Text and token positions are numbered from zero
independently, so padding a batch never shifts a position encoding.

Head ``i`` at token position ``t`` predicts token ``t + 1 + i``.

Two code paths share the parameters: a tape path (training, gradient checks,
full re-forward) and a plain numpy path with a KV cache (decoding).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as F
from .tensor import Tensor


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class CarModelConfig:
    text_vocab: int
    token_vocab: int
    n_layers: int = 2
    n_attn_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    n_additional_heads: int = 3
    gamma: float = 1.0
    max_seq_len: int = 160
    dropout: float = 0.0
    n_res_blocks: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_attn_heads:
            raise ValueError("d_model must be divisible by n_attn_heads")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.n_additional_heads < 0:
            raise ValueError("n_additional_heads must be >= 0")

    @property
    def n_heads_total(self) -> int:
        return self.n_additional_heads + 1

    def to_dict(self) -> dict:
        return asdict(self)


def prefix_mask(n_text: int, n_tokens: int) -> np.ndarray:
    """Boolean ``[L, L]`` mask (True = may attend) for ``[text || tokens]``."""
    n = n_text + n_tokens
    m = np.zeros((n, n), dtype=bool)
    m[:n_text, :n_text] = True
    m[n_text:, :n_text] = True
    m[n_text:, n_text:] = np.tril(np.ones((n_tokens, n_tokens), dtype=bool))
    return m


def batch_mask(n_text: Sequence[int], n_tok: Sequence[int], lt: int, ls: int) -> np.ndarray:
    """``[B, 1, L, L]`` mask for a padded ``[text(lt) || tokens(ls)]`` batch."""
    b = len(n_text)
    L = lt + ls
    m = np.zeros((b, 1, L, L), dtype=bool)
    causal = np.tril(np.ones((ls, ls), dtype=bool))
    for i, (nt, ns) in enumerate(zip(n_text, n_tok)):
        m[i, 0, :, :nt] = True
        m[i, 0, lt:, lt:lt + ns] = causal[:, :ns]
    return m


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe.astype(np.float32)


class CarModel:
    def __init__(self, cfg: CarModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params()
        self.pe = sinusoid_table(cfg.max_seq_len, cfg.d_model)

    # ------------------------------------------------------------ parameters

    def _init_params(self) -> dict[str, Tensor]:
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        d, ff = c.d_model, c.d_ff
        p: dict[str, np.ndarray] = {}

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape)

        resid_std = 0.02 / np.sqrt(2 * c.n_layers)
        p["text_emb"] = normal((c.text_vocab, d), 1.0)
        p["tok_emb"] = normal((c.token_vocab, d), 1.0)
        for layer in range(c.n_layers):
            pre = f"layers.{layer}."
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv"):
                p[pre + w] = normal((d, d), 0.02)
            p[pre + "wo"] = normal((d, d), resid_std)
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
            p[pre + "w1"] = normal((d, ff), 0.02)
            p[pre + "b1"] = np.zeros(ff)
            p[pre + "w2"] = normal((ff, d), resid_std)
            p[pre + "b2"] = np.zeros(d)
        p["final_ln.g"] = np.ones(d)
        p["final_ln.b"] = np.zeros(d)
        p["head.0.out"] = normal((d, c.token_vocab), 0.02)
        for h in range(1, c.n_heads_total):
            for blk in range(c.n_res_blocks):
                p[f"head.{h}.block.{blk}.w"] = normal((d, d), 0.02)
                p[f"head.{h}.block.{blk}.b"] = np.zeros(d)
            p[f"head.{h}.out"] = normal((d, c.token_vocab), 0.02)
        return {k: Tensor(v.astype(F.default_dtype()), requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def _check_lengths(self, n_text: int, n_tok: int) -> None:
        if n_text + n_tok > self.cfg.max_seq_len:
            raise SequenceError(f"sequence of {n_text}+{n_tok} exceeds max_seq_len={self.cfg.max_seq_len}")

    def _check_ids(self, text, tokens) -> None:
        if len(text) and (min(text) < 0 or max(text) >= self.cfg.text_vocab):
            raise SequenceError("text symbol outside text vocabulary")
        if len(tokens) and (min(tokens) < 0 or max(tokens) >= self.cfg.token_vocab):
            raise SequenceError("token id outside token vocabulary")

    # ------------------------------------------------------------ tape path

    def trunk(self, texts: Sequence[Sequence[int]], token_seqs: Sequence[Sequence[int]],
              dropout_rng: np.random.Generator | None = None,
              attn_out: list | None = None) -> tuple[Tensor, int]:
        """Padded batch forward. Returns final-norm hidden ``[B, lt+ls, d]`` and ``lt``."""
        c, P = self.cfg, self.params
        n_text = [len(t) for t in texts]
        n_tok = [len(s) for s in token_seqs]
        for t, s in zip(texts, token_seqs):
            self._check_lengths(len(t), len(s))
            self._check_ids(t, s)
        b, lt, ls = len(texts), max(n_text), max(n_tok)
        L, d, H = lt + ls, c.d_model, c.n_attn_heads
        dh = d // H
        text_ids = np.zeros((b, lt), dtype=np.int64)
        tok_ids = np.zeros((b, ls), dtype=np.int64)
        for i, (t, s) in enumerate(zip(texts, token_seqs)):
            text_ids[i, : len(t)] = t
            tok_ids[i, : len(s)] = s
        parts = []
        if lt:
            parts.append(F.reshape(F.take_rows(P["text_emb"], text_ids.reshape(-1)), (b, lt, d)))
            parts[-1] = F.add(parts[-1], Tensor(self.pe[:lt]))
        if ls:
            parts.append(F.reshape(F.take_rows(P["tok_emb"], tok_ids.reshape(-1)), (b, ls, d)))
            parts[-1] = F.add(parts[-1], Tensor(self.pe[:ls]))
        x = parts[0] if len(parts) == 1 else F.concat(parts, axis=1)
        mask = batch_mask(n_text, n_tok, lt, ls)
        inv = 1.0 / float(np.sqrt(dh))
        drop = c.dropout if dropout_rng is not None else 0.0
        for layer in range(c.n_layers):
            pre = f"layers.{layer}."
            h = F.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])

            def heads(w):
                return F.transpose(F.reshape(F.matmul(h, P[pre + w]), (b, L, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("wq"), heads("wk"), heads("wv")
            scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), inv)
            att = F.softmax(scores, mask)
            if attn_out is not None:
                attn_out.append(att.data)
            o = F.reshape(F.transpose(F.matmul(att, v), (0, 2, 1, 3)), (b, L, d))
            x = F.add(x, F.dropout(F.matmul(o, P[pre + "wo"]), drop, dropout_rng))
            h = F.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            f = F.silu(F.add(F.matmul(h, P[pre + "w1"]), P[pre + "b1"]))
            f = F.add(F.matmul(f, P[pre + "w2"]), P[pre + "b2"])
            x = F.add(x, F.dropout(f, drop, dropout_rng))
        return F.layer_norm(x, P["final_ln.g"], P["final_ln.b"]), lt

    def head(self, i: int, h: Tensor) -> Tensor:
        """Logits of head ``i`` for hidden rows ``h [M, d]``."""
        P = self.params
        if i == 0:
            return F.matmul(h, P["head.0.out"])
        z = h
        for blk in range(self.cfg.n_res_blocks):
            z = F.add(z, F.silu(F.add(F.matmul(z, P[f"head.{i}.block.{blk}.w"]), P[f"head.{i}.block.{blk}.b"])))
        return F.matmul(z, P[f"head.{i}.out"])

    def forward(self, text: Sequence[int], tokens: Sequence[int]) -> tuple[Tensor, list[Tensor]]:
        """Hidden states ``[T, d]`` and per-head logits ``[T, V]`` at token positions."""
        hidden, lt = self.trunk([text], [tokens])
        T, d = len(tokens), self.cfg.d_model
        rows = F.take_rows(F.reshape(hidden, (lt + T, d)), np.arange(lt, lt + T))
        return rows, [self.head(i, rows) for i in range(self.cfg.n_heads_total)]

    def attention_maps(self, text: Sequence[int], tokens: Sequence[int]) -> list[np.ndarray]:
        """Post-softmax attention per layer, each ``[n_attn_heads, L, L]``."""
        maps: list[np.ndarray] = []
        self.trunk([text], [tokens], attn_out=maps)
        return [m[0] for m in maps]

    # ------------------------------------------------------------ numpy path

    def start(self, text: Sequence[int], prompt: Sequence[int], capacity: int | None = None) -> tuple["KVCache", np.ndarray]:
        """Prefill ``[text || prompt]``; returns the cache and prompt hidden states."""
        self._check_lengths(len(text), len(prompt))
        self._check_ids(text, prompt)
        c = self.cfg
        cache = KVCache(c, len(text), capacity or c.max_seq_len)
        x = np.concatenate([self.params["text_emb"].data[list(text)] + self.pe[: len(text)],
                            self.params["tok_emb"].data[list(prompt)] + self.pe[: len(prompt)]], axis=0)
        mask = prefix_mask(len(text), len(prompt))
        h = self._run_np(x, cache, mask)
        return cache, h[len(text):]

    def extend(self, cache: "KVCache", tokens: Sequence[int]) -> np.ndarray:
        """Append accepted tokens in one batched pass; returns their hidden states ``[k, d]``."""
        k = len(tokens)
        n_tok = cache.length - cache.n_text
        self._check_lengths(cache.n_text, n_tok + k)
        self._check_ids((), tokens)
        x = self.params["tok_emb"].data[list(tokens)] + self.pe[n_tok: n_tok + k]
        mask = np.ones((k, cache.length + k), dtype=bool)
        mask[:, cache.length:] = np.tril(np.ones((k, k), dtype=bool))
        return self._run_np(x, cache, mask)

    def _run_np(self, x: np.ndarray, cache: "KVCache", mask: np.ndarray) -> np.ndarray:
        c, P = self.cfg, self.params
        H = c.n_attn_heads
        dh = c.d_model // H
        n = x.shape[0]
        start = cache.length
        stop = start + n
        if stop > cache.capacity:
            raise SequenceError("KV cache capacity exceeded")
        inv = 1.0 / float(np.sqrt(dh))
        for layer in range(c.n_layers):
            pre = f"layers.{layer}."
            h = F.layer_norm_array(x, P[pre + "ln1.g"].data, P[pre + "ln1.b"].data)
            q = (h @ P[pre + "wq"].data).reshape(n, H, dh).transpose(1, 0, 2)
            cache.k[layer][:, start:stop] = (h @ P[pre + "wk"].data).reshape(n, H, dh).transpose(1, 0, 2)
            cache.v[layer][:, start:stop] = (h @ P[pre + "wv"].data).reshape(n, H, dh).transpose(1, 0, 2)
            keys = cache.k[layer][:, :stop]
            vals = cache.v[layer][:, :stop]
            att = F.softmax_array((q @ keys.transpose(0, 2, 1)) * inv, mask[None])
            o = (att @ vals).transpose(1, 0, 2).reshape(n, c.d_model)
            x = x + o @ P[pre + "wo"].data
            h = F.layer_norm_array(x, P[pre + "ln2.g"].data, P[pre + "ln2.b"].data)
            x = x + F.silu_array(h @ P[pre + "w1"].data + P[pre + "b1"].data) @ P[pre + "w2"].data + P[pre + "b2"].data
        cache.length = stop
        return F.layer_norm_array(x, P["final_ln.g"].data, P["final_ln.b"].data)

    def head_logits(self, h: np.ndarray, n_heads: int) -> np.ndarray:
        """Logits of heads ``0..n_heads-1`` for one hidden row; shape ``[n_heads, V]``."""
        return np.stack([self.head_logits_rows(h, i) for i in range(n_heads)])

    def head_logits_rows(self, h: np.ndarray, i: int) -> np.ndarray:
        P = self.params
        if i == 0:
            return h @ P["head.0.out"].data
        z = h
        for blk in range(self.cfg.n_res_blocks):
            z = z + F.silu_array(z @ P[f"head.{i}.block.{blk}.w"].data + P[f"head.{i}.block.{blk}.b"].data)
        return z @ P[f"head.{i}.out"].data


class KVCache:
    """Per-layer keys/values for the text prefix plus accepted tokens."""

    def __init__(self, cfg: CarModelConfig, n_text: int, capacity: int):
        H = cfg.n_attn_heads
        dh = cfg.d_model // H
        dtype = F.default_dtype()
        self.k = [np.zeros((H, capacity, dh), dtype=dtype) for _ in range(cfg.n_layers)]
        self.v = [np.zeros((H, capacity, dh), dtype=dtype) for _ in range(cfg.n_layers)]
        self.n_text = n_text
        self.capacity = capacity
        self.length = 0


def forward(model: CarModel, text: Sequence[int], tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Array view of :meth:`CarModel.forward`: ``H [T, d]`` and ``logits [N+1, T, V]``."""
    h, logits = model.forward(text, tokens)
    return h.data, np.stack([lg.data for lg in logits])


# ---------------------------------------------------------------- objective

def scored_positions(n_tokens: int, prompt_len: int, n_extra: int):
    """Yield ``(t, i, target_index)`` for every scored (position, head) pair.

    Context positions run from the last prompt token to the second-to-last
    token; head ``i`` is scored only while ``t + 1 + i`` stays inside the sequence.
    """
    first = max(prompt_len, 1) - 1
    for t in range(first, n_tokens - 1):
        for i in range(min(n_extra, n_tokens - 2 - t) + 1):
            yield t, i, t + 1 + i


def _loss_layout(batch, n_extra: int, gamma: float, lt: int, ls: int):
    """Rows into the flattened hidden tensor, per-head targets and weights."""
    rows, per_head = [], [([], [], []) for _ in range(n_extra + 1)]
    row_of: dict[tuple[int, int], int] = {}
    b = len(batch)
    for bi, u in enumerate(batch):
        toks = u.target_tokens
        T = len(toks) - max(u.prompt_len, 1)
        for t, i, tgt in scored_positions(len(toks), u.prompt_len, n_extra):
            key = (bi, t)
            if key not in row_of:
                row_of[key] = len(rows)
                rows.append(bi * (lt + ls) + lt + t)
            r, tg, w = per_head[i]
            r.append(row_of[key])
            tg.append(toks[tgt])
            w.append(gamma ** i / (T * b))
    return np.array(rows, dtype=np.int64), per_head


def car_loss(model: CarModel, batch, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Batch mean of ``-(1/T) sum_t sum_{i<=N'} gamma^i log p(s_{t+1+i})``."""
    c = model.cfg
    hidden, lt = model.trunk([u.text for u in batch], [u.target_tokens for u in batch], dropout_rng)
    b, L, d = hidden.shape
    rows, per_head = _loss_layout(batch, c.n_additional_heads, c.gamma, lt, L - lt)
    h = F.take_rows(F.reshape(hidden, (b * L, d)), rows)
    total = None
    for i, (r, tg, w) in enumerate(per_head):
        if not r:
            continue
        logits = model.head(i, F.take_rows(h, np.array(r)) if len(r) != len(rows) else h)
        term = F.cross_entropy_from_logits(logits, tg, w, reduction="sum")
        total = term if total is None else F.add(total, term)
    return total if total is not None else Tensor(np.zeros(()))


def head_accuracy(model: CarModel, utterances, batch_size: int = 64) -> list[float]:
    """Teacher-forced argmax accuracy per head over all scored positions."""
    n = model.cfg.n_heads_total
    hits, counts = np.zeros(n), np.zeros(n)
    for s in range(0, len(utterances), batch_size):
        batch = utterances[s: s + batch_size]
        hidden, lt = model.trunk([u.text for u in batch], [u.target_tokens for u in batch])
        b, L, d = hidden.shape
        rows, per_head = _loss_layout(batch, n - 1, 1.0, lt, L - lt)
        h = hidden.data.reshape(b * L, d)[rows]
        for i, (r, tg, _) in enumerate(per_head):
            if not r:
                continue
            pred = model.head_logits_rows(h[np.array(r)], i).argmax(-1)
            hits[i] += np.sum(pred == np.array(tg))
            counts[i] += len(r)
    return [float(h / c) if c else 0.0 for h, c in zip(hits, counts)]

