import numpy as np
import pytest

from dcar import tensor as F
from dcar.model import (CarModel, CarModelConfig, SequenceError, car_loss, forward, head_accuracy,
                        prefix_mask, scored_positions)
from dcar.world import Utterance
from helpers import TINY_WORLD, tiny_corpus, tiny_model


def test_prefix_mask_structure():
    m = prefix_mask(2, 3)
    expected = np.array([
        [1, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0],
        [1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(m, expected)


def test_config_validation():
    with pytest.raises(ValueError):
        CarModelConfig(text_vocab=4, token_vocab=9, d_model=30, n_attn_heads=4)
    with pytest.raises(ValueError):
        CarModelConfig(text_vocab=4, token_vocab=9, gamma=0.0)
    with pytest.raises(ValueError):
        CarModelConfig(text_vocab=4, token_vocab=9, n_additional_heads=-1)


def test_additional_head_layout():
    model = tiny_model(n_extra=2)
    assert "head.0.out" in model.params and "head.0.block.0.w" not in model.params
    for h in (1, 2):
        blocks = [k for k in model.params if k.startswith(f"head.{h}.block.") and k.endswith(".w")]
        assert len(blocks) == model.cfg.n_res_blocks
    full = CarModel(CarModelConfig(text_vocab=8, token_vocab=33))
    heads = [k for k in full.params if k.startswith("head.3.block.") and k.endswith(".w")]
    assert len(heads) == 4


def test_forward_shapes():
    model = tiny_model(n_extra=3)
    h, logits = forward(model, [1, 2, 3], [0, 4, 5, 6, 7])
    assert h.shape == (5, 16)
    assert logits.shape == (4, 5, TINY_WORLD.token_vocab)


def test_text_conditioning_is_live():
    model = tiny_model()
    _, a = forward(model, [1, 2, 3], [4, 5, 6])
    _, b = forward(model, [1, 0, 3], [4, 5, 6])
    assert np.abs(a - b).max() > 1e-4


def test_token_causality():
    model = tiny_model()
    toks = [4, 5, 6, 7, 8, 9]
    _, a = forward(model, [1, 2], toks)
    changed = toks[:3] + [0] + toks[4:]
    _, b = forward(model, [1, 2], changed)
    np.testing.assert_array_equal(a[:, :3], b[:, :3])
    assert np.abs(a[:, 3:] - b[:, 3:]).max() > 1e-5


def test_text_attention_is_bidirectional_and_blind_to_tokens():
    model = tiny_model()
    maps = model.attention_maps([1, 2, 3], [4, 5])
    for m in maps:
        assert np.all(m[:, :3, 3:] == 0.0)          # text never sees tokens
        assert np.all(m[:, 0, 1:3] > 0.0)            # first text symbol sees later ones
        assert np.all(m[:, 3, 4] == 0.0)             # token is causal
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-5)


def test_sequence_limits():
    model = tiny_model(max_seq_len=8)
    with pytest.raises(SequenceError):
        forward(model, [1, 2, 3, 4], [1, 2, 3, 4, 5])
    with pytest.raises(SequenceError):
        forward(model, [1, 2], [TINY_WORLD.token_vocab])
    with pytest.raises(SequenceError):
        forward(model, [TINY_WORLD.symbol_count], [1])


def test_scored_positions_respect_sequence_end():
    # 6 tokens, prompt 2, N=3: contexts t=1..4; head i needs t+1+i <= 5
    got = list(scored_positions(6, 2, 3))
    assert got[0] == (1, 0, 2)
    assert max(tgt for _, _, tgt in got) == 5
    per_t = {}
    for t, i, _ in got:
        per_t.setdefault(t, []).append(i)
    assert per_t == {1: [0, 1, 2, 3], 2: [0, 1, 2], 3: [0, 1], 4: [0]}
    # N' = min(N, T - t) where T counts the scored targets after the prompt
    T = 6 - 2
    for t, heads in per_t.items():
        assert len(heads) - 1 == min(3, T - (t - 1) - 1)


def _manual_loss(model, batch, gamma):
    total = 0.0
    for u in batch:
        _, logits = forward(model, u.text, u.target_tokens)
        logp = F.log_softmax_array(logits.astype(np.float64))
        T = len(u.target_tokens) - u.prompt_len
        s = 0.0
        for t, i, tgt in scored_positions(len(u.target_tokens), u.prompt_len, model.cfg.n_additional_heads):
            s -= gamma ** i * logp[i, t, u.target_tokens[tgt]]
        total += s / T
    return total / len(batch)


@pytest.mark.parametrize("gamma", [1.0, 0.5])
def test_car_loss_matches_per_utterance_oracle(gamma):
    _, corpus = tiny_corpus()
    model = tiny_model(n_extra=2, gamma=gamma)
    batch = corpus["train"][:4]
    assert car_loss(model, batch).item() == pytest.approx(_manual_loss(model, batch, gamma), rel=1e-5)


def test_loss_at_init_near_uniform_bound():
    _, corpus = tiny_corpus()
    model = tiny_model(n_extra=0)
    loss = car_loss(model, corpus["train"]).item()
    assert loss == pytest.approx(np.log(TINY_WORLD.token_vocab), rel=0.1)


def test_memorised_utterance_loss_goes_to_zero():
    u = Utterance("u", (1, 2), 1, (3, 3, 7, 7, TINY_WORLD.eos))
    model = tiny_model(n_extra=1)
    params = model.parameters()
    state = F.AdamState(learning_rate=3e-3)
    for _ in range(300):
        F.zero_grads(params)
        with F.Tape() as tape:
            loss = car_loss(model, [u])
        F.backward(loss, tape)
        F.adam_step(params, state)
    assert car_loss(model, [u]).item() < 0.05
    assert head_accuracy(model, [u]) == [1.0, 1.0]


def test_batched_loss_equals_mean_of_singles():
    _, corpus = tiny_corpus()
    model = tiny_model()
    batch = corpus["train"][:5]
    singles = np.mean([car_loss(model, [u]).item() for u in batch])
    assert car_loss(model, batch).item() == pytest.approx(singles, rel=1e-5)


def test_kv_cache_matches_full_forward():
    _, corpus = tiny_corpus()
    model = tiny_model()
    u = corpus["eval"][0]
    toks = list(u.target_tokens)
    cache, h = model.start(u.text, toks[:2])
    rows = [h]
    pos = 2
    for k in (1, 3, 2, 4):
        rows.append(model.extend(cache, toks[pos: pos + k]))
        pos += k
    assert cache.length == len(u.text) + pos
    cached = np.concatenate(rows)
    full, logits = forward(model, u.text, toks[:pos])
    np.testing.assert_allclose(cached, full, atol=1e-5)
    got = np.stack([model.head_logits(r, model.cfg.n_heads_total) for r in cached], axis=1)
    np.testing.assert_allclose(got, logits, atol=1e-5)


def test_same_seed_same_parameters():
    a, b = tiny_model(seed=4), tiny_model(seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_float32_throughout():
    model = tiny_model()
    _, corpus = tiny_corpus()
    u = corpus["eval"][0]
    cache, h = model.start(u.text, list(u.target_tokens[:3]))
    assert h.dtype == np.float32
    assert model.extend(cache, list(u.target_tokens[3:5])).dtype == np.float32
    H, logits = forward(model, u.text, u.target_tokens)
    assert H.dtype == logits.dtype == np.float32
