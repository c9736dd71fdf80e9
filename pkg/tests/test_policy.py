import numpy as np
import pytest

from dcar import tensor as F
from dcar.model import CarModel, CarModelConfig
from dcar.policy import PolicyConfig, SchedulerPolicy, action_logits, act, log_prob_of

D = 16


def make_policy(seed=0, actions=(1, 2, 3, 4)):
    return SchedulerPolicy(PolicyConfig(d_model=D, action_set=actions, d_policy=8, n_attn_heads=2, d_ff=8, seed=seed))


def hidden(T=7, seed=0):
    return np.random.default_rng(seed).normal(size=(T, D)).astype(np.float32)


@pytest.mark.parametrize("actions", [(), (0, 1), (2, 1), (1, 1)])
def test_action_set_validation(actions):
    with pytest.raises(ValueError):
        PolicyConfig(d_model=D, action_set=actions)


def test_logits_shape_and_dim_check():
    p = make_policy()
    assert action_logits(p, hidden()).shape == (7, 4)
    with pytest.raises(ValueError):
        p.action_logits(np.zeros((3, D + 1)))


def test_causality():
    p = make_policy()
    H = hidden()
    a = action_logits(p, H)
    H2 = H.copy()
    H2[4] += 3.0
    b = action_logits(p, H2)
    np.testing.assert_array_equal(a[:4], b[:4])
    assert np.abs(a[4:] - b[4:]).max() > 0


def test_near_uniform_at_init():
    p = make_policy()
    ent = []
    for s in range(20):
        logp = F.log_softmax_array(action_logits(p, hidden(10, s)).astype(np.float64))
        ent.append(-(np.exp(logp) * logp).sum(-1).mean())
    assert np.mean(ent) >= 0.8 * np.log(4)


def test_act_argmax_deterministic_and_consistent():
    p = make_policy()
    H = hidden()
    a1, lp1 = act(p, H, 5, "argmax")
    a2, lp2 = act(p, H, 5, "argmax")
    assert (a1, lp1) == (a2, lp2)
    assert a1 in p.action_set
    assert log_prob_of(p, H, [5], [a1])[0] == pytest.approx(lp1, abs=1e-6)


def test_sampling_frequencies_within_three_sigma():
    p = make_policy(seed=3)
    for t in p.params.values():
        t.data *= 20.0  # sharpen so the probabilities are far from uniform
    H = hidden()
    probs = np.exp(F.log_softmax_array(action_logits(p, H)[3].astype(np.float64)))
    rng = np.random.default_rng(0)
    n = 10_000
    draws = [act(p, H, 3, "sample", rng)[0] for _ in range(n)]
    counts = np.array([draws.count(a) for a in p.action_set])
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 3 * sigma + 1)


def test_log_probs_normalised_and_range_checked():
    p = make_policy()
    H = hidden()
    total = sum(np.exp(log_prob_of(p, H, [2], [a])[0]) for a in p.action_set)
    assert total == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValueError):
        log_prob_of(p, H, [2], [5])


def test_session_matches_full_evaluation():
    p = make_policy(seed=2)
    H = hidden(9)
    full = action_logits(p, H)
    sess = p.session("argmax", None)
    start = 0
    for k in (3, 1, 2, 3):
        sess.observe(H[start: start + k])
        start += k
        np.testing.assert_allclose(sess.last_logits, full[start - 1], atol=1e-5)
        a, lp = sess.decide()
        assert a == p.action_set[int(np.argmax(full[start - 1]))]


def test_one_step_increases_rewarded_action():
    p = make_policy(seed=4)
    H = hidden()
    before = log_prob_of(p, H, [6], [3])[0]
    params = p.parameters()
    F.zero_grads(params)
    with F.Tape() as tape:
        loss = F.scale(F.sum(p.log_prob_of(H, [6], [3])), -1.0)
    F.backward(loss, tape)
    F.adam_step(params, F.AdamState(learning_rate=1e-2))
    assert log_prob_of(p, H, [6], [3])[0] > before


def test_lightweight_relative_to_base():
    base = CarModel(CarModelConfig(text_vocab=8, token_vocab=33))
    pol = SchedulerPolicy(PolicyConfig(d_model=128))
    assert pol.n_parameters() < 0.05 * base.n_parameters()


def test_copy_is_independent():
    p = make_policy()
    q = p.copy()
    q.params["w_out"].data += 1.0
    assert not np.array_equal(p.params["w_out"].data, q.params["w_out"].data)
