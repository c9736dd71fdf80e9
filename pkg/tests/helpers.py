"""Shared test utilities: a central-difference gradient checker and tiny fixtures."""
from __future__ import annotations

import numpy as np

from dcar import tensor as F
from dcar.model import CarModel, CarModelConfig
from dcar.world import CorpusSpec, WorldConfig, build_corpus

TINY_WORLD = WorldConfig(symbol_count=6, region_size=3, run_length_min=2, run_length_max=4, seed=3)


def tiny_model(n_extra=3, seed=0, d_model=16, max_seq_len=64, **kw) -> CarModel:
    cfg = CarModelConfig(text_vocab=TINY_WORLD.symbol_count, token_vocab=TINY_WORLD.token_vocab,
                         n_layers=2, n_attn_heads=2, d_model=d_model, d_ff=32,
                         n_additional_heads=n_extra, max_seq_len=max_seq_len, n_res_blocks=2,
                         seed=seed, **kw)
    return CarModel(cfg)


def tiny_corpus(n=12, seed=3):
    world = WorldConfig(**{**TINY_WORLD.to_dict(), "seed": seed})
    return world, build_corpus(world, CorpusSpec(n_train=n, n_eval=n, n_policy=n,
                                                 text_len_min=3, text_len_max=6))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, robust to individual near-zero entries."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, inputs, rng, eps=3e-3, max_entries=24):
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences.

    ``inputs`` are float arrays; the probe ``R`` is a fixed random projection
    so that every output element contributes. At most ``max_entries`` random
    coordinates per input are perturbed. Returns the worst relative error.
    """
    tensors = [F.Tensor(x, requires_grad=True) for x in inputs]
    with F.Tape() as tape:
        out = fn(*tensors)
        probe = rng.standard_normal(out.shape).astype(out.data.dtype)
        loss = F.sum(F.mul(out, F.Tensor(probe)))
    F.backward(loss, tape)

    def value(arrs):
        return float(np.sum(np.asarray(fn(*[F.Tensor(a) for a in arrs]).data, np.float64) * probe))

    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.size
        picks = rng.choice(flat, size=min(flat, max_entries), replace=False)
        num, ana = [], []
        for j in picks:
            arrs = [x.data.copy() for x in tensors]
            idx = np.unravel_index(j, t.shape)
            arrs[k][idx] += eps
            up = value(arrs)
            arrs[k][idx] -= 2 * eps
            down = value(arrs)
            num.append((up - down) / (2 * eps))
            ana.append(analytic[idx])
        worst = max(worst, relative_error(ana, num))
    return worst


def _away_from(x, points, gap):
    """Nudge entries of ``x`` that sit within ``gap`` of a kink."""
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-12) * gap, x)
    return x


def primitive_cases(rng):
    """One randomly shaped instance of every differentiable primitive.

    Returns ``(name, fn, inputs)`` triples suitable for :func:`gradcheck`.
    """
    m, n, k, b = (int(v) for v in rng.integers(2, 6, size=4))
    f32 = np.float32

    def u(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape).astype(f32)

    a_mn = u(m, n)
    gap = rng.choice([-1, 1], size=(m, n)) * rng.uniform(0.1, 1.0, size=(m, n))
    mask = rng.random((b, m, m)) < 0.7
    mask[..., 0] = True
    rows = rng.integers(0, m, size=k)
    cols = rng.integers(0, n, size=k)
    targets = rng.integers(0, n, size=m)
    weights = rng.uniform(0.1, 1.0, size=m)
    perm = tuple(int(i) for i in rng.permutation(3))
    axis = int(rng.integers(0, 2))
    p = float(rng.uniform(0.1, 0.5))
    drop_seed = int(rng.integers(1 << 30))
    scale = float(rng.uniform(-2, 2))
    return [
        ("add", F.add, [u(m, n), u(n)]),
        ("sub", F.sub, [u(m, n), u(m, n)]),
        ("mul", F.mul, [u(m, n), u(n)]),
        ("scale", lambda a: F.scale(a, scale), [u(m, n)]),
        ("exp", F.exp, [u(m, n)]),
        ("log", F.log, [u(m, n, lo=0.5, hi=2.0)]),
        ("silu", F.silu, [u(m, n, lo=-3, hi=3)]),
        ("minimum", F.minimum, [a_mn, (a_mn + gap).astype(f32)]),
        ("clip", lambda a: F.clip(a, -0.8, 0.8), [_away_from(u(m, n, lo=-2, hi=2), (-0.8, 0.8), 0.05).astype(f32)]),
        ("dropout", lambda a: F.dropout(a, p, np.random.default_rng(drop_seed)), [u(m, n)]),
        ("sum", F.sum, [u(m, n)]),
        ("mean", F.mean, [u(b, m, n)]),
        ("matmul", F.matmul, [u(m, k), u(k, n)]),
        ("matmul_broadcast", F.matmul, [u(b, m, k), u(k, n)]),
        ("matmul_batched", F.matmul, [u(b, m, k), u(b, k, n)]),
        ("reshape", lambda a: F.reshape(a, (n, m)), [u(m, n)]),
        ("transpose", lambda a: F.transpose(a, perm), [u(b, m, n)]),
        ("concat", lambda x, y: F.concat([x, y], axis), [u(m, n), u(m, n)]),
        ("take_rows", lambda a: F.take_rows(a, rows % m), [u(m, n)]),
        ("gather", lambda a: F.gather(a, rows, cols), [u(m, n)]),
        ("softmax", lambda a: F.softmax(a, mask), [u(b, m, m, lo=-2, hi=2)]),
        ("log_softmax", F.log_softmax, [u(m, n, lo=-2, hi=2)]),
        ("layer_norm", F.layer_norm, [u(m, n + 2, lo=-2, hi=2), u(n + 2, lo=0.5, hi=1.5), u(n + 2)]),
        ("cross_entropy_mean", lambda a: F.cross_entropy_from_logits(a, targets, weights), [u(m, n, lo=-2, hi=2)]),
        ("cross_entropy_sum", lambda a: F.cross_entropy_from_logits(a, targets, weights, "sum"), [u(m, n, lo=-2, hi=2)]),
    ]


PRIMITIVES = [name for name, _, _ in primitive_cases(np.random.default_rng(0))]


def randomize(model, rng, std=0.5):
    """Re-draw every parameter around a generic point.

    At the training init the attention projections get gradients near 1e-6,
    below what float32 differences of an O(10) loss can resolve.
    """
    for name, t in model.params.items():
        base = 1.0 if name.endswith(".g") else 0.0
        t.data[...] = base + rng.normal(0.0, std, t.shape)
    return model


def model_gradcheck(model, batch, rng, eps=3e-2, entries=6, tensors=8):
    """Central differences of the CAR loss w.r.t. random parameter entries.

    Returns the worst per-tensor relative error over ``tensors`` randomly
    chosen parameter tensors.
    """
    from dcar.model import car_loss
    params = model.parameters()
    F.zero_grads(params)
    with F.Tape() as tape:
        loss = car_loss(model, batch)
    F.backward(loss, tape)
    names = list(model.params)
    worst = 0.0
    for name in rng.choice(names, size=min(tensors, len(names)), replace=False):
        t = model.params[name]
        grad = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        picks = rng.choice(t.data.size, size=min(entries, t.data.size), replace=False)
        num, ana = [], []
        for j in picks:
            idx = np.unravel_index(j, t.shape)
            keep = t.data[idx]
            f = {}
            for step in (-2, -1, 1, 2):
                t.data[idx] = keep + step * eps
                f[step] = car_loss(model, batch).item()
            t.data[idx] = keep
            # five-point stencil: O(eps^4) truncation lets eps grow past float32 noise
            num.append((f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * eps))
            ana.append(grad[idx])
        worst = max(worst, relative_error(ana, num))
    return worst
