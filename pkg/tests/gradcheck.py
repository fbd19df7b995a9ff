"""Central finite-difference gradient checker and random op cases."""

from __future__ import annotations

import numpy as np

from paam import ops
from paam.tensor import Tensor

# Relative error denominator floor: entries whose true gradient is below this are
# compared in absolute terms, since relative error of a near-zero value is noise.
FLOOR = 1e-3


def _value(fn, arrays, seed):
    out = fn(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * seed))


def max_rel_error(fn, arrays, rng, h=1e-4, wrt=None) -> float:
    """Largest ``|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`` over all inputs.

    The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed Gaussian ``R``,
    so every output coordinate contributes to the check.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    ts = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*ts)
    seed = rng.normal(size=out.shape)
    out.backward(seed)
    worst = 0.0
    for i in wrt:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        it = np.nditer(arrays[i], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arrays[i][idx]
            arrays[i][idx] = orig + h
            fp = _value(fn, arrays, seed)
            arrays[i][idx] = orig - h
            fm = _value(fn, arrays, seed)
            arrays[i][idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), FLOOR))
    return worst


def _away_from_zero(rng, shape, margin=1e-2):
    # Kinked ops (relu, |x|, leaky activations) are checked away from the kink.
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _dims(rng, lo=1, hi=4, n=2):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=n))


def _broadcast_pair(rng):
    shape = _dims(rng, 1, 4, int(rng.integers(1, 4)))
    other = tuple(1 if rng.random() < 0.3 else d for d in shape)
    if rng.random() < 0.3:
        other = other[1:] or (1,)
    return shape, other


def case_add(rng):
    a, b = _broadcast_pair(rng)
    return ops.add, [rng.normal(size=a), rng.normal(size=b)]


def case_sub(rng):
    a, b = _broadcast_pair(rng)
    return ops.sub, [rng.normal(size=b), rng.normal(size=a)]


def case_mul(rng):
    a, b = _broadcast_pair(rng)
    return ops.mul, [rng.normal(size=a), rng.normal(size=b)]


def case_div(rng):
    a, b = _broadcast_pair(rng)
    den = rng.uniform(0.5, 2.0, size=b) * rng.choice([-1, 1], size=b)
    return ops.div, [rng.normal(size=a), den]


def case_sum_all(rng):
    return ops.sum_all, [rng.normal(size=_dims(rng, 1, 5, 3))]


def case_mean_all(rng):
    return ops.mean_all, [rng.normal(size=_dims(rng, 1, 5, 3))]


def case_reshape(rng):
    a, b = _dims(rng)
    return (lambda t: ops.reshape(t, (b, a))), [rng.normal(size=(a, b))]


def case_transpose(rng):
    return ops.transpose, [rng.normal(size=_dims(rng))]


def case_flatten(rng):
    return ops.flatten, [rng.normal(size=_dims(rng, 1, 3, 4))]


def case_matmul(rng):
    m, k, n = _dims(rng, 1, 5, 3)
    return ops.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def case_linear(rng):
    n, i, o = _dims(rng, 1, 5, 3)
    if rng.random() < 0.5:
        return ops.linear, [rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o)]
    return ops.linear, [rng.normal(size=(n, i)), rng.normal(size=(o, i))]


def case_reduce_mean_rows(rng):
    return ops.reduce_mean_rows, [rng.normal(size=_dims(rng, 1, 5))]


def case_conv2d(rng):
    n, c, f = _dims(rng, 1, 3, 3)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    h = int(rng.integers(max(k - 2 * pad, 1), 6))
    w = int(rng.integers(max(k - 2 * pad, 1), 6))
    x = rng.normal(size=(c, h, w) if rng.random() < 0.15 else (n, c, h, w))
    return (lambda a, b: ops.conv2d(a, b, stride, pad)), [x, rng.normal(size=(f, c, k, k))]


def case_pointwise_mul_broadcast(rng):
    f, h, w = _dims(rng, 1, 4, 3)
    maps = rng.normal(size=(f, h, w) if rng.random() < 0.5 else (2, f, h, w))
    return ops.pointwise_mul_broadcast, [rng.normal(size=f), maps]


def case_relu(rng):
    return ops.relu, [_away_from_zero(rng, _dims(rng, 1, 5, 3))]


def case_channel_norm(rng):
    n, c, h = _dims(rng, 1, 3, 3)
    mean = rng.normal(size=c)
    var = rng.uniform(0.2, 2.0, size=c)
    return ((lambda x, g, b: ops.channel_norm(x, g, b, mean, var)),
            [rng.normal(size=(n, c, h, h)), rng.normal(size=c), rng.normal(size=c)])


def case_global_average_pool(rng):
    return ops.global_average_pool, [rng.normal(size=_dims(rng, 1, 4, 4))]


def case_shortcut_pad(rng):
    n, c, h = _dims(rng, 1, 4, 3)
    stride = int(rng.choice([1, 2]))
    extra = int(rng.integers(0, 4))
    return (lambda x: ops.shortcut_pad(x, stride, c + extra)), [rng.normal(size=(n, c, h, h))]


def case_l1_norm(rng):
    return ops.l1_norm, [_away_from_zero(rng, (int(rng.integers(1, 8)),))]


def case_cross_entropy(rng):
    n, k = _dims(rng, 1, 6)
    labels = rng.integers(0, k, size=n)
    if rng.random() < 0.2:
        return (lambda z: ops.cross_entropy(z, labels[:1])), [3 * rng.normal(size=k)]
    return (lambda z: ops.cross_entropy(z, labels)), [3 * rng.normal(size=(n, k))]


def case_leaky_expo(rng):
    a = float(rng.uniform(1e-3, 0.5))
    return (lambda x: ops.leaky_expo(x, a)), [_away_from_zero(rng, _dims(rng, 1, 5)) * 2]


def case_leaky_2sigmoid(rng):
    a = float(rng.uniform(1e-3, 0.5))
    return (lambda x: ops.leaky_2sigmoid(x, a)), [_away_from_zero(rng, _dims(rng, 1, 5)) * 2]


def case_sigmoid(rng):
    t = float(rng.choice([1.0, 5.0]))
    return (lambda x: ops.sigmoid(x, t)), [rng.normal(size=_dims(rng, 1, 5))]


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}
