"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np


def numeric_grad(loss_fn, param, h=1e-5, entries=None):
    flat = param.data.reshape(-1)
    if entries is None:
        idx = range(flat.size)
    elif isinstance(entries, int):
        # a fixed random sample keeps big tensors cheap to probe
        idx = np.random.default_rng(flat.size).choice(flat.size, min(entries, flat.size), replace=False)
    else:
        idx = entries
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def rel_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error; ``floor`` sits above central-difference round-off
    (about eps * |loss| / h), so a gradient that is exactly zero compares absolutely."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(loss_fn, params, h=1e-5, entries=None):
    """Worst norm-wise relative error between backprop and central differences."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        num = numeric_grad(loss_fn, p, h, entries)
        keys = sorted(num)
        ana = p.grad.reshape(-1)[keys]
        worst = max(worst, rel_error(ana, [num[k] for k in keys]))
    return worst
