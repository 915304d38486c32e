"""Independent reference computations used by the tests.

Nothing here imports from the package under test.
"""

import itertools
import math

import numpy as np
import torch


def central_difference(fn, params, h=1e-5):
    """Numerical gradient of scalar ``fn()`` with respect to every entry of ``params``.

    Entries are perturbed in place and restored. Returns a list of tensors
    shaped like ``params``.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_errors(analytic, numeric, floor=1e-7):
    """Per-entry |a - n| / max(|a|, |n|, floor), concatenated."""
    out = []
    for a, n in zip(analytic, numeric):
        a = a.reshape(-1).double()
        n = n.reshape(-1).double()
        out.append((a - n).abs() / torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor)))
    return torch.cat(out) if out else torch.empty(0)


def ordered_draws(p, k):
    """Every ordered k-sequence drawn without replacement, with its probability."""
    n = len(p)
    for seq in itertools.permutations(range(n), k):
        prob, left = 1.0, 1.0
        for v in seq:
            prob *= p[v] / left
            left -= p[v]
        yield seq, prob


def inclusion_probabilities(p, k):
    """P(node v is among k sequential draws without replacement), by enumeration."""
    inc = np.zeros(len(p))
    for seq, prob in ordered_draws(p, k):
        for v in seq:
            inc[v] += prob
    return inc


def subset_probabilities(p, k):
    """P(unordered subset) for k draws without replacement."""
    out = {}
    for seq, prob in ordered_draws(p, k):
        key = tuple(sorted(seq))
        out[key] = out.get(key, 0.0) + prob
    return out


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def binomial_interval(n, p, z=3.0):
    """Normal-approximation interval for a Binomial(n, p) proportion."""
    sd = math.sqrt(p * (1 - p) / n)
    return p - z * sd, p + z * sd


def gradient_check_ok(errs, typical=1e-4, share=0.99, worst=1e-2):
    """At least ``share`` of entries below ``typical`` and none above ``worst``."""
    if errs.numel() == 0:
        return True
    return float((errs < typical).double().mean()) >= share and float(errs.max()) < worst


def central_difference_many(fn, params, h=1e-5):
    """Like :func:`central_difference` for a vector-valued ``fn``.

    Returns ``grads[j][i]``: derivative of output ``j`` with respect to ``params[i]``.
    """
    per_param = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            cols = []
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = torch.as_tensor(fn(), dtype=torch.float64)
                flat[i] = orig - h
                down = torch.as_tensor(fn(), dtype=torch.float64)
                flat[i] = orig
                cols.append((up - down) / (2 * h))
            per_param.append(torch.stack(cols, dim=1).reshape(-1, *p.shape))
    n_out = per_param[0].shape[0]
    return [[g[j] for g in per_param] for j in range(n_out)]
