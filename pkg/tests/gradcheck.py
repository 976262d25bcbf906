"""Central finite differences for backward-pass tests."""

import numpy as np


def numeric_grad(f, x, eps=1e-6):
    """d f / d x for scalar ``f`` by central differences; ``x`` is perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    """Largest absolute disagreement relative to the gradient's scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def sampled_grad_error(f, x, analytic, rng, count=25, eps=1e-6):
    """Relative error over ``count`` random coordinates of ``x``."""
    flat = x.reshape(-1)
    picks = rng.choice(flat.size, size=min(count, flat.size), replace=False)
    num = np.empty(picks.size)
    for j, i in enumerate(picks):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        num[j] = (fp - fm) / (2 * eps)
    return rel_error(analytic.reshape(-1)[picks], num)
