"""Independent reference computations used by the tests."""

import numpy as np
import torch


def central_difference(f, tensor, index, eps=1e-6):
    """d f / d tensor[index] by a symmetric difference, evaluated in place."""
    with torch.no_grad():
        old = tensor[index].item()
        tensor[index] = old + eps
        hi = float(f())
        tensor[index] = old - eps
        lo = float(f())
        tensor[index] = old
    return (hi - lo) / (2 * eps)


def relative_error(a, b):
    return abs(a - b) / max(abs(a) + abs(b), 1e-8)


def max_gradient_error(f, tensors, per_tensor=20, seed=0, eps=1e-6):
    """Largest relative error between autograd and finite differences.

    ``f`` returns a scalar tensor built from ``tensors`` (all float64 with
    ``requires_grad``).  A random subset of entries of each tensor is probed.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        g = t.grad.detach().clone()
        flat = rng.choice(t.numel(), size=min(per_tensor, t.numel()), replace=False)
        for i in flat:
            idx = np.unravel_index(int(i), tuple(t.shape))
            num = central_difference(f, t.data, idx, eps)
            worst = max(worst, relative_error(g[idx].item(), num))
    return worst


def silhouette(x, labels):
    """Mean silhouette coefficient for 1-D features."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    d = np.abs(x[:, None] - x[None, :])
    s = np.zeros(len(x))
    for i in range(len(x)):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue
        a = d[i, same].mean()
        b = min(d[i, labels == c].mean() for c in np.unique(labels) if c != labels[i])
        s[i] = (b - a) / max(a, b)
    return float(s.mean())
