"""Shared test utilities: finite-difference gradients and small fixtures."""
import numpy as np

H = 1e-4


def rel_err(a, b):
    """Elementwise |a-b| / max(|a|, |b|, 1), reduced with max."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0), initial=0.0))


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def sampled_numeric_grad(f, x, idx, h=H):
    """Central differences at a subset of flat indices."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def kink_safe_grad(f, x, idx, h=H):
    """Central differences for ``f() -> (value, pattern)`` at flat indices ``idx``.

    Entries whose +h or -h evaluation changes the piecewise-linear ``pattern``
    (a ReLU crossed its kink) are not differentiable there and come back NaN.
    """
    flat = x.reshape(-1)
    _, base = f()
    out = np.full(len(idx), np.nan)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up, pu = f()
        flat[i] = old - h
        down, pd = f()
        flat[i] = old
        if np.array_equal(pu, base) and np.array_equal(pd, base):
            out[k] = (up - down) / (2 * h)
    return out


def random_batch(rng, b=2, n=3, t=4, f=3, ragged=True):
    """Random normalized batch arrays with some padding."""
    x = rng.normal(size=(b, n, t, f))
    valid = np.ones((b, n, t), dtype=bool)
    if ragged:
        for i in range(b):
            lens = rng.integers(1, t + 1, size=n)
            lens[0] = t
            valid[i] = np.arange(t)[None, :] < lens[:, None]
    x[~valid] = 0.0
    start = rng.integers(0, 3, size=(b, n))
    return x, valid, start
