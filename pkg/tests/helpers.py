"""Shared test oracles."""

import numpy as np

from bdlm import tensor as T


def numeric_grad(f, x: np.ndarray, coords, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` at flat ``coords`` (x mutated in place)."""
    flat = x.reshape(-1)
    out = []
    for c in coords:
        old = flat[c]
        flat[c] = old + eps
        up = f()
        flat[c] = old - eps
        down = f()
        flat[c] = old
        out.append((up - down) / (2 * eps))
    return np.array(out)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_grad(build, inputs, rng, n_coords=None, eps=1e-4):
    """Analytic vs central-difference gradient of sum(w * build(*inputs)) for a random w.

    Returns the worst relative error over all inputs.
    """
    ts = [T.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*ts)
    w = rng.standard_normal(out.shape)

    def value():
        return float((build(*[T.Tensor(t.data) for t in ts]).data * w).sum())

    loss = T.total(T.mul(out, T.Tensor(w)))
    T.backward(loss)
    worst = 0.0
    for t in ts:
        coords = np.arange(t.size) if n_coords is None else rng.choice(t.size, min(n_coords, t.size), replace=False)
        num = numeric_grad(value, t.data, coords, eps)
        worst = max(worst, rel_err(t.grad.reshape(-1)[coords], num))
    return worst
