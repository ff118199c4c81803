"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor, backward


def finite_difference_check(f: Callable[..., Tensor], point, h: float = 1e-3) -> float:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` receives one float64 :class:`Tensor` per array in ``point`` and
    must return a scalar tensor. Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [
        np.array(p, dtype=np.float64) for p in point]

    leaves = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("f is not finite at the base point")
    if out.requires_grad:
        backward(tape, out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(vals: Sequence[np.ndarray]) -> float:
        y = f(*[Tensor(v, dtype=np.float64) for v in vals])
        val = float(np.asarray(y.data).reshape(-1)[0])
        if not np.isfinite(val):
            raise FloatingPointError("f is not finite at a probe point")
        return val

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = evaluate(arrays)
            flat[idx] = orig - h
            down = evaluate(arrays)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[k].reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def module_gradient_check(module, forward: Callable, h: float = 1e-3,
                          names: Sequence[str] | None = None) -> float:
    """Finite-difference check of ``forward(m) -> scalar`` over a module's parameters.

    Runs on a float64 copy of ``module``; ``names`` restricts the probed
    parameters (all by default).
    """
    m = module.astype(np.float64)
    params = m.named_parameters()
    names = list(params) if names is None else list(names)
    point = [params[n].data.copy() for n in names]

    def f(*leaves):
        m.assign(dict(zip(names, leaves)))
        return forward(m)

    return finite_difference_check(f, point, h)
