"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, zero_grads


def check_gradients(loss_fn, named_params, inputs=(), h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must be a zero-argument closure over ``named_params`` (and
    optionally the extra input tensors) returning a scalar Tensor; it is
    re-evaluated many times, so it has to be deterministic. The error per
    entry is |analytic - cd| / (|analytic| + |cd| + 1e-12), maximized over
    every entry of every parameter and every supplied input.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step size h must be in [1e-7, 1e-3], got {h}")
    targets: list[tuple[str, Tensor]] = list(named_params)
    targets += [(t.name or f"input{i}", t) for i, t in enumerate(inputs)]
    tensors = [t for _, t in targets]

    zero_grads(tensors)
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    worst = 0.0
    for (name, t), ana in zip(targets, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite value while perturbing {name}[{i}]"
                )
            cd = (up - down) / (2.0 * h)
            a = float(ana.reshape(-1)[i])
            rel = abs(a - cd) / (abs(a) + abs(cd) + 1e-12)
            worst = max(worst, rel)
    return worst
