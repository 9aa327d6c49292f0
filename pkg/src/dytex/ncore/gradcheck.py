"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

_SUBSET_LIMIT = 10_000


def grad_check(op_graph: Callable[..., Tensor], inputs: Sequence[Tensor],
               epsilon: float = 1e-6, subset_seed: int = 0) -> float:
    """Compare taped gradients of ``op_graph(*inputs)`` to central differences.

    Returns the maximum per-coordinate error
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. When the
    total coordinate count exceeds 10^4, a seeded random subset of that
    size is checked instead.
    """
    if not (1e-8 < epsilon < 1e-2):
        raise ValueError("epsilon must lie in (1e-8, 1e-2)")
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    with Tape() as tape:
        loss = op_graph(*inputs)
    backward(loss, tape)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy()
                for x in inputs]

    coords = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if len(coords) > _SUBSET_LIMIT:
        rng = np.random.default_rng(subset_seed)
        pick = rng.choice(len(coords), size=_SUBSET_LIMIT, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        saved = flat[j]
        flat[j] = saved + epsilon
        f_plus = op_graph(*inputs).item()
        flat[j] = saved - epsilon
        f_minus = op_graph(*inputs).item()
        flat[j] = saved
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
