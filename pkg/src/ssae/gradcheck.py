"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor, backward, record_kinks
from .errors import ContractError


def relative_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    probes: int = 10,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_redraws: int = 50,
) -> float:
    """Max relative error between backprop and central differences.

    ``probes`` random entries are checked per parameter tensor (all entries
    when the tensor is smaller). An entry whose +-h stencil flips the sign of
    any leaky-relu input straddles a kink, where the loss has no derivative;
    such entries are replaced by fresh random draws.
    """
    rng = rng or np.random.default_rng(0)
    with record_kinks() as base:
        backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        exhaustive = flat.size <= probes
        queue = list(range(flat.size)) if exhaustive else list(rng.permutation(flat.size))
        checked = redraws = 0
        for i in queue:
            if checked == (flat.size if exhaustive else probes):
                break
            orig = flat[i]
            flat[i] = orig + h
            with record_kinks() as k_up:
                up = float(loss_fn().values)
            flat[i] = orig - h
            with record_kinks() as k_down:
                down = float(loss_fn().values)
            flat[i] = orig
            if not (_same_pattern(base, k_up) and _same_pattern(base, k_down)):
                redraws += 1
                if exhaustive or redraws > max_redraws:
                    raise ContractError(f"{name}[{i}]: finite-difference stencil crosses a kink; use a smaller h")
                continue
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
            checked += 1
    return worst
