"""Central finite-difference checks of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5
# Gradients below this magnitude are compared absolutely: the central
# difference itself carries ~1e-11 of roundoff at STEP=1e-5.
REL_FLOOR = 1e-6


def relative_error(a, b, floor: float = REL_FLOOR) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], t: Tensor, indices, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to selected flat entries of ``t``."""
    flat = t.data.reshape(-1)
    out = np.empty(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * step)
    return out


def directional_grad(f: Callable[[], float], t: Tensor, direction: np.ndarray, step: float = STEP) -> float:
    orig = t.data.copy()
    t.data[...] = orig + step * direction
    fp = f()
    t.data[...] = orig - step * direction
    fm = f()
    t.data[...] = orig
    return (fp - fm) / (2 * step)


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    directional_rel_error: float
    checked_entries: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, self.directional_rel_error)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    samples: int = 4,
    seed: int = 0,
    step: float = STEP,
) -> list[GradCheck]:
    """Compare backward() against finite differences for each tensor in ``params``.

    Per tensor: ``samples`` random coordinates (every coordinate when the
    tensor is small) plus one random direction covering all entries at once.
    """
    rng = np.random.default_rng(seed)
    for t in params.values():
        t.grad = None
    ad.backward(loss_fn())

    def value() -> float:
        with ad.no_grad():
            return loss_fn().item()

    results = []
    for name, t in params.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat_grad = analytic.reshape(-1)
        if t.size <= samples:
            idx = list(range(t.size))
        else:
            idx = sorted(rng.choice(t.size, size=samples, replace=False).tolist())
        num = numeric_grad(value, t, idx, step)
        coord_err = relative_error(num, flat_grad[idx])
        direction = rng.standard_normal(t.shape)
        direction /= np.linalg.norm(direction) or 1.0
        num_dir = directional_grad(value, t, direction, step)
        dir_err = relative_error(num_dir, float((analytic * direction).sum()))
        results.append(GradCheck(name, coord_err, dir_err, len(idx)))
    return results
