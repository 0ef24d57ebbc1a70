"""Central finite-difference gradient checking.

Used two ways: the unit tests call ``check_gradients`` per op, and the
``gradcheck`` CLI command sweeps every op plus the full fusion pipeline
parameter groups and reports the worst relative error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor

DEFAULT_EPS = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error, relative above 1 and absolute below."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    diff = np.abs(analytic - numeric) / denom
    return float(diff.max()) if diff.size else 0.0


def numerical_gradient(f: Callable[[], float], x: Tensor,
                       eps: float = DEFAULT_EPS,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``x``.

    ``f`` must re-run the forward computation reading ``x.data``. With
    ``indices`` only those flat coordinates are probed; other entries of
    the returned array are zero.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def check_gradients(build: Callable[[], Tensor], wrt: Sequence[Tensor],
                    eps: float = DEFAULT_EPS,
                    indices: Sequence[int] | None = None) -> float:
    """Compare taped gradients of a scalar ``build()`` against differences.

    Returns the worst relative error over all checked tensors. ``build``
    must be a pure function of the ``wrt`` tensors' current data.
    """
    with Tape() as tape:
        loss = build()
    analytic = tape.gradients(loss, wrt)

    worst = 0.0
    for x, ga in zip(wrt, analytic):
        idx = indices
        gn = numerical_gradient(lambda: build().item(), x, eps=eps, indices=idx)
        if idx is not None:
            flat_a = np.zeros_like(ga.reshape(-1))
            flat_a[list(idx)] = ga.reshape(-1)[list(idx)]
            ga = flat_a.reshape(ga.shape)
        worst = max(worst, relative_error(ga, gn))
    return worst


def fixed_projection(shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    """Constant random direction for scalarizing an output under test.

    A plain sum hides sign and transposition mistakes; projecting against
    an arbitrary fixed direction does not. Create the projection once and
    close over it so repeated forward evaluations see the same functional.
    """
    return Tensor(rng.standard_normal(shape))
