"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, no_grad, trace_kinks

__all__ = ["NonDeterministicError", "finite_difference_check", "relative_errors", "FLOOR"]

# Denominator floor of the relative error. Coordinates whose analytic and
# numeric gradients are both below it (e.g. the exactly-zero gradient of a
# bias that a softmax cancels) are held to an absolute tolerance of
# tol * FLOOR instead; central differences at eps = 1e-4 carry about 1e-11
# of round-off, which would otherwise swamp a relative comparison.
FLOOR = 1e-6


class NonDeterministicError(RuntimeError):
    pass


def _evaluate(f: Callable[[Tensor], Tensor], x: Tensor) -> tuple[float, list]:
    with trace_kinks() as log, no_grad():
        y = f(x)
    if y.data.size != 1:
        raise ValueError(f"gradient check needs a scalar-valued function, got shape {y.shape}")
    return float(y.data.reshape(-1)[0]), log


def _same_piece(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x == y for x, y in zip(a, b))


def relative_errors(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    coords: Optional[np.ndarray] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = FLOOR,
) -> tuple[np.ndarray, int]:
    """Per-coordinate relative errors of the analytic gradient of ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored, so ``f`` may ignore its
    argument and read ``x`` through a closure (useful for parameters).
    Coordinates whose +/-eps evaluations cross a ReLU, pooling or abs kink
    are skipped; when sampling, a fresh coordinate is drawn instead.

    Returns the error array and the number of skipped coordinates.
    """
    if x.data.dtype != np.float64:
        raise TypeError("finite-difference checks run in float64; got " + str(x.data.dtype))
    if not x.requires_grad:
        raise ValueError("x must require grad")

    saved = x.grad
    x.grad = None
    with trace_kinks() as base_log:
        y = f(x)
    if y.data.size != 1:
        raise ValueError(f"gradient check needs a scalar-valued function, got shape {y.shape}")
    y0 = float(y.data.reshape(-1)[0])
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved

    y0_again, _ = _evaluate(f, x)
    if y0_again != y0:
        raise NonDeterministicError(f"two forward passes disagree: {y0!r} vs {y0_again!r}")

    flat = x.data.reshape(-1)
    size = flat.size
    if coords is None:
        if max_coords is None or max_coords >= size:
            queue = list(range(size))
            resample = False
        else:
            rng = rng or np.random.default_rng(0)
            queue = list(rng.permutation(size))
            resample = True
            budget = max_coords
    else:
        queue = [int(c) for c in coords]
        resample = False
    target = budget if resample else len(queue)

    errors: list[float] = []
    skipped = 0
    grad_flat = analytic.reshape(-1)
    for idx in queue:
        if len(errors) >= target:
            break
        orig = flat[idx]
        flat[idx] = orig + eps
        fp, log_p = _evaluate(f, x)
        flat[idx] = orig - eps
        fm, log_m = _evaluate(f, x)
        flat[idx] = orig
        if not (_same_piece(log_p, base_log) and _same_piece(log_m, base_log)):
            skipped += 1
            continue
        numeric = (fp - fm) / (2 * eps)
        a = float(grad_flat[idx])
        errors.append(abs(a - numeric) / max(floor, abs(a) + abs(numeric)))
    return np.asarray(errors), skipped


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at each coordinate is
    ``|analytic - numeric| / max(FLOOR, |analytic| + |numeric|)``.
    With ``max_coords`` set, that many coordinates are sampled at random.
    """
    errs, _ = relative_errors(f, x, eps=eps, max_coords=max_coords, rng=rng)
    if errs.size == 0:
        raise RuntimeError("every checked coordinate sat on a kink; resample the input")
    return float(errs.max())
