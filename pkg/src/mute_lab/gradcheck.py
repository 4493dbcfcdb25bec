"""Finite-difference gradient checking.

The checker compares the engine's reverse-mode gradient of a scalar
function against central differences, coordinate by coordinate, and
reports the worst relative discrepancy.  Functions must be deterministic;
a probe evaluation guards against hidden randomness.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, GradCheckError
from .tensor import Tensor, backward, no_grad


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Return the max relative error between analytic and numeric gradients.

    ``f`` maps the tensor ``x`` to a scalar :class:`Tensor`.  The error at
    each coordinate is ``|analytic - central| / max(|analytic|, |central|,
    1e-8)``.  Run in double precision; single precision drowns the
    differences in rounding noise.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    if not np.issubdtype(x.data.dtype, np.float64):
        raise ContractError("grad_check requires a double-precision input")
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)

    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.shape != ():
        raise ContractError("grad_check target must return a scalar")
    with no_grad():
        probe_a = float(f(x).data)
        probe_b = float(f(x).data)
    if probe_a != probe_b:
        raise GradCheckError("function is not deterministic; check aborted")

    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, dtype=np.float64)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f(x).data)
            flat[i] = keep - h
            down = float(f(x).data)
            flat[i] = keep
            numeric[i] = (up - down) / (2.0 * h)

    ana = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(ana - numeric) / denom))


def check_parameters(build_loss, params, h: float = 1e-5) -> dict:
    """Gradient-check a loss against several named parameters.

    ``build_loss`` takes no arguments and returns the scalar loss built
    from the current parameter values; ``params`` maps names to tensors.
    Returns the max relative error per name.
    """
    errors = {}
    for name, p in params.items():
        errors[name] = grad_check(lambda _t, b=build_loss: b(), p, h=h)
    return errors
