"""Central finite differences for checking hand-written gradients."""
import logging

import numpy as np

from .numerics import relative_error

log = logging.getLogger("gradcheck")

DEFAULT_STEPS = {
    np.dtype(np.float32): 1e-3,
    np.dtype(np.float64): 1e-6,
}


def default_step(x):
    return DEFAULT_STEPS[np.dtype(x.dtype)]


def numeric_gradient(func, x, eps=None, indices=None):
    """Central-difference gradient of the scalar function func at x.

    Only the flat positions in ``indices`` are checked when given; the other
    entries of the result are zero. x is restored after each evaluation.
    """
    eps = default_step(x) if eps is None else eps
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        old = flat[i]
        flat[i] = old + eps
        f_plus = float(func())
        flat[i] = old - eps
        f_minus = float(func())
        flat[i] = old
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def vjp_objective(func, x, upstream):
    """Returns the scalar function <upstream, func(x)> for a fixed upstream gradient."""
    def objective():
        return float(np.sum(np.asarray(func(x), dtype=np.float64) * upstream))
    return objective


def check_gradient(func, x, analytic, eps=None, indices=None):
    """Relative error between an analytic gradient and central differences.

    When ``indices`` is given the comparison is restricted to those flat
    positions.
    """
    numeric = numeric_gradient(func, x, eps=eps, indices=indices)
    if indices is not None:
        indices = np.asarray(indices)
        err = relative_error(np.asarray(analytic).reshape(-1)[indices],
                             numeric.reshape(-1)[indices])
    else:
        err = relative_error(analytic, numeric)
    log.debug("finite difference check on %s entries: rel. err %.3e",
              x.size if indices is None else len(indices), err)
    return err
