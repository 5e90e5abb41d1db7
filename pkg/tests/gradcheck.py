"""Central finite-difference gradient oracle, independent of the tape.

The oracle only ever calls the forward computation: it perturbs one parameter
element at a time by +/-h and differences the loss values. Every analytic
gradient in the package is validated against this.
"""

import numpy as np

from promptreid.autodiff import GradientTape


def finite_difference(loss_fn, param, h=1e-3):
    """d loss / d param, one central difference per element of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = float(loss_fn().data)
        flat[i] = original - h
        down = float(loss_fn().data)
        flat[i] = original
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    diff = np.linalg.norm(analytic - numeric)
    if scale < 1e-6:
        # both gradients are (numerically) zero; compare absolutely, the
        # relative formulation divides noise by noise
        return diff
    return diff / scale


def assert_gradients_match(loss_fn, params, h=1e-3, tol=1e-4):
    """Tape gradients of loss_fn() vs the finite-difference oracle.

    ``params`` maps names to Parameter tensors that loss_fn reads. Returns the
    worst relative error observed so callers can report it.
    """
    with GradientTape() as tape:
        tape.register_all(params)
        loss = loss_fn()
    analytic = tape.backward(loss)
    worst = 0.0
    for name, param in params.items():
        numeric = finite_difference(loss_fn, param, h=h)
        err = relative_error(analytic[name].data, numeric)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst
