"""Shared finite-difference gradient helpers for the test suite."""

import numpy as np

from refgraph.tensor import Tape


def numeric_grad(build, param, h=1e-5):
    """Central-difference gradient of the scalar ``build()`` w.r.t. ``param``.

    ``build`` must re-run the forward pass from current parameter values;
    it is called outside any tape, so only values are computed.
    """
    g = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build().item()
        flat[i] = orig - h
        fm = build().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def analytic_grad(build, param, reset=()):
    """Gradient of scalar ``build()`` w.r.t. ``param`` via one taped backward.

    ``reset`` lists any other parameters touched by ``build`` whose ``.grad``
    must be cleared so repeated calls don't accumulate stale gradients.
    """
    for p in (param, *reset):
        p.grad = None
    with Tape() as tape:
        out = build()
    tape.backward(out)
    return param.grad.copy()
