"""Shared test oracles: central finite differences and tiny math utilities."""

import numpy as np


def central_difference(fn, x, step=1e-5):
    """Gradient of scalar fn at x via central differences, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def param_finite_differences(params, loss_fn, step=1e-5):
    """Central-difference gradients for a dict of parameter tensors.

    ``loss_fn()`` must recompute the scalar loss from the tensors' current
    data; entries are perturbed in place and restored.
    """
    out = {}
    for name, tensor in params.items():
        data = tensor.data
        g = np.zeros_like(data)
        flat = data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(approx, exact, floor=1e-8):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.abs(exact), floor)
    return float(np.max(np.abs(approx - exact) / denom))
