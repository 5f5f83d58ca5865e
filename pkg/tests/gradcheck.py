"""Central finite-difference gradient checking shared by the model tests."""

import numpy as np


def finite_difference(loss_fn, arrays, h=1e-5):
    """Numeric gradient of loss_fn() w.r.t. every entry of every array.

    loss_fn takes no arguments and reads the arrays in place; entries are
    perturbed one at a time with a central difference of step h.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn()
            arr[idx] = orig - h
            down = loss_fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Worst elementwise relative error, floored at the finite-difference
    noise scale: entries below the floor in both gradients are compared
    absolutely, since a central difference of an O(1) loss cannot resolve
    them to any relative accuracy."""
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def assert_grads_match(analytic, numeric, rtol=1e-4):
    err = max_relative_error(analytic, numeric)
    assert err < rtol, f"gradient mismatch: max relative error {err:.3e} >= {rtol}"
