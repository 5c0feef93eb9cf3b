"""Finite-difference gradient oracle shared across test modules."""

import numpy as np

from xsmoe import numerics as nm


def finite_difference_grads(loss_fn, params, h=1e-3):
    """Central differences of `loss_fn()` w.r.t. every scalar in `params`.

    Call inside `numerics.using_dtype(np.float64)` with float64 parameters
    so the estimates are limited by truncation, not rounding. `loss_fn`
    must be deterministic and must not mutate parameters.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def max_relative_error(analytic, numeric, floor=1e-3):
    """max |a - n| / max(|a|, |n|, floor) over matched gradient arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def analytic_grads(loss_fn_tensor, params):
    """Run the engine's backward and collect grads in `params` order."""
    for p in params:
        p.zero_grad()
    loss = loss_fn_tensor()
    nm.backward(loss)
    return [np.array(p.grad, dtype=np.float64) if p.grad is not None
            else np.zeros_like(p.data, dtype=np.float64) for p in params]


def gradcheck(make_case, seeds, h=1e-3, tol=1e-3):
    """For each seed, build (params, loss_closure) and compare analytic
    gradients against the finite-difference oracle in float64."""
    worst = 0.0
    with nm.using_dtype(np.float64):
        for seed in seeds:
            params, closure = make_case(np.random.default_rng(seed))

            def loss_value():
                with nm.no_grad():
                    return closure().item()

            numeric = finite_difference_grads(loss_value, params, h=h)
            analytic = analytic_grads(closure, params)
            worst = max(worst, max_relative_error(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
