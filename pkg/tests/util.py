"""Shared helpers for the test suite: finite differences and tiny builders."""

from __future__ import annotations

import numpy as np

from multiseg3d import autodiff as ad


def fd_grad(fn, params, h=1e-5):
    """Central finite differences of scalar fn() w.r.t. each param's entries.

    fn reads params[i].data, so we perturb in place and restore. This is the
    independent oracle: it never touches the tape.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn()
            flat[j] = orig - h
            fm = fn()
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


def check_op_grad(build_loss, params, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare taped gradients of build_loss() against central differences."""
    loss = build_loss()
    analytic = ad.grads_of(loss, params)
    numeric = fd_grad(lambda: build_loss().item(), params, h=h)
    assert_grads_close(analytic, numeric, rtol=rtol, atol=atol)
