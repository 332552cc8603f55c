"""Central finite-difference verification of tape gradients."""

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar-valued f at array x, element by element."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(build, inputs, h=1e-5, rng=None):
    """Compare tape gradients of sum(build(*inputs) * proj) against central differences.

    build maps input Tensors to an output Tensor; a fixed random projection
    turns it into a scalar so the whole Jacobian is exercised. Returns the
    max relative error over all inputs, with the denominator floored at 1
    so near-zero gradients do not blow the ratio up.
    """
    rng = rng or np.random.default_rng(0)
    proj = rng.standard_normal(build(*inputs).shape)

    def scalar():
        o = build(*inputs)
        return float(np.sum(o.data * proj))

    with Tape() as tape:
        out = build(*inputs)
        loss = T.tsum(T.mul(out, Tensor(proj)))
    tape.backward(loss)

    worst = 0.0
    for x in inputs:
        got = x.grad if x.grad is not None else np.zeros_like(x.data)
        want = numeric_grad(scalar, x.data, h=h)
        denom = max(1.0, float(np.abs(want).max()), float(np.abs(got).max()))
        err = float(np.abs(got - want).max()) / denom
        worst = max(worst, err)
        x.grad = None
    return worst


def nudge_from_kinks(x, margin=1e-2):
    """Push values away from 0 so relu/min/max kinks don't corrupt differences."""
    y = x.copy()
    small = np.abs(y) < margin
    y[small] = margin * np.where(y[small] >= 0, 1.0, -1.0)
    return y
