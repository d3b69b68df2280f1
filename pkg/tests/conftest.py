import numpy as np

from mart import tensor as T
from mart.tensor import Parameter


def central_difference(fn, param: Parameter, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of the scalar fn() with respect to every coordinate
    of param, by central differences on the real forward pass."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.data.shape)


def assert_grads_match(fn, params, h: float = 1e-5, tol: float = 1e-4) -> None:
    """Backward once through fn(), then check every parameter coordinate
    against central differences: |analytic - numeric| < tol * max(1, |numeric|)."""
    loss = fn()
    T.backward(loss)
    grads = {}
    for p in params:
        assert p.grad is not None, f"{p.name} received no gradient"
        grads[p.name] = p.grad.copy()
        p.tensor.grad = None
    for p in params:
        num = central_difference(fn, p, h=h)
        err = np.abs(grads[p.name] - num) / np.maximum(1.0, np.abs(num))
        worst = float(err.max()) if err.size else 0.0
        assert worst < tol, f"{p.name}: max rel err {worst:.3e}"
