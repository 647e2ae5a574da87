"""Shared oracles for gradient and numeric checks."""
from __future__ import annotations

import numpy as np

from stackseg.tensor import Tensor, backward, zero_grads


def numeric_grad(fn, params: list[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of the scalar fn() w.r.t. each param.

    Perturbs the float32 buffers in place; fn must rebuild its graph on
    every call (no cached forward state).
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i].item()
            flat[i] = np.float32(orig + h)
            up = fn().item()
            flat[i] = np.float32(orig - h)
            down = fn().item()
            flat[i] = np.float32(orig)
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, params: list[Tensor]) -> list[np.ndarray]:
    zero_grads(params)
    loss = fn()
    backward(loss)
    out = []
    for p in params:
        assert p.grad is not None, "missing gradient on a tracked parameter"
        out.append(p.grad.astype(np.float64))
    zero_grads(params)
    return out


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |numeric|), elementwise."""
    denom = np.maximum(1.0, np.abs(n))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_grads(fn, params, tol: float = 1e-3, h: float = 1e-3) -> float:
    """params is a list of Tensors or a name -> Tensor dict (names aid failure output)."""
    if isinstance(params, dict):
        names, tensors = list(params.keys()), list(params.values())
    else:
        names, tensors = [str(i) for i in range(len(params))], list(params)
    ana = analytic_grad(fn, tensors)
    num = numeric_grad(fn, tensors, h=h)
    errs = {name: rel_err(a, n) for name, a, n in zip(names, ana, num)}
    worst = max(errs, key=errs.get)
    assert errs[worst] < tol, f"gradient mismatch on {worst}: rel err {errs[worst]:.3e} >= {tol}"
    return errs[worst]
