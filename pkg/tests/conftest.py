"""Shared test helpers: finite-difference gradients and reference convolution."""

import numpy as np
import pytest

from msdet import tensor as T


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case elementwise relative error with a small absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff(f, tensors, eps):
    """Central-difference d f / d t for each tensor, mutating data in place."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f()
            flat[i] = orig - eps
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def tape_grads(build_scalar, tensors):
    """Analytic gradients of ``build_scalar()`` w.r.t. ``tensors``."""
    for t in tensors:
        t.zero_grad()
    with T.Tape() as tape:
        loss = build_scalar()
        tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data)
            for t in tensors]


def check_gradients(build_scalar, tensors, eps=1e-5, tol=1e-4):
    """Assert analytic gradients match central differences."""
    analytic = tape_grads(build_scalar, tensors)
    numeric = finite_diff(lambda: build_scalar().data.reshape(()).item(),
                          tensors, eps)
    for a, n in zip(analytic, numeric):
        err = rel_err(a, n)
        assert err < tol, f"gradient mismatch: rel err {err}"


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    """Transparent reference cross-correlation for small inputs."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * stride:yi * stride + k,
                               xi * stride:xi * stride + k]
                    out[ni, fi, yi, xi] = (patch * w[fi]).sum()
            if b is not None:
                out[ni, fi] += b[fi]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
