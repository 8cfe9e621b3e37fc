import numpy as np
import pytest

from cernn import _backend


@pytest.fixture(params=_backend.available())
def backend(request, monkeypatch):
    """Run the test once per importable kernel backend."""
    monkeypatch.setattr(_backend, "kernels", _backend.get(request.param))
    return request.param


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def brute_dft(x, inverse=False):
    """Textbook O(n^2) double sum with 1/sqrt(n) scaling."""
    n = len(x)
    sign = 1 if inverse else -1
    out = np.zeros(n, dtype=complex)
    for k in range(n):
        for j in range(n):
            # reduce the phase index first: exp of a large argument loses digits
            out[k] += x[j] * np.exp(sign * 2j * np.pi * ((j * k) % n) / n)
    return out / np.sqrt(n)


def fd_gradient(f, params, h=1e-6):
    """Central differences of scalar f over every entry of each array in params."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def assert_grad_close(analytic, numeric, rtol, atol=1e-8):
    for name in numeric:
        a, n = np.asarray(analytic[name]), numeric[name]
        bad = np.abs(a - n) > rtol * np.maximum(np.abs(a), np.abs(n)) + atol
        assert not bad.any(), "%s: analytic %s vs numeric %s" % (name, a[bad][:3], n[bad][:3])
