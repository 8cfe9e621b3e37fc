"""Pure numpy implementation of the hot kernels.

Mirrors the signatures of the compiled ``_kernels`` extension exactly.  All
batched arrays are complex128 with shape ``(batch, n)``; ``n`` must be a power
of two for the FFT based routines.
"""
import numpy as np

BACKEND = "python"

_TWIDDLE_CACHE = {}


def _plan(n):
    plan = _TWIDDLE_CACHE.get(n)
    if plan is None:
        bits = n.bit_length() - 1
        rev = np.zeros(n, dtype=np.intp)
        for i in range(n):
            rev[i] = int(format(i, "0%db" % bits)[::-1], 2) if bits else 0
        tw = np.exp(-2j * np.pi * np.arange(n // 2) / n)
        plan = (rev, tw)
        _TWIDDLE_CACHE[n] = plan
    return plan


def dft_direct(x, inverse=False):
    """O(n^2) unitary DFT along the last axis; valid for any length."""
    n = x.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 2j * np.pi * (np.outer(k, k) % n) / n) / np.sqrt(n)
    return x @ mat.T


def fft(x, inverse=False):
    """Unitary DFT along the last axis of a 2-d array.

    Radix-2 for power-of-two lengths, the direct sum otherwise.
    """
    b, n = x.shape
    if n & (n - 1):
        return dft_direct(x, inverse)
    rev, tw = _plan(n)
    if inverse:
        tw = tw.conj()
    a = x[:, rev]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(b, n // size, size)
        w = tw[:: n // size][:half]
        u = blocks[:, :, :half]
        t = blocks[:, :, half:] * w
        a = np.concatenate((u + t, u - t), axis=2).reshape(b, n)
        size *= 2
    return a * (1.0 / np.sqrt(n))


def _reflect(x, v):
    # x - 2 v (v^H x) / ||v||^2, row-wise
    s = np.vdot(v, v).real
    c = x @ v.conj()
    return x - (2.0 / s) * c[:, None] * v[None, :]


def cascade_forward(x, diags, refl, perm):
    """Apply D3 R2 F^-1 D2 P R1 F D1 to every row of ``x``.

    Returns the output and a ``(5, batch, n)`` tape holding the stage inputs
    needed by :func:`cascade_backward`.
    """
    tape = np.empty((5,) + x.shape, dtype=np.complex128)
    tape[0] = x
    a = fft(diags[0] * x)
    tape[1] = a
    a = _reflect(a, refl[0])[:, perm]
    tape[2] = a
    a = fft(diags[1] * a, inverse=True)
    tape[3] = a
    a = _reflect(a, refl[1])
    tape[4] = a
    return diags[2] * a, tape


def _reflect_vjp(g, x, v):
    s = np.vdot(v, v).real
    c = x @ v.conj()
    alpha = g.conj() @ v
    gv = (-2.0 / s) * (c.conj() @ g + alpha @ x) + (4.0 / s ** 2) * np.sum((alpha * c).real) * v
    gx = g - (2.0 / s) * (g @ v.conj())[:, None] * v[None, :]
    return gx, gv


def cascade_backward(g, tape, diags, refl, perm):
    """Vector-Jacobian product of :func:`cascade_forward`.

    ``g`` holds dL/dRe + i dL/dIm of the output.  Parameter gradients are
    summed over the batch and use the same complex packing.
    """
    gd = np.empty((3, g.shape[1]), dtype=np.complex128)
    gv = np.empty((2, g.shape[1]), dtype=np.complex128)
    gd[2] = np.sum(g * tape[4].conj(), axis=0)
    g = diags[2].conj() * g
    g, gv[1] = _reflect_vjp(g, tape[3], refl[1])
    g = fft(g)
    gd[1] = np.sum(g * tape[2].conj(), axis=0)
    g = diags[1].conj() * g
    g3 = np.empty_like(g)
    g3[:, perm] = g
    g, gv[0] = _reflect_vjp(g3, tape[1], refl[0])
    g = fft(g, inverse=True)
    gd[0] = np.sum(g * tape[0].conj(), axis=0)
    return diags[0].conj() * g, gd, gv


def modrelu_forward(z, b):
    r = np.abs(z)
    active = (r + b) > 0
    active &= r > 0
    scale = np.zeros_like(r)
    np.divide(r + b, r, out=scale, where=active)
    return scale * z


def modrelu_backward(z, b, g):
    """Returns (dL/dz packed complex, dL/db summed over the batch)."""
    r = np.abs(z)
    active = ((r + b) > 0) & (r > 0)
    rs = np.where(active, r, 1.0)
    proj = (g.conj() * z).real
    gz = np.where(active, g * (1.0 + b / rs) - (b * proj / rs ** 3) * z, 0.0)
    gb = np.sum(np.where(active, proj / rs, 0.0), axis=0)
    return gz, gb
