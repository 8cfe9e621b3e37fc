"""Structured complex linear operators and the uRNN / ceRNN cascades.

Complex vectors are plain ``complex128`` numpy arrays whose last axis is the
vector dimension; leading axes are treated as a batch.  Gradients of a real
loss with respect to a complex quantity ``z = u + iv`` are packed as
``dL/du + i dL/dv``.  With that packing the backward pass through a complex
linear map ``A`` is ``A^H g``.
"""
from dataclasses import dataclass, field
import numpy as np

from . import _backend
from ._kernels_py import dft_direct

UNITARY = "unitary"
COMPLEX_EVOLUTION = "complex-evolution"
FLAVORS = (UNITARY, COMPLEX_EVOLUTION)

# reflector norms below this are rescaled to REFLECTOR_RESCALE_NORM
REFLECTOR_MIN_NORM = 1e-12
REFLECTOR_RESCALE_NORM = 1e-6


class DimensionError(ValueError):
    def __init__(self, what, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__("%s: expected length %s, got %s" % (what, expected, actual))


class StaleTapeError(RuntimeError):
    """A tape was replayed against parameters it was not recorded with."""


def _complex(x):
    return np.asarray(x, dtype=np.complex128)


def _check_len(what, x, n):
    if x.shape[-1] != n:
        raise DimensionError(what, n, x.shape[-1])


def _is_pow2(n):
    return n >= 1 and not n & (n - 1)


def _rows(x):
    """View ``x`` as 2-d (batch, n); returns the view and a restore function."""
    shape = x.shape
    flat = x.reshape(-1, shape[-1])
    return flat, lambda y: y.reshape(shape)


# -- individual operators ----------------------------------------------------

def apply_fourier(x, direction="forward"):
    """Unitary DFT (scale 1/sqrt(n) both ways) along the last axis."""
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse', got %r" % (direction,))
    x = _complex(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("fourier input", ">= 1", 0 if x.ndim == 0 else x.shape[-1])
    rows, restore = _rows(x)
    inverse = direction == "inverse"
    if _is_pow2(x.shape[-1]):
        return restore(_backend.kernels.fft(rows, inverse))
    return restore(dft_direct(rows, inverse))


def apply_unitary_diag(theta, x):
    theta = np.asarray(theta, dtype=np.float64)
    x = _complex(x)
    _check_len("unitary diagonal input", x, theta.shape[-1])
    return np.exp(-1j * theta) * x


def apply_free_diag(d, x):
    d = _complex(d)
    x = _complex(x)
    _check_len("free diagonal input", x, d.shape[-1])
    return d * x


def apply_householder(v, x):
    """x - 2 v (v^H x) / ||v||^2."""
    v = _complex(v)
    x = _complex(x)
    _check_len("householder input", x, v.shape[-1])
    s = np.vdot(v, v).real
    if not s > 0:
        raise ValueError("householder reflector has zero norm")
    c = x @ v.conj()
    return x - (2.0 / s) * c[..., None] * v


def apply_permutation(perm, x):
    perm = np.asarray(perm)
    x = _complex(x)
    _check_len("permutation input", x, perm.shape[-1])
    return x[..., perm]


def inverse_permutation(perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def truncate(x, k):
    """Keep the first ``k`` components."""
    x = _complex(x)
    if k > x.shape[-1] or k < 0:
        raise DimensionError("truncation size", "<= %d" % x.shape[-1], k)
    return x[..., :k]


def truncate_adjoint(g, n):
    """Zero-pad ``g`` back to length ``n``."""
    g = _complex(g)
    k = g.shape[-1]
    if k > n:
        raise DimensionError("truncation adjoint target", ">= %d" % k, n)
    out = np.zeros(g.shape[:-1] + (n,), dtype=np.complex128)
    out[..., :k] = g
    return out


@dataclass
class TruncationOp:
    n_in: int
    k_keep: int

    def __post_init__(self):
        if not 0 <= self.k_keep <= self.n_in:
            raise DimensionError("truncation size", "<= %d" % self.n_in, self.k_keep)

    def apply(self, x):
        _check_len("truncation input", _complex(x), self.n_in)
        return truncate(x, self.k_keep)

    def adjoint(self, g):
        _check_len("truncation adjoint input", _complex(g), self.k_keep)
        return truncate_adjoint(g, self.n_in)


# -- operator nodes ------------------------------------------------------------
#
# Light wrappers used to describe a cascade stage by stage.  Each exposes
# ``apply``, ``adjoint`` and the number of trainable reals it owns.

@dataclass
class FourierOp:
    n: int
    direction: str = "forward"
    n_params = 0

    def apply(self, x):
        _check_len("fourier input", _complex(x), self.n)
        return apply_fourier(x, self.direction)

    def adjoint(self, g):
        other = "inverse" if self.direction == "forward" else "forward"
        return apply_fourier(g, other)


@dataclass
class UnitaryDiagonal:
    theta: np.ndarray

    @property
    def n_params(self):
        return self.theta.size

    @property
    def entries(self):
        return np.exp(-1j * self.theta)

    def apply(self, x):
        return apply_unitary_diag(self.theta, x)

    def adjoint(self, g):
        return apply_unitary_diag(-self.theta, g)


@dataclass
class FreeDiagonal:
    d_re: np.ndarray
    d_im: np.ndarray

    @property
    def n_params(self):
        return self.d_re.size + self.d_im.size

    @property
    def entries(self):
        return self.d_re + 1j * self.d_im

    def apply(self, x):
        return apply_free_diag(self.entries, x)

    def adjoint(self, g):
        return apply_free_diag(self.entries.conj(), g)


@dataclass
class HouseholderReflector:
    v_re: np.ndarray
    v_im: np.ndarray

    def __post_init__(self):
        if not np.sum(self.v_re ** 2 + self.v_im ** 2) > 0:
            raise ValueError("householder reflector has zero norm")

    @property
    def n_params(self):
        return self.v_re.size + self.v_im.size

    @property
    def vector(self):
        return self.v_re + 1j * self.v_im

    def apply(self, x):
        return apply_householder(self.vector, x)

    adjoint = apply  # Hermitian


@dataclass
class PermutationOp:
    perm: np.ndarray
    n_params = 0

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.intp)
        n = len(self.perm)
        if not np.array_equal(np.sort(self.perm), np.arange(n)):
            raise ValueError("permutation must be a bijection on 0..%d" % (n - 1))

    def apply(self, x):
        return apply_permutation(self.perm, x)

    def adjoint(self, g):
        return apply_permutation(inverse_permutation(self.perm), g)


# -- cascade -------------------------------------------------------------------

@dataclass
class Tape:
    """Stage inputs recorded by :meth:`Cascade.forward`."""

    owner: int
    version: int
    shape: tuple
    stages: np.ndarray = field(repr=False)


class Cascade:
    """W = D3 R2 F^-1 D2 P R1 F D1, applied right to left.

    ``flavor="unitary"`` parameterizes the diagonals by angles
    (entry = exp(-i theta)); ``flavor="complex-evolution"`` stores the
    diagonal entries directly with no modulus constraint.

    Trainable parameters live in :attr:`params` as real arrays:

    * unitary: ``theta`` (3, n)
    * complex-evolution: ``diag_re``, ``diag_im`` (3, n)
    * both: ``refl_re``, ``refl_im`` (2, n)
    """

    def __init__(self, n, flavor=UNITARY, rng=None, params=None, perm=None, backend=None):
        if flavor not in FLAVORS:
            raise ValueError("flavor must be one of %s, got %r" % (FLAVORS, flavor))
        if n < 1:
            raise ValueError("cascade dimension must be positive")
        self.n = int(n)
        self.flavor = flavor
        self._kernels = _backend.get(backend)
        if not _is_pow2(self.n):
            self._kernels = _backend.get("python")
        self.version = 0
        if params is None:
            params, perm = init_cascade_params(self.n, flavor, rng)
        if perm is None:
            raise ValueError("explicit params need an explicit permutation")
        self.perm_op = PermutationOp(perm)
        self.perm = self.perm_op.perm
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        expected = set(self.param_shapes())
        if set(self.params) != expected:
            raise ValueError("cascade params must be %s, got %s" % (sorted(expected), sorted(self.params)))
        for name, shape in self.param_shapes().items():
            if self.params[name].shape != shape:
                raise DimensionError(name, shape, self.params[name].shape)
        HouseholderReflector(self.params["refl_re"][0], self.params["refl_im"][0])
        HouseholderReflector(self.params["refl_re"][1], self.params["refl_im"][1])

    def param_shapes(self):
        n = self.n
        if self.flavor == UNITARY:
            shapes = {"theta": (3, n)}
        else:
            shapes = {"diag_re": (3, n), "diag_im": (3, n)}
        shapes.update(refl_re=(2, n), refl_im=(2, n))
        return shapes

    def touch(self):
        """Mark parameters as changed; outstanding tapes become stale."""
        self.version += 1

    def diagonals(self):
        """Realized diagonal entries, shape (3, n), in the order D1, D2, D3."""
        if self.flavor == UNITARY:
            return np.exp(-1j * self.params["theta"])
        return self.params["diag_re"] + 1j * self.params["diag_im"]

    def reflectors(self):
        return self.params["refl_re"] + 1j * self.params["refl_im"]

    @property
    def stages(self):
        """Operator nodes in application order (rightmost factor first)."""
        p = self.params
        if self.flavor == UNITARY:
            diag = [UnitaryDiagonal(p["theta"][i]) for i in range(3)]
        else:
            diag = [FreeDiagonal(p["diag_re"][i], p["diag_im"][i]) for i in range(3)]
        refl = [HouseholderReflector(p["refl_re"][i], p["refl_im"][i]) for i in range(2)]
        return [
            diag[0], FourierOp(self.n, "forward"), refl[0], self.perm_op,
            diag[1], FourierOp(self.n, "inverse"), refl[1], diag[2],
        ]

    def parameter_count(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def bind(self):
        """Snapshot of the realized operator for repeated application.

        Diagonal and reflector entries are computed once; tapes recorded by
        the snapshot stay tied to the parameter version it was taken at.
        """
        return BoundCascade(self)

    def forward(self, x):
        """Returns ``(y, tape)``."""
        return self.bind().forward(x)

    def __call__(self, x):
        return self.forward(x)[0]

    def adjoint(self, g):
        """W^H g."""
        g = _complex(g)
        for stage in reversed(self.stages):
            g = stage.adjoint(g)
        return g

    def vjp(self, tape, g_out):
        """Backpropagate ``g_out`` through the stages recorded in ``tape``.

        Returns ``(g_in, grads)`` where ``grads`` maps each parameter name to
        a real array of its shape (summed over any batch axes).
        """
        bound = self.bind()
        g_in, raw = bound.vjp_raw(tape, g_out)
        return g_in, bound.param_grads(*raw)

    def dense(self):
        """Materialize W as an n x n matrix by pushing each basis vector through."""
        return self.forward(np.eye(self.n, dtype=np.complex128))[0].T

    def renormalize_reflectors(self):
        """Rescale reflectors whose norm collapsed below ``REFLECTOR_MIN_NORM``.

        Returns True if anything was changed.
        """
        re, im = self.params["refl_re"], self.params["refl_im"]
        changed = False
        for i in range(2):
            norm = np.sqrt(np.sum(re[i] ** 2 + im[i] ** 2))
            if norm < REFLECTOR_MIN_NORM:
                if norm == 0:
                    re[i, 0] = REFLECTOR_RESCALE_NORM
                else:
                    re[i] *= REFLECTOR_RESCALE_NORM / norm
                    im[i] *= REFLECTOR_RESCALE_NORM / norm
                self.touch()
                changed = True
        return changed

    def pinned_to(self, other):
        """Copy of ``self`` (complex-evolution) with diagonals set to ``other``'s."""
        params = {k: v.copy() for k, v in self.params.items()}
        d = other.diagonals()
        params["diag_re"], params["diag_im"] = d.real.copy(), d.imag.copy()
        params["refl_re"] = other.params["refl_re"].copy()
        params["refl_im"] = other.params["refl_im"].copy()
        return Cascade(self.n, self.flavor, params=params, perm=other.perm.copy())


class BoundCascade:
    def __init__(self, cascade):
        self.cascade = cascade
        self.version = cascade.version
        self.diags = cascade.diagonals()
        self.refl = cascade.reflectors()
        self.perm = cascade.perm
        self._kernels = cascade._kernels

    def forward(self, x):
        x = _complex(x)
        _check_len("cascade input", x, self.cascade.n)
        rows, restore = _rows(x)
        y, tape = self._kernels.cascade_forward(rows, self.diags, self.refl, self.perm)
        return restore(y), Tape(id(self.cascade), self.version, x.shape, tape)

    def vjp_raw(self, tape, g_out):
        """Returns ``g_in`` and the unreduced complex parameter gradients."""
        if tape.owner != id(self.cascade) or tape.version != self.cascade.version:
            raise StaleTapeError("tape was recorded against different cascade parameters")
        g_out = _complex(g_out)
        if g_out.shape != tape.shape:
            raise StaleTapeError("gradient shape %s does not match tape %s" % (g_out.shape, tape.shape))
        rows, restore = _rows(g_out)
        g_in, gd, gv = self._kernels.cascade_backward(rows, tape.stages, self.diags, self.refl, self.perm)
        return restore(g_in), (gd, gv)

    def param_grads(self, gd, gv):
        """Map complex diagonal/reflector gradients onto the real parameters."""
        grads = {"refl_re": gv.real.copy(), "refl_im": gv.imag.copy()}
        if self.cascade.flavor == UNITARY:
            # d = exp(-i theta)  =>  dL/dtheta = Im(d * conj(dL/dd))
            grads["theta"] = (self.diags * gd.conj()).imag
        else:
            grads["diag_re"] = gd.real.copy()
            grads["diag_im"] = gd.imag.copy()
        return grads


def init_cascade_params(n, flavor, rng):
    """Random initial parameters and permutation.

    Angles ~ U(-pi, pi); reflector coordinates ~ U(-1, 1); free diagonals
    start on the unit circle so both flavors begin from matched dynamics.
    The draws happen in the same order for both flavors.
    """
    if rng is None:
        rng = np.random.default_rng()
    theta = rng.uniform(-np.pi, np.pi, size=(3, n))
    refl_re = rng.uniform(-1.0, 1.0, size=(2, n))
    refl_im = rng.uniform(-1.0, 1.0, size=(2, n))
    perm = rng.permutation(n)
    if flavor == UNITARY:
        params = {"theta": theta}
    else:
        params = {"diag_re": np.cos(theta), "diag_im": -np.sin(theta)}
    params.update(refl_re=refl_re, refl_im=refl_im)
    return params, perm


def cascade_forward(cascade, x):
    return cascade.forward(x)


def cascade_vjp(cascade, tape, g_out):
    return cascade.vjp(tape, g_out)


def parameter_count(cascade):
    """Trainable real scalars: 7n (unitary) or 10n (complex-evolution)."""
    return cascade.parameter_count()


def dense_matrix(op, n):
    """Materialize any linear callable on C^n column by column."""
    return np.stack([op(e) for e in np.eye(n, dtype=np.complex128)], axis=1)


def compose(*ops):
    """Compose operator nodes given in application order."""
    def apply(x):
        for op in ops:
            x = op.apply(x)
        return x
    return apply

