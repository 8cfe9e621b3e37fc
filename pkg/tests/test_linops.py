import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cernn import linops
from cernn.linops import Cascade, DimensionError, StaleTapeError

from conftest import assert_grad_close, brute_dft, crandn, fd_gradient


# -- fourier -------------------------------------------------------------------

def test_fourier_delta_is_constant(backend):
    x = np.zeros(4, dtype=complex)
    x[0] = 1
    np.testing.assert_allclose(linops.apply_fourier(x), np.full(4, 0.5 + 0j), atol=1e-15)


def test_fourier_roundtrip(backend):
    x = crandn(np.random.default_rng(1), 8)
    back = linops.apply_fourier(linops.apply_fourier(x), "inverse")
    assert np.max(np.abs(back - x)) < 1e-12


@pytest.mark.parametrize("n", [1, 2, 16, 64, 3, 6, 12])
@pytest.mark.parametrize("direction", ["forward", "inverse"])
def test_fourier_matches_brute_force(backend, n, direction):
    x = crandn(np.random.default_rng(n), n)
    got = linops.apply_fourier(x, direction)
    assert np.max(np.abs(got - brute_dft(x, direction == "inverse"))) < 1e-12
    assert abs(np.linalg.norm(got) - np.linalg.norm(x)) < 1e-12 * np.linalg.norm(x)


def test_fourier_batched_rows_independent(backend):
    x = crandn(np.random.default_rng(0), 3, 5, 8)
    got = linops.apply_fourier(x)
    for idx in np.ndindex(3, 5):
        np.testing.assert_allclose(got[idx], brute_dft(x[idx]), atol=1e-12)


def test_fourier_op_dimension_error_names_lengths():
    with pytest.raises(DimensionError) as err:
        linops.FourierOp(8).apply(np.ones(4))
    assert err.value.expected == 8 and err.value.actual == 4
    assert "8" in str(err.value) and "4" in str(err.value)


def test_fourier_rejects_bad_direction():
    with pytest.raises(ValueError):
        linops.apply_fourier(np.ones(4), "sideways")


# -- diagonals -------------------------------------------------------------------

def test_unitary_diag_examples():
    x = crandn(np.random.default_rng(0), 5)
    np.testing.assert_array_equal(linops.apply_unitary_diag(np.zeros(5), x), x)
    out = linops.apply_unitary_diag([np.pi / 2], [1 + 0j])
    np.testing.assert_allclose(out, [-1j], atol=1e-16)


def test_unitary_diag_preserves_modulus():
    rng = np.random.default_rng(2)
    theta = rng.uniform(-np.pi, np.pi, 8)
    x = crandn(rng, 8)
    out = linops.apply_unitary_diag(theta, x)
    assert np.max(np.abs(np.abs(out) - np.abs(x))) < 1e-14


def test_free_diag_examples():
    x = crandn(np.random.default_rng(0), 4)
    np.testing.assert_array_equal(linops.apply_free_diag(np.ones(4, complex), x), x)
    assert linops.apply_free_diag([2 + 0j], [3 + 4j])[0] == 6 + 8j
    assert linops.apply_free_diag([1 + 1j], [1 - 1j])[0] == 2 + 0j


@pytest.mark.parametrize("fn", [linops.apply_unitary_diag, linops.apply_free_diag,
                                linops.apply_householder, linops.apply_permutation])
def test_pointwise_ops_dimension_mismatch(fn):
    arg = np.arange(3) if fn is linops.apply_permutation else np.ones(3)
    with pytest.raises(DimensionError):
        fn(arg, np.ones(4))


# -- householder -------------------------------------------------------------------

def test_householder_reflects_axis():
    v = crandn(np.random.default_rng(0), 6)
    np.testing.assert_allclose(linops.apply_householder(v, v), -v, atol=1e-14)


def test_householder_fixes_orthogonal_complement():
    rng = np.random.default_rng(1)
    v = crandn(rng, 6)
    x = crandn(rng, 6)
    x -= np.vdot(v, x) / np.vdot(v, v) * v
    assert abs(np.vdot(v, x)) < 1e-12
    np.testing.assert_allclose(linops.apply_householder(v, x), x, atol=1e-13)


def test_householder_involution():
    rng = np.random.default_rng(3)
    v, x = crandn(rng, 8), crandn(rng, 8)
    twice = linops.apply_householder(v, linops.apply_householder(v, x))
    assert np.max(np.abs(twice - x)) < 1e-12


def test_householder_zero_reflector_rejected_at_construction():
    with pytest.raises(ValueError):
        linops.HouseholderReflector(np.zeros(4), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 40), scale=st.floats(1e-6, 1e6))
def test_householder_unitary_any_scale(seed, n, scale):
    rng = np.random.default_rng(seed)
    v, x = scale * crandn(rng, n), crandn(rng, n)
    y = linops.apply_householder(v, x)
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) <= 1e-10 * np.linalg.norm(x)
    assert np.max(np.abs(linops.apply_householder(v, y) - x)) <= 1e-10 * np.linalg.norm(x)


# -- permutation ---------------------------------------------------------------------

def test_permutation_examples():
    x = crandn(np.random.default_rng(0), 5)
    np.testing.assert_array_equal(linops.apply_permutation(np.arange(5), x), x)
    np.testing.assert_array_equal(linops.apply_permutation([1, 0], ["a", "b"] and [2 + 0j, 5 + 0j]), [5, 2])


def test_permutation_inverse_exact():
    rng = np.random.default_rng(4)
    perm = rng.permutation(16)
    x = crandn(rng, 16)
    back = linops.apply_permutation(linops.inverse_permutation(perm), linops.apply_permutation(perm, x))
    np.testing.assert_array_equal(back, x)


def test_permutation_must_be_bijection():
    with pytest.raises(ValueError):
        linops.PermutationOp([0, 0, 1])


# -- truncation -------------------------------------------------------------------

def test_truncation_examples():
    x = np.array([1 + 1j, 2, 3j])
    np.testing.assert_array_equal(linops.truncate(x, 3), x)
    np.testing.assert_array_equal(linops.truncate(x, 2), x[:2])
    np.testing.assert_array_equal(linops.truncate_adjoint(np.array([4, 5j]), 3), [4, 5j, 0])
    with pytest.raises(DimensionError):
        linops.truncate(x, 4)
    with pytest.raises(DimensionError):
        linops.TruncationOp(3, 5)


def test_truncation_adjoint_identity():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(1, 30))
        k = int(rng.integers(0, n + 1))
        op = linops.TruncationOp(n, k)
        x, g = crandn(rng, n), crandn(rng, k)
        lhs = np.vdot(g, op.apply(x))
        rhs = np.vdot(op.adjoint(g), x)
        assert abs(lhs - rhs) < 1e-12


# -- stage matrices built by hand: independent oracle for the cascade ----------------

def _dft_matrix(n, inverse=False):
    return np.column_stack([brute_dft(e, inverse) for e in np.eye(n)])


def _householder_matrix(v):
    return np.eye(len(v)) - 2 * np.outer(v, v.conj()) / np.vdot(v, v).real


def _perm_matrix(perm):
    P = np.zeros((len(perm), len(perm)))
    P[np.arange(len(perm)), perm] = 1
    return P


def oracle_matrix(c):
    d = c.diagonals()
    v = c.reflectors()
    n = c.n
    return (np.diag(d[2]) @ _householder_matrix(v[1]) @ _dft_matrix(n, True) @ np.diag(d[1])
            @ _perm_matrix(c.perm) @ _householder_matrix(v[0]) @ _dft_matrix(n) @ np.diag(d[0]))


def _random_cascade(n, flavor, seed, wobble=True):
    rng = np.random.default_rng(seed)
    c = Cascade(n, flavor, rng)
    if wobble and flavor == linops.COMPLEX_EVOLUTION:
        c.params["diag_re"] *= rng.uniform(0.3, 1.7, (3, n))
        c.params["diag_im"] += rng.uniform(-0.5, 0.5, (3, n))
        c.touch()
    return c, rng


@pytest.mark.parametrize("flavor", linops.FLAVORS)
@pytest.mark.parametrize("n", [1, 2, 4, 8, 16, 3, 12])
def test_cascade_equals_hand_built_matrix(backend, flavor, n):
    c, rng = _random_cascade(n, flavor, n)
    x = crandn(rng, 5, n)
    M = oracle_matrix(c)
    assert np.max(np.abs(c(x) - x @ M.T)) < 1e-12
    assert np.max(np.abs(c.dense() - M)) < 1e-12


def test_cascade_dense_materialization_matches_apply(backend):
    c, rng = _random_cascade(8, linops.UNITARY, 4)
    x = crandn(rng, 8)
    assert np.max(np.abs(c.dense() @ x - c(x))) < 1e-12
    np.testing.assert_allclose(linops.dense_matrix(c, 8), c.dense(), atol=1e-14)


def test_cascade_stage_list_matches_fused_path(backend):
    for flavor in linops.FLAVORS:
        c, rng = _random_cascade(8, flavor, 11)
        x = crandn(rng, 3, 8)
        staged = linops.compose(*c.stages)(x)
        assert np.max(np.abs(staged - c(x))) < 1e-13


def test_unitary_cascade_preserves_norm(backend):
    c, rng = _random_cascade(8, linops.UNITARY, 4)
    x = crandn(rng, 8)
    assert abs(np.linalg.norm(c(x)) - np.linalg.norm(x)) < 1e-10 * np.linalg.norm(x)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), logn=st.integers(0, 7))
def test_unitary_cascade_norm_property(seed, logn):
    n = 2 ** logn
    c, rng = _random_cascade(n, linops.UNITARY, seed)
    x = crandn(rng, 4, n)
    ratio = np.linalg.norm(c(x), axis=1) / np.linalg.norm(x, axis=1)
    assert np.max(np.abs(ratio - 1)) < 1e-10


def test_unitary_cascade_dense_is_unitary():
    c, _ = _random_cascade(16, linops.UNITARY, 5)
    M = c.dense()
    assert np.max(np.abs(M.conj().T @ M - np.eye(16))) < 1e-12


def test_superset_pinned_cernn_equals_urnn(backend):
    rng = np.random.default_rng(12)
    for seed in range(20):
        u = Cascade(16, linops.UNITARY, np.random.default_rng(seed))
        ce = Cascade(16, linops.COMPLEX_EVOLUTION, rng).pinned_to(u)
        x = crandn(rng, 3, 16)
        assert np.max(np.abs(ce(x) - u(x))) < 1e-13


def test_same_seed_flavors_start_matched(backend):
    u = Cascade(8, linops.UNITARY, np.random.default_rng(3))
    ce = Cascade(8, linops.COMPLEX_EVOLUTION, np.random.default_rng(3))
    np.testing.assert_array_equal(u.perm, ce.perm)
    x = crandn(np.random.default_rng(0), 8)
    assert np.max(np.abs(ce(x) - u(x))) < 1e-13


# -- adjoints --------------------------------------------------------------------------

def test_every_stage_adjoint_consistent(backend):
    for flavor in linops.FLAVORS:
        for seed in range(5):
            c, rng = _random_cascade(8, flavor, seed)
            ops = c.stages + [c]
            for op in ops:
                x, g = crandn(rng, 8), crandn(rng, 8)
                fx = op.apply(x) if hasattr(op, "apply") else op(x)
                lhs = np.vdot(g, fx)
                rhs = np.vdot(op.adjoint(g), x)
                assert abs(lhs.real - rhs.real) < 1e-10
                assert abs(lhs.imag - rhs.imag) < 1e-10


# -- gradients ---------------------------------------------------------------------------

def _fd_check_cascade(c, rng, batch=2):
    x = crandn(rng, batch, c.n)
    w = crandn(rng, batch, c.n)

    def loss():
        c.touch()
        return float(np.sum((w.conj() * c(x)).real))

    y, tape = c.forward(x)
    g_in, grads = c.vjp(tape, w)
    numeric = fd_gradient(loss, c.params)
    assert_grad_close(grads, numeric, rtol=1e-5)
    # input gradient: perturb real and imaginary parts
    gx = np.zeros_like(x)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        for unit in (1, 1j):
            x[idx] += h * unit
            fp = loss()
            x[idx] -= 2 * h * unit
            fm = loss()
            x[idx] += h * unit
            gx[idx] += unit * (fp - fm) / (2 * h)
    assert np.max(np.abs(gx - g_in)) < 1e-5 * max(1.0, np.max(np.abs(gx)))


@pytest.mark.parametrize("flavor", linops.FLAVORS)
def test_cascade_vjp_finite_differences(backend, flavor):
    for seed in range(10):
        c, rng = _random_cascade(8, flavor, 100 + seed)
        _fd_check_cascade(c, rng)


def test_cascade_vjp_non_power_of_two():
    c, rng = _random_cascade(6, linops.COMPLEX_EVOLUTION, 1)
    _fd_check_cascade(c, rng)


def test_unitary_vjp_preserves_norm(backend):
    c, rng = _random_cascade(64, linops.UNITARY, 7)
    x, g = crandn(rng, 3, 64), crandn(rng, 3, 64)
    _, tape = c.forward(x)
    g_in, _ = c.vjp(tape, g)
    assert abs(np.linalg.norm(g_in) - np.linalg.norm(g)) < 1e-10 * np.linalg.norm(g)


def test_cernn_vjp_norm_bounded_by_diagonal_moduli(backend):
    for seed in range(20):
        c, rng = _random_cascade(16, linops.COMPLEX_EVOLUTION, seed)
        x, g = crandn(rng, 16), crandn(rng, 16)
        _, tape = c.forward(x)
        g_in, _ = c.vjp(tape, g)
        bound = np.prod(np.abs(c.diagonals()).max(axis=1)) * np.linalg.norm(g)
        assert np.linalg.norm(g_in) <= bound * (1 + 1e-12)


def test_fourier_only_chain_passes_gradient_through():
    # forward then inverse transform: identity, so the VJP is the identity too
    rng = np.random.default_rng(0)
    g = crandn(rng, 8)
    f, finv = linops.FourierOp(8, "forward"), linops.FourierOp(8, "inverse")
    g_in = f.adjoint(finv.adjoint(g))
    np.testing.assert_allclose(g_in, g, atol=1e-13)


def test_stale_tape_rejected():
    c, rng = _random_cascade(8, linops.UNITARY, 0)
    _, tape = c.forward(crandn(rng, 8))
    c.params["theta"] += 0.1
    c.touch()
    with pytest.raises(StaleTapeError):
        c.vjp(tape, crandn(rng, 8))
    other, _ = _random_cascade(8, linops.UNITARY, 1)
    _, tape = c.forward(crandn(rng, 8))
    with pytest.raises(StaleTapeError):
        other.vjp(tape, crandn(rng, 8))
    with pytest.raises(StaleTapeError):
        c.vjp(tape, crandn(rng, 2, 8))


# -- parameters -----------------------------------------------------------------------------

@pytest.mark.parametrize("flavor,n,expected", [
    (linops.UNITARY, 512, 3584),
    (linops.COMPLEX_EVOLUTION, 512, 5120),
    (linops.UNITARY, 1, 7),
    (linops.COMPLEX_EVOLUTION, 1, 10),
])
def test_parameter_count(flavor, n, expected):
    c = Cascade(n, flavor, np.random.default_rng(0))
    assert linops.parameter_count(c) == expected
    assert sum(p.size for p in c.params.values()) == expected
    assert sum(s.n_params for s in c.stages) == expected


def test_initial_free_diagonal_on_unit_circle():
    c = Cascade(32, linops.COMPLEX_EVOLUTION, np.random.default_rng(0))
    assert np.max(np.abs(np.abs(c.diagonals()) - 1)) < 1e-15


def test_degenerate_reflector_rescaled():
    c = Cascade(8, linops.UNITARY, np.random.default_rng(0))
    direction = c.params["refl_re"][0] + 1j * c.params["refl_im"][0]
    c.params["refl_re"][0] *= 1e-14
    c.params["refl_im"][0] *= 1e-14
    assert c.renormalize_reflectors()
    v = c.reflectors()[0]
    assert np.isclose(np.linalg.norm(v), linops.REFLECTOR_RESCALE_NORM)
    np.testing.assert_allclose(v / np.linalg.norm(v), direction / np.linalg.norm(direction), atol=1e-12)
    c.params["refl_re"][1] = 0
    c.params["refl_im"][1] = 0
    assert c.renormalize_reflectors()
    assert np.linalg.norm(c.reflectors()[1]) > 0
    assert not c.renormalize_reflectors()


def test_bad_flavor_and_params_rejected():
    with pytest.raises(ValueError):
        Cascade(4, "orthogonal")
    with pytest.raises(ValueError):
        Cascade(4, linops.UNITARY, params={"theta": np.zeros((3, 4))}, perm=np.arange(4))
