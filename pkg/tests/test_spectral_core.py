import itertools
import math

import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from qbilliard import kernels
from qbilliard import spectral_core as sc
from qbilliard.spectral_core import BasisIndex, MassRatio


# ----------------------------------------------------------------- indexing

def test_linear_index_examples():
    assert sc.linear_index(1, 2, 130) == 1
    assert sc.linear_index(2, 3, 130) == 130


def test_inverse_index_examples():
    assert sc.inverse_index(1, 130) == (1, 2)
    assert sc.inverse_index(130, 130) == (2, 3)


def test_index_round_trip_exhaustive():
    c = 20
    pairs = [(a, b) for a in range(1, c) for b in range(a + 1, c)]
    assert len(pairs) == 171
    image = set()
    for a, b in pairs:
        n = sc.linear_index(a, b, c)
        assert sc.inverse_index(n, c) == (a, b)
        image.add(n)
    assert len(image) == 171


def test_index_gaps_rejected():
    c = 20
    image = {sc.linear_index(a, b, c) for a in range(1, c) for b in range(a + 1, c)}
    gaps = [n for n in range(1, max(image) + 1) if n not in image]
    assert c - 1 in gaps
    for n in gaps:
        with pytest.raises(ValueError):
            sc.inverse_index(n, c)


@pytest.mark.parametrize("pair", [(2, 1), (3, 3), (0, 4), (5, 20)])
def test_linear_index_rejects_bad_pairs(pair):
    with pytest.raises(ValueError):
        sc.linear_index(*pair, 20)


def test_basis_order_matches_linear_index():
    c = 17
    big, small = sc.basis_pairs(c)
    lin = [sc.linear_index(a, b, c) for a, b in zip(small, big)]
    assert lin == sorted(lin)
    assert len(big) == sc.basis_dimension(c)


def test_full_dimension_at_production_cutoff():
    assert len(sc.basis_pairs(130)[0]) == 8256 == 129 * 128 // 2


# ----------------------------------------------------------- matrix elements

def test_interaction_integral_examples():
    assert sc.interaction_integral(1, 1) == 4
    assert sc.interaction_integral(2, 1) == 0
    assert sc.interaction_integral(0, 3) == 0
    assert sc.interaction_integral(-1, 3) == pytest.approx(-4 / 3)


def test_matrix_element_examples():
    c = 20
    assert sc.matrix_element(BasisIndex(2, 1, c), BasisIndex(2, 1, c), 0.0) == 2.5
    assert sc.matrix_element(BasisIndex(2, 1, c), BasisIndex(3, 1, c), 1.0) == 0.0
    with pytest.raises(ValueError):
        sc.matrix_element(BasisIndex(2, 1, 20), BasisIndex(3, 1, 21), 1.0)


def test_matrix_element_symmetric_random_pairs():
    rng = np.random.default_rng(7)
    big, small = sc.basis_pairs(20)
    for _ in range(100):
        i, j = rng.integers(0, len(big), size=2)
        a = BasisIndex(big[i], small[i], 20)
        b = BasisIndex(big[j], small[j], 20)
        assert sc.matrix_element(a, b, 0.5) == pytest.approx(
            sc.matrix_element(b, a, 0.5), rel=1e-13, abs=1e-15)


def _quadrature_element(m, n, inv_kappa, npts=160):
    """<xi_m|H|xi_n> by tensor Gauss-Legendre quadrature of the analytic
    derivatives: independent of the closed-form I-bracket."""
    x, w = leggauss(npts)
    z = 0.5 * math.pi * (x + 1.0)
    w = 0.5 * math.pi * w
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    W = np.outer(w, w)
    N = sc.BASIS_NORM
    n1, n2 = n
    xi_m = sc.basis_function(m[0], m[1], Z1, Z2)
    lap = -(n1**2 + n2**2) * sc.basis_function(n1, n2, Z1, Z2)
    d12 = N * n1 * n2 * (np.cos(n1 * Z1) * np.cos(n2 * Z2) - np.cos(n2 * Z1) * np.cos(n1 * Z2))
    # H = -1/2 (d11 + d22) - ik/2 (d11 + d22 + 2 d12)
    h_xi = -0.5 * lap - 0.5 * inv_kappa * (lap + 2.0 * d12)
    return float(np.sum(W * xi_m * h_xi))


@pytest.mark.parametrize("inv_kappa", [1.0, 0.5, 0.2])
def test_matrix_element_matches_quadrature(inv_kappa):
    rng = np.random.default_rng(3)
    big, small = sc.basis_pairs(12)
    for _ in range(25):
        i, j = rng.integers(0, len(big), size=2)
        a = BasisIndex(big[i], small[i], 12)
        b = BasisIndex(big[j], small[j], 12)
        want = _quadrature_element((a.n1, a.n2), (b.n1, b.n2), inv_kappa)
        assert sc.matrix_element(a, b, inv_kappa) == pytest.approx(want, abs=1e-10)


# ---------------------------------------------------------------- assembly

def test_assembly_matches_matrix_element():
    c = 12
    H = sc.assemble_hamiltonian(c, MassRatio(1 / 3))
    big, small = sc.basis_pairs(c)
    for i, j in itertools.product(range(len(big)), repeat=2):
        want = sc.matrix_element(BasisIndex(big[i], small[i], c),
                                 BasisIndex(big[j], small[j], c), 1 / 3)
        assert H[i, j] == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_assembly_exactly_symmetric():
    H = sc.assemble_hamiltonian(25, 0.37)
    assert np.array_equal(H, H.T)


def test_diagonal_when_impurity_infinitely_heavy():
    c = 20
    H = sc.assemble_hamiltonian(c, 0.0)
    big, small = sc.basis_pairs(c)
    assert np.count_nonzero(H - np.diag(np.diag(H))) == 0
    assert np.array_equal(np.diag(H), 0.5 * (big**2 + small**2))


def test_cross_parity_elements_vanish():
    c = 20
    H = sc.assemble_hamiltonian(c, 1 / 3)
    even = sc.block_positions(c, 1)
    odd = sc.block_positions(c, -1)
    assert np.count_nonzero(H[np.ix_(even, odd)]) == 0


def test_block_assembly_is_a_submatrix():
    c = 18
    H = sc.assemble_hamiltonian(c, 0.4)
    for p in (1, -1):
        pos = sc.block_positions(c, p)
        assert np.array_equal(sc.assemble_hamiltonian(c, 0.4, p), H[np.ix_(pos, pos)])


@pytest.mark.skipif(kernels.NUMBA_KERNELS is None, reason="numba unavailable")
def test_numba_and_numpy_assembly_agree():
    big, small = sc.basis_pairs(30, 1)
    a = kernels.NUMBA_KERNELS["coupling"](big, small, 0.7)
    b = kernels.NUMPY_KERNELS["coupling"](big, small, 0.7)
    assert np.array_equal(a, b)


# ------------------------------------------------------------ diagonalising

def test_diagonal_limit_spectrum():
    c = 20
    sol = sc.solve_spectrum(0.0, c)
    big, small = sc.basis_pairs(c)
    want = np.sort(0.5 * (big**2 + small**2))
    np.testing.assert_allclose(sol.energies, want, rtol=0, atol=1e-12)
    # eigenvectors are unit basis vectors
    assert np.allclose(np.abs(sol.coefficients).max(axis=1), 1.0)


def test_blocks_and_full_solve_agree():
    c = 20
    m = MassRatio(0.45)
    H = sc.assemble_hamiltonian(c, m)
    full = np.linalg.eigvalsh(H)
    merged = sc.diagonalize(H, m, c)
    np.testing.assert_allclose(merged.energies, full, atol=1e-10)
    split = sc.solve_spectrum(m, c)
    np.testing.assert_allclose(split.energies, full, atol=1e-10)


def test_eigenvectors_orthonormal():
    sol = sc.solve_spectrum(0.5, 16)
    C = sol.coefficients
    np.testing.assert_allclose(C @ C.T, np.eye(len(sol)), atol=1e-12)


def test_variational_monotonicity():
    low = sc.solve_spectrum(0.5, 20, num_states=60, coefficients=False)
    high = sc.solve_spectrum(0.5, 30, num_states=60, coefficients=False)
    assert np.all(high.energies <= low.energies + 1e-10)


def test_partial_solve_matches_full():
    full = sc.solve_spectrum(0.3, 22, coefficients=False)
    part = sc.solve_spectrum(0.3, 22, num_states=40, coefficients=False)
    np.testing.assert_allclose(part.energies, full.energies[:40], atol=1e-10)


def test_degenerate_ties_put_even_parity_first():
    # kappa = 1 has exact cross-block degeneracies
    sol = sc.solve_spectrum(1.0, 30, num_states=40, coefficients=False)
    e, p = sol.energies, sol.parities
    for i in range(len(e) - 1):
        if e[i + 1] - e[i] < 1e-9:
            assert (p[i], p[i + 1]) in ((1, -1), (1, 1), (-1, -1))


# ------------------------------------------------------------------ parity

def _unit_state(n1, n2, c):
    big, small = sc.basis_pairs(c)
    v = np.zeros(len(big))
    v[np.flatnonzero((big == n1) & (small == n2))] = 1.0
    return v


@pytest.mark.parametrize("n1,n2,p", [(2, 1, -1), (3, 1, 1), (7, 4, -1), (9, 5, 1)])
def test_parity_of_basis_states(n1, n2, p):
    assert sc.parity_of_state(_unit_state(n1, n2, 12), 12) == p
    # mirror check on the closed form: psi(pi - z1, pi - z2) = p psi(z1, z2)
    z = np.linspace(0.1, 3.0, 7)
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    np.testing.assert_allclose(sc.basis_function(n1, n2, np.pi - Z1, np.pi - Z2),
                               p * sc.basis_function(n1, n2, Z1, Z2), atol=1e-13)


def test_parity_rejects_mixed_state():
    v = _unit_state(2, 1, 10) + _unit_state(3, 1, 10)
    with pytest.raises(ValueError):
        sc.parity_of_state(v / np.linalg.norm(v), 10)


def test_block_eigenvectors_carry_block_parity():
    for p in (1, -1):
        sol = sc.solve_spectrum(0.5, 14, parity=p)
        assert all(sc.parity_of_state(row, 14) == p for row in sol.coefficients)


# ------------------------------------------------------------------- Bethe

def test_bethe_lowest_level():
    b = sc.bethe_energies(5)
    assert tuple(b.triples[0]) == (-1, 0, 1)
    assert b.branches[0] == 0
    assert b.values[0] == 2.0
    ground = sc.solve_spectrum(1.0, 60, num_states=1, coefficients=False).energies[0]
    assert b.energies[0] == pytest.approx(ground, rel=1e-5)


def test_bethe_values_reproduce_branch_formula():
    b = sc.bethe_energies(400)
    for t, br, v in zip(b.triples, b.branches, b.values):
        assert sum(t) == br
        assert len(set(t)) == 3
        assert v == pytest.approx(sc.branch_value(t, br), rel=1e-15)
    assert np.all(np.diff(b.values) >= 0)


def test_bethe_brute_force_enumeration():
    # independent enumeration over all permutations, then dedupe
    seen = set()
    R = 12
    for a, b, c3 in itertools.product(range(-R, R + 1), repeat=3):
        s = a + b + c3
        if s in (0, -1, -2) and len({a, b, c3}) == 3:
            seen.add((tuple(sorted((a, b, c3))), s))
    vals = sorted(sc.branch_value(t, s) for t, s in seen)
    np.testing.assert_allclose(sc.bethe_energies(60).values, vals[:60], rtol=1e-14)


def test_bethe_matches_diagonalisation_low_levels():
    sol = sc.solve_spectrum(1.0, 60, num_states=50, coefficients=False)
    res = sc.benchmark_accuracy(sol, sc.bethe_energies(50))
    assert np.all(np.abs(res.eps) < 1e-4)


def test_benchmark_identical_inputs():
    b = sc.bethe_energies(30)
    res = sc.benchmark_accuracy(b.energies, b)
    assert np.all(res.eps == 0) and res.below_1e4 == 30 and res.below_1e3 == 30
    with pytest.raises(ValueError):
        sc.benchmark_accuracy(b.energies[:5], b)


# ---------------------------------------------------------------- geometry

def test_weyl_density():
    assert sc.weyl_density(0.0) == pytest.approx(math.pi / 4, abs=1e-6)
    assert sc.weyl_density(1.0) == pytest.approx(math.pi / (4 * math.sqrt(3)), abs=1e-6)
    vals = [sc.weyl_density(x) for x in np.linspace(1, 0, 11)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        sc.weyl_density(0.5, L=0)


def test_triangle_geometry():
    a, apex = sc.triangle_geometry(1.0)
    assert math.degrees(a) == pytest.approx(60) and math.degrees(apex) == pytest.approx(60)
    a, apex = sc.triangle_geometry(0.0)
    assert math.degrees(a) == pytest.approx(45) and math.degrees(apex) == pytest.approx(90)
    a, _ = sc.triangle_geometry(MassRatio.from_kappa(2))
    assert math.degrees(a) == pytest.approx(54.7356, abs=1e-4)


def test_mass_ratio_validation():
    with pytest.raises(ValueError):
        MassRatio(1.5)
    with pytest.raises(ValueError):
        MassRatio(-0.1)
    assert MassRatio.from_kappa(math.inf).inv_kappa == 0.0
    assert MassRatio(0.2).kappa == pytest.approx(5)


def test_evaluate_matches_basis_function():
    c = 10
    v = _unit_state(5, 2, c)
    z = (np.arange(9) + 0.5) * np.pi / 9
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    np.testing.assert_allclose(sc.evaluate(v, c, z, z), sc.basis_function(5, 2, Z1, Z2),
                               atol=1e-13)
