"""Exact diagonalisation of the relative-motion Hamiltonian.

Three hard-core particles on a ring of length L = pi (two identical fermions
plus an impurity with mass ratio kappa = m_I/m) reduce, at zero total
momentum, to

    H = -1/2 (d1^2 + d2^2) - 1/(2 kappa) (d1 + d2)^2

on the square [0, pi]^2 with Dirichlet walls and fermionic antisymmetry.
We expand in the antisymmetrised sine pairs

    xi_{n1,n2}(z1, z2) = N [sin(n1 z1) sin(n2 z2) - sin(n2 z1) sin(n1 z2)],

with c > n1 > n2 > 0 and N = sqrt(2)/L. Mirror parity under z -> L - z is
(-1)^(n1+n2), and H never couples the two parity blocks, so each block is
assembled and diagonalised on its own.

The inverse mass ratio ``inv_kappa`` is used everywhere so that the
infinitely heavy impurity (1/kappa = 0) is representable exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import kernels

L_RING = math.pi
BASIS_NORM = math.sqrt(2.0) / L_RING

# Bethe-ansatz lattice values are in units where E = k1^2 + k2^2 + k3^2;
# the Hamiltonian above (hbar = m = 1, L = pi) measures energies twice that.
BETHE_ENERGY_SCALE = 2.0

PARITY_TOL = 1e-8


class SolverError(RuntimeError):
    """The dense eigensolver failed to converge."""


@dataclass(frozen=True)
class MassRatio:
    """Impurity-to-fermion mass ratio, stored as 1/kappa in [0, 1]."""

    inv_kappa: float

    def __post_init__(self):
        v = float(self.inv_kappa)
        if not (0.0 <= v <= 1.0) or math.isnan(v):
            raise ValueError(f"inv_kappa must lie in [0, 1], got {self.inv_kappa!r}")
        object.__setattr__(self, "inv_kappa", v)

    @classmethod
    def from_kappa(cls, kappa: float) -> "MassRatio":
        if math.isinf(kappa):
            return cls(0.0)
        if kappa < 1.0:
            raise ValueError(f"kappa must be >= 1, got {kappa!r}")
        return cls(1.0 / kappa)

    @property
    def kappa(self) -> float:
        return math.inf if self.inv_kappa == 0.0 else 1.0 / self.inv_kappa

    @property
    def integrable(self) -> bool:
        return self.inv_kappa in (0.0, 1.0)

    def __str__(self):
        k = self.kappa
        return "inf" if math.isinf(k) else f"{k:g}"


def as_mass_ratio(m) -> MassRatio:
    return m if isinstance(m, MassRatio) else MassRatio(m)


class BasisIndex(NamedTuple):
    """One antisymmetrised sine pair; ``n1`` is the larger quantum number."""

    n1: int
    n2: int
    c: int

    @classmethod
    def checked(cls, n1: int, n2: int, c: int) -> "BasisIndex":
        if not (0 < n2 < n1 < c):
            raise ValueError(f"basis index needs 0 < n2 < n1 < c, got ({n1}, {n2}, {c})")
        return cls(int(n1), int(n2), int(c))

    @property
    def parity(self) -> int:
        return 1 if (self.n1 + self.n2) % 2 == 0 else -1


def basis_dimension(c: int) -> int:
    return (c - 1) * (c - 2) // 2


def basis_pairs(c: int, parity: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (larger, smaller) quantum numbers in basis order.

    The order is gap-free row-major over the smaller number, then the
    larger one, i.e. the order of :func:`linear_index` with its gaps removed.
    ``parity`` restricts to the +1 (even n1+n2) or -1 (odd) block.
    """
    if c < 3:
        raise ValueError(f"cutoff must be >= 3, got {c}")
    i, j = np.triu_indices(c - 1, k=1)
    small = (i + 1).astype(np.int64)
    big = (j + 1).astype(np.int64)
    if parity is not None:
        keep = (big + small) % 2 == (0 if parity == 1 else 1)
        big, small = big[keep], small[keep]
    return big, small


def block_positions(c: int, parity: int) -> np.ndarray:
    """Positions of one parity block inside the full basis order."""
    big, small = basis_pairs(c)
    return np.flatnonzero((big + small) % 2 == (0 if parity == 1 else 1))


def linear_index(n_a: int, n_b: int, c: int) -> int:
    """Appendix-style linear index of the pair ``n_a < n_b < c`` (1-based, with gaps)."""
    if c < 3:
        raise ValueError(f"cutoff must be >= 3, got {c}")
    if not (0 < n_a < n_b < c):
        raise ValueError(f"pair must satisfy 0 < n_a < n_b < c, got ({n_a}, {n_b}, {c})")
    return n_b - n_a + c * (n_a - 1) - (n_a - 1) * n_a // 2


def inverse_index(n: int, c: int) -> tuple[int, int]:
    """Invert :func:`linear_index`; raises for values outside its image."""
    disc = c * c - c - 2 * n + 2.25
    if disc < 0:
        raise ValueError(f"index {n} out of range for cutoff {c}")
    # the closed form is exact at the start of each run and fractional inside it
    n_a = math.floor((1 + 2 * c) / 2 - math.sqrt(disc) + 1e-9)
    n_b = n + n_a - c * (n_a - 1) + (n_a - 1) * n_a // 2
    if not (0 < n_a < n_b < c) or linear_index(n_a, n_b, c) != n:
        raise ValueError(f"index {n} is not produced by linear_index for cutoff {c}")
    return n_a, n_b


def interaction_integral(s: int, t: int) -> float:
    """I(s, t) = [(-1)^s - 1][(-1)^t - 1] / (s t), zero if s or t vanishes."""
    s, t = int(s), int(t)
    if s == 0 or t == 0:
        return 0.0
    return ((-1) ** s - 1) * ((-1) ** t - 1) / (s * t)


def matrix_element(row: BasisIndex, col: BasisIndex, m) -> float:
    """<xi_row | H | xi_col> from the closed-form expression.

    The interaction bracket uses all four sign combinations of
    I(m1 +- n1, m2 +- n2), which keeps the element Hermitian.
    """
    if row.c != col.c:
        raise ValueError(f"cutoff mismatch: {row.c} vs {col.c}")
    ik = as_mass_ratio(m).inv_kappa
    m1, m2 = int(row.n1), int(row.n2)
    n1, n2 = int(col.n1), int(col.n2)
    delta = float(m1 == n1 and m2 == n2) - float(m1 == n2 and m2 == n1)
    kinetic = 0.5 * (n1 * n1 + n2 * n2) * (1.0 + ik) * delta
    if ik == 0.0:
        return kinetic
    I = interaction_integral
    bracket = (I(m1 + n2, m2 + n1) + I(m1 + n2, m2 - n1)
               + I(m1 - n2, m2 + n1) + I(m1 - n2, m2 - n1)
               - I(m1 + n1, m2 + n2) - I(m1 + n1, m2 - n2)
               - I(m1 - n1, m2 + n2) - I(m1 - n1, m2 - n2))
    return kinetic + n1 * n2 / math.pi**2 * ik * bracket


def assemble_hamiltonian(c: int, m, parity_block: int | None = None) -> np.ndarray:
    """Dense Hamiltonian over the (optionally parity-restricted) basis."""
    if parity_block not in (None, 1, -1):
        raise ValueError(f"parity_block must be None, +1 or -1, got {parity_block!r}")
    big, small = basis_pairs(c, parity_block)
    return kernels.coupling_matrix(big, small, as_mass_ratio(m).inv_kappa)


@dataclass(frozen=True)
class EigenSolution:
    """Sorted eigenpairs for one (mass ratio, cutoff).

    ``coefficients`` has one row per state over the full basis (both parity
    blocks), or is None when only energies were requested. ``parity_block``
    is 0 for a merged solution.
    """

    inv_kappa: float
    cutoff: int
    energies: np.ndarray
    parities: np.ndarray
    coefficients: np.ndarray | None = None
    parity_block: int = 0
    block_rank: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        p = np.asarray(self.parities, dtype=np.int8)
        if e.shape != p.shape:
            raise ValueError("energies and parities differ in length")
        if e.size > 1 and np.any(np.diff(e) < 0):
            raise ValueError("energies must be sorted ascending")
        rank = self.block_rank
        rank = np.arange(e.size) if rank is None else np.asarray(rank, dtype=np.int64)
        for name, arr in (("energies", e), ("parities", p), ("block_rank", rank)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.coefficients is not None:
            cf = np.asarray(self.coefficients, dtype=np.float64)
            if cf.shape != (e.size, basis_dimension(self.cutoff)):
                raise ValueError(f"coefficients shape {cf.shape} does not match "
                                 f"({e.size}, {basis_dimension(self.cutoff)})")
            cf.setflags(write=False)
            object.__setattr__(self, "coefficients", cf)

    @property
    def mass_ratio(self) -> MassRatio:
        return MassRatio(self.inv_kappa)

    def __len__(self):
        return self.energies.size

    def select(self, parity: int) -> "EigenSolution":
        """States of one parity, keeping their relative order."""
        keep = self.parities == parity
        return EigenSolution(
            inv_kappa=self.inv_kappa, cutoff=self.cutoff, energies=self.energies[keep],
            parities=self.parities[keep],
            coefficients=None if self.coefficients is None else self.coefficients[keep],
            parity_block=parity, block_rank=self.block_rank[keep])

    def truncate(self, n: int) -> "EigenSolution":
        return EigenSolution(
            inv_kappa=self.inv_kappa, cutoff=self.cutoff, energies=self.energies[:n],
            parities=self.parities[:n],
            coefficients=None if self.coefficients is None else self.coefficients[:n],
            parity_block=self.parity_block, block_rank=self.block_rank[:n])


def parity_of_state(coefficients: np.ndarray, c: int) -> int:
    """Mirror parity of a normalised state from its basis weights."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    big, small = basis_pairs(c)
    w = coefficients**2
    total = w.sum()
    even = w[(big + small) % 2 == 0].sum() / total
    if even > 1.0 - PARITY_TOL:
        return 1
    if even < PARITY_TOL:
        return -1
    raise ValueError(f"state mixes parity blocks (even weight {even:.3e})")


def _fix_sign(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive, for reproducible output
    idx = np.argmax(np.abs(vecs), axis=0)
    sign = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    sign[sign == 0] = 1.0
    return vecs * sign


def diagonalize(H: np.ndarray, m, c: int, parity_block: int | None = None,
                num_states: int | None = None, coefficients: bool = True) -> EigenSolution:
    """Eigendecomposition of an assembled Hamiltonian (full or one block).

    A full matrix is split into its two parity blocks before solving:
    cross-block degeneracies (exact at kappa = 1) would otherwise let the
    solver return parity-mixed eigenvectors.
    """
    H = np.asarray(H, dtype=np.float64)
    dim = H.shape[0]
    if parity_block is None:
        if dim != basis_dimension(c):
            raise ValueError(f"matrix of size {dim} is not the full basis for cutoff {c}")
        parts = []
        for p in (1, -1):
            pos = block_positions(c, p)
            parts.append(diagonalize(H[np.ix_(pos, pos)], m, c, p, num_states, coefficients))
        return merge_solutions(parts[0], parts[1], num_states)

    k = dim if num_states is None else min(int(num_states), dim)
    subset = None if k == dim else [0, k - 1]
    try:
        if coefficients:
            w, v = scipy.linalg.eigh(H, subset_by_index=subset, driver="evr",
                                     check_finite=False)
        else:
            w = scipy.linalg.eigh(H, eigvals_only=True, subset_by_index=subset,
                                  driver="evr", check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"eigensolver failed for dim={dim}: {exc}") from exc

    ik = as_mass_ratio(m).inv_kappa
    full = None
    if coefficients:
        full = np.zeros((k, basis_dimension(c)))
        full[:, block_positions(c, parity_block)] = _fix_sign(v).T
    parities = np.full(k, parity_block, dtype=np.int8)
    return EigenSolution(ik, c, w, parities, full, parity_block)


def merge_solutions(a: EigenSolution, b: EigenSolution,
                    num_states: int | None = None) -> EigenSolution:
    """Merge two single-block solutions, sorted by energy.

    Ties are broken by parity (+1 first), then by rank inside the block.
    """
    if (a.inv_kappa, a.cutoff) != (b.inv_kappa, b.cutoff):
        raise ValueError("cannot merge solutions of different systems")
    e = np.concatenate([a.energies, b.energies])
    p = np.concatenate([a.parities, b.parities])
    r = np.concatenate([a.block_rank, b.block_rank])
    order = np.lexsort((r, -p.astype(np.int64), e))
    if num_states is not None:
        order = order[:num_states]
    coeffs = None
    if a.coefficients is not None and b.coefficients is not None:
        coeffs = np.concatenate([a.coefficients, b.coefficients])[order]
    return EigenSolution(a.inv_kappa, a.cutoff, e[order], p[order], coeffs, 0, r[order])


def solve_spectrum(m, c: int, num_states: int | None = None, coefficients: bool = True,
                   parity: int | None = None) -> EigenSolution:
    """Assemble and diagonalise block by block.

    With ``parity`` set, only that block is solved. Otherwise both blocks are
    solved for their lowest ``num_states`` levels and merged; this guarantees
    the merged lowest ``num_states`` are exact members of the full spectrum.
    """
    m = as_mass_ratio(m)
    if parity is not None:
        H = assemble_hamiltonian(c, m, parity)
        return diagonalize(H, m, c, parity, num_states, coefficients)
    parts = []
    for p in (1, -1):
        H = assemble_hamiltonian(c, m, p)
        parts.append(diagonalize(H, m, c, p, num_states, coefficients))
        del H
    return merge_solutions(parts[0], parts[1], num_states)


# ---------------------------------------------------------------------------
# Bethe-ansatz benchmark (kappa = 1)
# ---------------------------------------------------------------------------

_BRANCH_SHIFT = {0: 0.0, -1: 1.0 / 3.0, -2: 2.0 / 3.0}


@dataclass(frozen=True)
class BetheSpectrum:
    """Exact kappa = 1 levels with their integer triples and branch labels.

    ``values`` are the raw lattice sums sum_i (n_i + shift)^2; ``energies``
    are the same levels in Hamiltonian units.
    """

    energies: np.ndarray
    values: np.ndarray
    triples: np.ndarray
    branches: np.ndarray

    def __len__(self):
        return self.energies.size


def branch_value(triple, branch: int) -> float:
    sh = _BRANCH_SHIFT[branch]
    return sum((n + sh) ** 2 for n in triple)


def _bethe_candidates(radius: int):
    r = np.arange(-radius, radius + 1)
    a, b = np.meshgrid(r, r, indexing="ij")
    a, b = a.ravel(), b.ravel()
    keep = a < b
    a, b = a[keep], b[keep]
    out = []
    for branch in (0, -1, -2):
        n3 = branch - a - b
        ok = (n3 > b) & (n3 <= radius)
        t = np.stack([a[ok], b[ok], n3[ok]], axis=1)
        sh = _BRANCH_SHIFT[branch]
        vals = ((t + sh) ** 2).sum(axis=1)
        out.append((t, np.full(len(t), branch, dtype=np.int8), vals))
    t = np.concatenate([o[0] for o in out])
    br = np.concatenate([o[1] for o in out])
    vals = np.concatenate([o[2] for o in out])
    return t, br, vals


def bethe_energies(count: int, max_radius: int = 4096) -> BetheSpectrum:
    """Lowest ``count`` equal-mass levels from the three Bethe branches.

    Admissible triples have three distinct integers and are counted once up
    to permutation (they are generated sorted, a < b < n3). This reproduces
    the diagonalised kappa = 1 spectrum level by level, including the
    twofold degeneracies between the sum = -1 and sum = -2 branches.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    radius = max(4, int(math.sqrt(count)) + 4)
    while True:
        t, br, vals = _bethe_candidates(radius)
        # any triple with |n_i| > radius has value > (radius + 1/3)^2
        if vals.size >= count:
            order = np.lexsort((t[:, 2], t[:, 1], t[:, 0], br, vals))[:count]
            if vals[order[-1]] < (radius + 1.0 / 3.0) ** 2:
                v = vals[order]
                return BetheSpectrum(BETHE_ENERGY_SCALE * v, v, t[order], br[order])
        if radius >= max_radius:
            raise ValueError(f"search radius {max_radius} exhausted before {count} levels")
        radius = min(2 * radius, max_radius)


class BenchmarkResult(NamedTuple):
    eps: np.ndarray
    below_1e4: int
    below_1e3: int


def benchmark_accuracy(energies, bethe) -> BenchmarkResult:
    """Per-level relative error (E_BA - E(c)) / E_BA and threshold counts."""
    e = np.asarray(getattr(energies, "energies", energies), dtype=np.float64)
    b = np.asarray(getattr(bethe, "energies", bethe), dtype=np.float64)
    if e.shape != b.shape:
        raise ValueError(f"length mismatch: {e.size} levels vs {b.size} exact levels")
    eps = (b - e) / b
    return BenchmarkResult(eps, int(np.sum(np.abs(eps) < 1e-4)),
                           int(np.sum(np.abs(eps) < 1e-3)))


# ---------------------------------------------------------------------------
# Geometry and level density
# ---------------------------------------------------------------------------


def weyl_density(m, L: float = L_RING) -> float:
    """Asymptotic density of states L^2/(4 pi) sqrt(kappa/(kappa+2))."""
    if L <= 0:
        raise ValueError("L must be positive")
    ik = as_mass_ratio(m).inv_kappa
    return L * L / (4.0 * math.pi) * math.sqrt(1.0 / (1.0 + 2.0 * ik))


def triangle_geometry(m) -> tuple[float, float]:
    """(base angle, apex angle) in radians of the equivalent isosceles billiard."""
    ik = as_mass_ratio(m).inv_kappa
    # tan(alpha) = sqrt((kappa + 2)/kappa) = sqrt(1 + 2/kappa)
    alpha = math.atan(math.sqrt(1.0 + 2.0 * ik))
    return alpha, math.pi - 2.0 * alpha


# ---------------------------------------------------------------------------
# Wave-function evaluation
# ---------------------------------------------------------------------------


def coefficient_matrix(coefficients: np.ndarray, c: int) -> np.ndarray:
    """Antisymmetric (c x c) array A with A[n1, n2] = coef, A[n2, n1] = -coef."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape[-1] != basis_dimension(c):
        raise ValueError("coefficient vector does not match the basis dimension")
    big, small = basis_pairs(c)
    A = np.zeros(coefficients.shape[:-1] + (c, c))
    A[..., big, small] = coefficients
    A[..., small, big] = -coefficients
    return A


def sine_table(c: int, z: np.ndarray) -> np.ndarray:
    """S[i, n] = sin(n z_i) for n = 0..c-1."""
    return np.sin(np.outer(np.asarray(z, dtype=np.float64), np.arange(c)))


def evaluate(coefficients: np.ndarray, c: int, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """psi on the tensor grid z1 x z2 (rows follow z1)."""
    A = coefficient_matrix(coefficients, c)
    return BASIS_NORM * (sine_table(c, z1) @ A @ sine_table(c, z2).T)


def basis_function(n1: int, n2: int, z1, z2) -> np.ndarray:
    """Closed-form xi_{n1,n2} at points (broadcasting)."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    return BASIS_NORM * (np.sin(n1 * z1) * np.sin(n2 * z2) - np.sin(n2 * z1) * np.sin(n1 * z2))
