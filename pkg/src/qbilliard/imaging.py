"""Pixel images of eigenstates and the derived inputs used by the classifier.

Grids are sampled at pixel centres z = (i + 1/2) L / R of the square
[0, L]^2 with ``grid[i, j] = psi(z1_i, z2_j)``. A normalised wave-function
grid satisfies sum(psi^2) (L/R)^2 = 1; a normalised density grid satisfies
sum(rho) (L/R)^2 = 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import spectral_core as sc

PSI = "psi"
DENSITY = "density"
KIND_CODES = {PSI: 0, DENSITY: 1}

INTEGRABLE = 0
NON_INTEGRABLE = 1
LABEL_NAMES = {INTEGRABLE: "integrable", NON_INTEGRABLE: "non-integrable"}

TRAIN_FRACTION = 0.85


@dataclass(frozen=True)
class PixelGrid:
    values: np.ndarray
    kind: str = PSI
    normalized: bool = False
    L: float = sc.L_RING

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"grid must be square, got shape {v.shape}")
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_area(self) -> float:
        return (self.L / self.resolution) ** 2

    def norm(self) -> float:
        """Riemann-sum norm: sum(psi^2) dA for psi grids, sum(rho) dA for densities."""
        v = self.values.astype(np.float64)
        return float(np.sum(v * v if self.kind == PSI else v) * self.cell_area)


def pixel_centers(R: int, L: float = sc.L_RING) -> np.ndarray:
    if R < 2:
        raise ValueError("resolution must be >= 2")
    return (np.arange(R) + 0.5) * L / R


def normalize(grid: PixelGrid) -> PixelGrid:
    n = grid.norm()
    if n <= 0:
        raise ValueError("cannot normalise an all-zero grid")
    scale = 1.0 / math.sqrt(n) if grid.kind == PSI else 1.0 / n
    return replace(grid, values=grid.values * scale, normalized=True)


def to_density(grid: PixelGrid, normalized: bool = True) -> PixelGrid:
    if grid.kind == DENSITY:
        return grid
    out = PixelGrid(grid.values * grid.values, DENSITY, grid.normalized, grid.L)
    return normalize(out) if normalized else out


def rasterize_many(solution: sc.EigenSolution, indices, R: int, kind: str = DENSITY,
                   normalized: bool = True, chunk: int = 128) -> np.ndarray:
    """Grids for several states of one solution, shape (n, R, R), float64.

    psi = N S A S^T with S[i, n] = sin(n z_i) shared across states and A the
    antisymmetric coefficient matrix of each state.
    """
    if solution.coefficients is None:
        raise ValueError("solution carries no coefficients")
    if kind not in KIND_CODES:
        raise ValueError(f"unknown grid kind {kind!r}")
    indices = np.asarray(indices, dtype=np.int64)
    c = solution.cutoff
    S = sc.sine_table(c, pixel_centers(R))
    dA = (sc.L_RING / R) ** 2
    out = np.empty((len(indices), R, R))
    for lo in range(0, len(indices), chunk):
        A = sc.coefficient_matrix(solution.coefficients[indices[lo:lo + chunk]], c)
        psi = sc.BASIS_NORM * np.matmul(np.matmul(S, A), S.T)
        if normalized:
            psi /= np.sqrt(np.sum(psi * psi, axis=(1, 2)) * dA)[:, None, None]
        out[lo:lo + chunk] = psi if kind == PSI else psi * psi
    return out


def rasterize(solution: sc.EigenSolution, index: int, R: int, kind: str = PSI,
              normalized: bool = True) -> PixelGrid:
    """Pixel-centre samples of one eigenstate."""
    v = rasterize_many(solution, [index], R, kind, normalized)[0]
    return PixelGrid(v, kind, normalized)


def amplitude_histogram(grid: PixelGrid, num_bins: int = 50, value_max: float | None = None):
    """Density-normalised histogram of |psi| over the pixels.

    Returns (edges, counts, densities).
    """
    a = np.abs(np.asarray(grid.values, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("empty grid")
    hi = a.max() if value_max is None else value_max
    if hi <= 0:
        hi = 1.0
    edges = np.linspace(0.0, hi, num_bins + 1)
    counts, _ = np.histogram(a, bins=edges)
    dens = counts / (counts.sum() * np.diff(edges))
    return edges, counts, dens


def gaussian_prediction(psi, L: float = sc.L_RING):
    """Random-wave amplitude density with variance fixed by normalisation, v = 1/L."""
    if L <= 0:
        raise ValueError("L must be positive")
    v = 1.0 / L
    psi = np.asarray(psi, dtype=np.float64)
    return np.exp(-psi * psi / (2.0 * v * v)) / (math.sqrt(2.0 * math.pi) * v)


def amplitude_ks(grid: PixelGrid) -> float:
    """KS distance of pixel |psi| to the parameter-free half-normal (v = 1/L)."""
    from .spectral_stats import half_normal_cdf, ks_distance

    v = 1.0 / grid.L
    return ks_distance(np.abs(grid.values).ravel(), lambda x: half_normal_cdf(x, v))


# ---------------------------------------------------------------------------
# Bosonic box states (out-of-distribution test inputs)
# ---------------------------------------------------------------------------


def bosonic_wavefunction(k1: int, k2: int, z1, z2, L: float = sc.L_RING):
    norm = 1.0 if k1 == k2 else math.sqrt(2.0)
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    return norm / L * (np.sin(k1 * z1) * np.sin(k2 * z2) + np.sin(k2 * z1) * np.sin(k1 * z2))


def bosonic_state(k1: int, k2: int, R: int) -> PixelGrid:
    """Symmetric two-boson box state on the pixel grid (closed-form normalisation)."""
    if not 1 <= k1 <= k2:
        raise ValueError(f"need 1 <= k1 <= k2, got ({k1}, {k2})")
    z = pixel_centers(R)
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    return PixelGrid(bosonic_wavefunction(k1, k2, Z1, Z2), PSI, False)


def bosonic_levels(count: int) -> list[tuple[int, int]]:
    """(k1, k2) pairs with k1 <= k2 ordered by energy (k1^2 + k2^2)/2, ties by k1."""
    # pairs with k1 <= k2 fill an eighth of the disc k1^2 + k2^2 < kmax^2
    kmax = int(math.sqrt(8 * count / math.pi)) + 2
    while True:
        pairs = [(a, b) for a in range(1, kmax + 1) for b in range(a, kmax + 1)]
        pairs.sort(key=lambda p: (p[0] ** 2 + p[1] ** 2, p[0]))
        # any pair with k2 > kmax lies above kmax^2, so the prefix is complete
        if len(pairs) >= count and pairs[count - 1][0] ** 2 + pairs[count - 1][1] ** 2 < kmax**2:
            return pairs[:count]
        kmax += 4


def bosonic_images(start: int = 50, stop: int = 1050, R: int = 64) -> np.ndarray:
    """Normalised density images of bosonic states start..stop-1 (0 = ground)."""
    out = np.empty((stop - start, R, R))
    for i, (k1, k2) in enumerate(bosonic_levels(stop)[start:]):
        out[i] = to_density(bosonic_state(k1, k2, R)).values
    return out


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledImage:
    grid: PixelGrid
    label: int
    inv_kappa: float
    state_index: int

    def __post_init__(self):
        want = INTEGRABLE if self.inv_kappa in (0.0, 1.0) else NON_INTEGRABLE
        if self.label != want:
            raise ValueError("label must be integrable exactly when 1/kappa is 0 or 1")


def label_for(inv_kappa: float) -> int:
    return INTEGRABLE if inv_kappa in (0.0, 1.0) else NON_INTEGRABLE


def split_indices(count: int, seed: int, train_fraction: float = TRAIN_FRACTION):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(count)
    n_train = int(round(train_fraction * count))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class Dataset:
    """Labelled images plus a deterministic train/test split.

    Images are float32 (n, R, R). ``energies`` is optional bookkeeping that
    the binary file format does not carry.
    """

    images: np.ndarray
    labels: np.ndarray
    inv_kappa: np.ndarray
    state_index: np.ndarray
    train: np.ndarray
    test: np.ndarray
    split_seed: int
    kind: str = DENSITY
    energies: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.images)
        for name in ("labels", "inv_kappa", "state_index"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match the image count")
        both = np.concatenate([self.train, self.test])
        if len(both) != n or len(np.unique(both)) != n:
            raise ValueError("train/test split must partition the records")

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def __len__(self):
        return len(self.images)

    def record(self, i: int) -> LabeledImage:
        grid = PixelGrid(self.images[i], self.kind, True)
        return LabeledImage(grid, int(self.labels[i]), float(self.inv_kappa[i]),
                            int(self.state_index[i]))


def aliasing_ok(R: int, state_index: int) -> bool:
    return R >= 2.0 * math.sqrt(state_index)


def build_dataset(solutions, state_range=(50, 1050), R: int = 64, kind: str = DENSITY,
                  split_seed: int = 0) -> Dataset:
    """Label, rasterise and split states of several mass ratios.

    State indices follow the merged-parity energy order of each solution.
    Records are ordered by (kappa, state_index) before the split so the
    result does not depend on the order of ``solutions``.
    """
    start, stop = state_range
    sols = sorted(solutions, key=lambda s: (s.inv_kappa == 0.0, -s.inv_kappa))
    if not aliasing_ok(R, stop - 1):
        warnings.warn(f"R={R} is below 2*sqrt(N) for states up to {stop - 1}; "
                      "the highest states may alias", stacklevel=2)
    images, labels, ik, idx, energies = [], [], [], [], []
    for s in sols:
        if len(s) < stop:
            raise ValueError(f"1/kappa={s.inv_kappa}: only {len(s)} states, need {stop}")
        if s.coefficients is None:
            raise ValueError(f"1/kappa={s.inv_kappa}: solution has no coefficients")
        states = np.arange(start, stop)
        images.append(rasterize_many(s, states, R, kind).astype(np.float32))
        labels.append(np.full(len(states), label_for(s.inv_kappa), dtype=np.uint8))
        ik.append(np.full(len(states), s.inv_kappa))
        idx.append(states.astype(np.uint32))
        energies.append(s.energies[start:stop])
    n = sum(len(x) for x in labels)
    train, test = split_indices(n, split_seed)
    return Dataset(np.concatenate(images), np.concatenate(labels), np.concatenate(ik),
                   np.concatenate(idx), train, test, int(split_seed), kind,
                   np.concatenate(energies))


def scale_image(grid: PixelGrid, alpha: float) -> PixelGrid:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return replace(grid, values=grid.values * alpha,
                   normalized=grid.normalized and alpha == 1.0)


# ---------------------------------------------------------------------------
# Noise and synthetic inputs
# ---------------------------------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _orbit_sizes(R: int) -> np.ndarray:
    # orbits under {id, transpose, double reflection, both} have 4 points,
    # 2 on the diagonal or anti-diagonal, 1 at the centre (odd R)
    i, j = np.indices((R, R))
    size = np.full((R, R), 4)
    size[(i == j) | (i + j == R - 1)] = 2
    size[(i == j) & (i + j == R - 1)] = 1
    return size


def symmetric_noise_field(R: int, sigma: float, seed=None) -> np.ndarray:
    """Gaussian field even under transpose and under the double reflection.

    The raw draw is averaged over the four-element symmetry group; pixels in
    an orbit of size k are then rescaled by sqrt(k) so every pixel keeps
    standard deviation ``sigma``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    raw = _rng(seed).standard_normal((R, R)) * sigma
    flip = raw[::-1, ::-1]
    avg = 0.25 * (raw + raw.T + flip + flip.T)
    return avg * np.sqrt(_orbit_sizes(R))


def multiplicative_noise(grid: PixelGrid, sigma: float, seed=None) -> PixelGrid:
    """psi~ = a psi (1 + r); keeps nodal lines and both symmetries of psi."""
    if grid.kind != PSI:
        raise ValueError("noise acts on wave-function grids")
    if sigma == 0 and grid.normalized:
        return grid
    r = symmetric_noise_field(grid.resolution, sigma, seed)
    return normalize(PixelGrid(grid.values * (1.0 + r), PSI, False, grid.L))


def additive_noise(grid: PixelGrid, sigma: float, G: float, seed=None) -> PixelGrid:
    """psi_bar = a (psi + G r)."""
    if grid.kind != PSI:
        raise ValueError("noise acts on wave-function grids")
    if G < 0:
        raise ValueError("G must be >= 0")
    if (sigma == 0 or G == 0) and grid.normalized:
        return grid
    r = symmetric_noise_field(grid.resolution, sigma, seed)
    return normalize(PixelGrid(grid.values + G * r, PSI, False, grid.L))


RANDOM_DISTRIBUTIONS = ("gaussian", "laplace", "uniform")


def random_image(R: int, zero_fraction: float, distribution: str = "gaussian",
                 seed=None) -> PixelGrid:
    """Density |psi|^2 of a random state with exactly round(zero_fraction R^2) zero pixels.

    Pixel amplitudes psi are i.i.d. draws from ``distribution``; a random
    subset of pixels is then set to zero and the result normalised.
    """
    if not 0.0 <= zero_fraction < 1.0:
        raise ValueError("zero_fraction must lie in [0, 1)")
    rng = _rng(seed)
    if distribution == "gaussian":
        v = rng.standard_normal(R * R)
    elif distribution == "laplace":
        v = rng.laplace(size=R * R)
    elif distribution == "uniform":
        v = rng.uniform(-1.0, 1.0, size=R * R)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    v = v * v
    nz = int(round(zero_fraction * R * R))
    v[rng.choice(R * R, size=nz, replace=False)] = 0.0
    return normalize(PixelGrid(v.reshape(R, R), DENSITY, False))
