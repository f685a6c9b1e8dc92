"""Level statistics: unfolding, spacing histograms, minimal gaps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass(frozen=True)
class UnfoldedSpectrum:
    levels: np.ndarray
    parity: int = 0
    inv_kappa: float | None = None
    mean_spacing: float = 1.0

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.levels)


@dataclass(frozen=True)
class SpacingHistogram:
    edges: np.ndarray
    counts: np.ndarray
    densities: np.ndarray
    overflow: int = 0

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def _check_sorted(e: np.ndarray):
    if e.ndim != 1 or e.size < 2:
        raise ValueError("need at least two levels")
    if np.any(np.diff(e) < 0):
        raise ValueError("levels must be sorted ascending")


def unfold(energies, parity: int = 0, inv_kappa: float | None = None) -> UnfoldedSpectrum:
    """Rescale levels so the mean nearest-neighbour spacing is one.

    A global mean-spacing rescale, no staircase fit. Accepts an
    EigenSolution directly.
    """
    if hasattr(energies, "energies"):
        parity = parity or int(getattr(energies, "parity_block", 0))
        inv_kappa = energies.inv_kappa if inv_kappa is None else inv_kappa
        energies = energies.energies
    e = np.asarray(energies, dtype=np.float64)
    _check_sorted(e)
    mean = (e[-1] - e[0]) / (e.size - 1)
    if mean <= 0:
        raise ValueError("degenerate spectrum: zero mean spacing")
    return UnfoldedSpectrum(e / mean, parity, inv_kappa, mean)


def default_bins(n_spacings: int) -> int:
    return max(1, int(round(math.sqrt(n_spacings))))


def spacing_histogram(u: UnfoldedSpectrum, num_bins: int | None = None,
                      s_max: float = 4.0) -> SpacingHistogram:
    """Density-normalised histogram of consecutive spacings on [0, s_max].

    Spacings beyond ``s_max`` are counted in ``overflow`` and left out of the
    normalisation. The default bin count is round(sqrt(#spacings)).
    """
    s = u.spacings
    if s.size == 0:
        raise ValueError("empty spectrum")
    num_bins = default_bins(s.size) if num_bins is None else int(num_bins)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    edges = np.linspace(0.0, s_max, num_bins + 1)
    counts, _ = np.histogram(s, bins=edges)
    inside = counts.sum()
    dens = counts / (inside * np.diff(edges)) if inside else np.zeros(num_bins)
    return SpacingHistogram(edges, counts, dens, int(s.size - inside))


def wigner_goe(s):
    """Wigner surmise (pi s / 2) exp(-pi s^2 / 4)."""
    s = np.asarray(s, dtype=np.float64)
    return 0.5 * np.pi * s * np.exp(-0.25 * np.pi * s * s)


def poisson(s):
    return np.exp(-np.asarray(s, dtype=np.float64))


def goe_cdf(s):
    s = np.asarray(s, dtype=np.float64)
    return 1.0 - np.exp(-0.25 * np.pi * s * s)


def poisson_cdf(s):
    return 1.0 - np.exp(-np.asarray(s, dtype=np.float64))


def ks_distance(samples, cdf) -> float:
    """Kolmogorov-Smirnov distance between a sample and a continuous CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    f = cdf(x)
    hi = np.arange(1, n + 1) / n - f
    lo = f - np.arange(n) / n
    return float(max(hi.max(), lo.max()))


def small_spacing_fraction(u: UnfoldedSpectrum, threshold: float = 0.05) -> float:
    return float(np.mean(u.spacings < threshold))


def delta_min(energies, N: int) -> float:
    """Smallest gap among the first N levels of one symmetry sector."""
    e = np.asarray(getattr(energies, "energies", energies), dtype=np.float64)
    if N < 2:
        raise ValueError("N must be >= 2")
    if N > e.size:
        raise ValueError(f"N={N} exceeds the {e.size} available levels")
    return float(np.min(np.diff(e[:N])))


def delta_min_curve(energies, N_grid) -> np.ndarray:
    e = np.asarray(getattr(energies, "energies", energies), dtype=np.float64)
    N_grid = np.asarray(N_grid, dtype=np.int64)
    if N_grid.min() < 2 or N_grid.max() > e.size:
        raise ValueError("N grid outside [2, number of levels]")
    running = np.minimum.accumulate(np.diff(e))
    return running[N_grid - 2]


def delta_min_average(spectra, N_grid) -> np.ndarray:
    """Mean of delta_min(N) over several spectra (one per mass ratio).

    ``spectra`` is a sequence of level arrays or EigenSolutions, already
    restricted to one parity sector.
    """
    spectra = list(spectra)
    if not spectra:
        raise ValueError("no spectra given")
    curves = [delta_min_curve(s, N_grid) for s in spectra]
    return np.mean(curves, axis=0)


def fit_power_law(N, values) -> tuple[float, float]:
    """Least-squares fit of log(value) = log(a) + b log(N); returns (a, b)."""
    N = np.asarray(N, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0) or np.any(N <= 0):
        raise ValueError("power-law fit needs positive values")
    b, log_a = np.polyfit(np.log(N), np.log(v), 1)
    return float(math.exp(log_a)), float(b)


def half_normal_cdf(x, v: float):
    """CDF of |psi| when psi ~ Normal(0, v^2)."""
    return special.erf(np.asarray(x, dtype=np.float64) / (v * math.sqrt(2.0)))
