"""Drivers for the classifier experiments and a small on-disk artifact cache.

Every driver is a pure function of its inputs (parameters, images, grids,
seeds), so rerunning yields identical numbers and identical CSV bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import convnet as cn
from . import formats
from . import imaging as im
from . import spectral_core as sc

DATASET_KAPPAS = (1.0, 2.0, 5.0, math.inf)
MASS_SCAN_KAPPAS = (1.05, 1.1, 1.25, 1.5, 2.0, 3.0, 4.0, 5.0, 10.0, math.inf)
ALPHA_GRID = (0.25, 0.5, 0.8, 1.0, 1.25, 2.0, 4.0)
SIGMA_GRID = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
ENSEMBLE_SEEDS = (0, 1, 2, 3, 4)
ZERO_FRACTIONS = (0.0, 0.35)
ATTACK_STEP = 1e-3


def inv(kappa: float) -> float:
    return sc.MassRatio.from_kappa(kappa).inv_kappa


def kappa_of(inv_kappa: float) -> float:
    return math.inf if inv_kappa == 0 else 1.0 / inv_kappa


# ---------------------------------------------------------------------------
# Result records
# ---------------------------------------------------------------------------


@dataclass
class ScanResult:
    """Accuracy against one scanned quantity.

    ``per_member`` has shape (members, points); ``per_class`` maps a class or
    source name to a per-point accuracy array.
    """

    name: str
    abscissa: np.ndarray
    per_member: np.ndarray
    per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        self.abscissa = np.asarray(self.abscissa, dtype=np.float64)
        self.per_member = np.atleast_2d(np.asarray(self.per_member, dtype=np.float64))
        if self.per_member.shape[1] != self.abscissa.size:
            raise ValueError("per_member columns must match the abscissa")
        a = self.per_member[np.isfinite(self.per_member)]
        if np.any((a < 0) | (a > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def accuracy(self) -> np.ndarray:
        return self.per_member.mean(axis=0)

    @property
    def band(self) -> tuple[np.ndarray, np.ndarray]:
        return self.per_member.min(axis=0), self.per_member.max(axis=0)

    def at(self, x: float) -> float:
        i = np.flatnonzero(self.abscissa == x)
        if i.size == 0:
            raise KeyError(x)
        return float(self.accuracy[i[0]])


class InfluenceResult:
    __slots__ = ("beta", "beta_first_energy", "f1_diff", "test_index")

    def __init__(self, beta, beta_first_energy, f1_diff, test_index):
        if not -1.0 <= f1_diff <= 1.0:
            raise ValueError("f1 difference must lie in [-1, 1]")
        self.beta = tuple(int(b) for b in beta)
        self.beta_first_energy = float(beta_first_energy)
        self.f1_diff = float(f1_diff)
        self.test_index = int(test_index)

    @property
    def beta_size(self) -> int:
        return len(self.beta)

    def __repr__(self):
        return (f"InfluenceResult(size={self.beta_size}, E={self.beta_first_energy:.4g}, "
                f"diff={self.f1_diff:.3g})")


@dataclass
class AttackResult:
    iterations: int
    success: bool
    linf_rel: float
    before: cn.Prediction
    after: cn.Prediction
    image: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------------


def _accuracy(params, images, truth) -> float:
    return cn.evaluate(params, images, truth).accuracy


def mass_scan(ensemble, images_by_kappa: dict) -> ScanResult:
    """Accuracy per kappa; every kappa other than 1 and infinity counts as non-integrable."""
    kappas = sorted(images_by_kappa, key=lambda k: (math.isinf(k), k))
    if not kappas:
        raise ValueError("no spectra to scan")
    acc = np.empty((len(ensemble), len(kappas)))
    for j, k in enumerate(kappas):
        imgs = images_by_kappa[k]
        truth = np.full(len(imgs), im.label_for(inv(k)))
        for i, params in enumerate(ensemble):
            acc[i, j] = _accuracy(params, imgs, truth)
    return ScanResult("kappa", kappas, acc)


def _source_masks(dataset):
    return {k: dataset.inv_kappa == inv(k) for k in DATASET_KAPPAS}


def alpha_scan(params, dataset, alphas=ALPHA_GRID, indices=None) -> ScanResult:
    """Accuracy on alpha * density for each source kappa and their average."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    imgs, truth, ik = dataset.images[idx], dataset.labels[idx], dataset.inv_kappa[idx]
    names = {1.0: "k1", 2.0: "k2", 5.0: "k5", math.inf: "kinf"}
    per = {n: np.full(len(alphas), np.nan) for n in names.values()}
    for j, a in enumerate(alphas):
        if a <= 0:
            raise ValueError("alpha must be positive")
        pred = cn.predict_labels(params, imgs * np.float32(a))
        for k, n in names.items():
            sel = ik == inv(k)
            if sel.any():
                per[n][j] = float(np.mean(pred[sel] == truth[sel]))
    stack = np.array([per[n] for n in names.values()])
    overall = np.nanmean(stack, axis=0)
    return ScanResult("alpha", alphas, overall[None], per)


def _noise_rng(seed, j, i):
    return np.random.default_rng([int(seed), int(j), int(i)])


def noisy_densities(psi_images, sigma, mode="multiplicative", G=1.0, seed=0, j=0):
    """Noise each psi grid, then square. Field for state i is seeded by (seed, j, i)."""
    out = np.empty(psi_images.shape, dtype=np.float32)
    for i, psi in enumerate(psi_images):
        g = im.PixelGrid(psi, im.PSI, True)
        rng = _noise_rng(seed, j, i)
        if mode == "multiplicative":
            g = im.multiplicative_noise(g, sigma, rng)
        elif mode == "additive":
            g = im.additive_noise(g, sigma, G, rng)
        else:
            raise ValueError(f"unknown noise mode {mode!r}")
        out[i] = g.values * g.values
    return out


def noise_scan(params, psi_images, labels, sigmas=SIGMA_GRID, mode="multiplicative",
               G=1.0, seed=0) -> ScanResult:
    """Per-class accuracy on noisy states; ``acc_avg`` is the mean of the two classes."""
    labels = np.asarray(labels)
    per = {"integrable": np.empty(len(sigmas)), "nonintegrable": np.empty(len(sigmas))}
    for j, s in enumerate(sigmas):
        res = cn.evaluate(params, noisy_densities(psi_images, s, mode, G, seed, j), labels)
        per["integrable"][j] = np.nan if res.per_class[0] is None else res.per_class[0]
        per["nonintegrable"][j] = np.nan if res.per_class[1] is None else res.per_class[1]
    avg = np.nanmean([per["integrable"], per["nonintegrable"]], axis=0)
    return ScanResult("sigma", sigmas, avg[None], per)


def random_image_study(params, count=1000, zero_fractions=ZERO_FRACTIONS,
                       distributions=im.RANDOM_DISTRIBUTIONS, seed=0) -> dict:
    """Fraction of random density images classified non-integrable."""
    R = params.spec.input_size
    out = {}
    for zi, zf in enumerate(zero_fractions):
        for di, dist in enumerate(distributions):
            rng = np.random.default_rng([int(seed), zi, di])
            imgs = np.stack([im.random_image(R, zf, dist, rng).values for _ in range(count)])
            out[(zf, dist)] = float(np.mean(cn.predict_labels(params, imgs) == im.NON_INTEGRABLE))
    return out


def bosonic_classification(ensemble, start=50, stop=1050) -> dict:
    """Fraction of bosonic box states classified integrable, per member and band."""
    if not ensemble:
        raise ValueError("empty ensemble")
    imgs = im.bosonic_images(start, stop, ensemble[0].spec.input_size)
    fr = [float(np.mean(cn.predict_labels(p, imgs) == im.INTEGRABLE)) for p in ensemble]
    return {"per_member": fr, "mean": float(np.mean(fr)), "min": min(fr), "max": max(fr)}


# ---------------------------------------------------------------------------
# Leave-out influence
# ---------------------------------------------------------------------------


def loo_betas(dataset, singles=40, blocks=20, block_size=10, seed=0):
    """Seeded draws of singleton and block beta sets from the train split.

    A block is ``block_size`` consecutive training records of one kappa,
    consecutive in state index among training records.
    """
    rng = np.random.default_rng(seed)
    train = np.asarray(dataset.train)
    betas = [[int(i)] for i in np.sort(rng.choice(train, size=singles, replace=False))]
    ik = dataset.inv_kappa[train]
    groups = [train[ik == v] for v in np.unique(ik)]
    for _ in range(blocks):
        g = groups[rng.integers(len(groups))]
        g = g[np.argsort(dataset.state_index[g], kind="stable")]
        lo = rng.integers(0, len(g) - block_size + 1)
        betas.append([int(i) for i in g[lo:lo + block_size]])
    return betas


def pick_test_state(params, dataset, kappa=5.0, energy=None, confidence=0.99):
    """A test-split state of ``kappa`` predicted correctly with b >= confidence.

    With ``energy`` given, the qualifying state nearest in energy is returned.
    """
    test = np.asarray(dataset.test)
    cand = test[dataset.inv_kappa[test] == inv(kappa)]
    p = cn.predict_proba(params, dataset.images[cand])
    want = dataset.labels[cand]
    ok = cand[p[np.arange(len(cand)), want] >= confidence]
    if ok.size == 0:
        raise ValueError("no confidently classified test state")
    if energy is None or dataset.energies is None:
        return int(ok[0])
    return int(ok[np.argmin(np.abs(dataset.energies[ok] - energy))])


def leave_out_influence(dataset, config: cn.TrainingConfig, beta_specs, test_state: int,
                        spec: cn.ArchitectureSpec | None = None, energies=None,
                        baseline: cn.NetworkParameters | None = None, progress=None):
    """f1 - f1(-beta) on ``test_state`` for each left-out set beta.

    f1 is the integrable output neuron. Each retraining reuses ``config``
    (same seeds), so beta = {} reproduces the baseline exactly.
    """
    energies = dataset.energies if energies is None else np.asarray(energies)
    if energies is None:
        raise ValueError("left-out energies unavailable")
    train = set(int(i) for i in dataset.train)
    for beta in beta_specs:
        if not set(int(b) for b in beta) <= train:
            raise ValueError("beta must be a subset of the train split")
    if baseline is None:
        baseline, _ = cn.train(dataset, spec, config)
    x = dataset.images[test_state]
    f1 = cn.forward(baseline, x).b1
    out = []
    for k, beta in enumerate(beta_specs):
        if len(beta) == 0:
            params = baseline
            first = math.nan
        else:
            params, _ = cn.train(dataset, spec, config, exclude=np.asarray(beta))
            first = float(energies[beta[0]])
        out.append(InfluenceResult(beta, first, f1 - cn.forward(params, x).b1, test_state))
        if progress is not None:
            progress(k, out[-1])
    return out


def influence_correlation(results) -> float:
    """Spearman rank correlation of |f1 difference| against left-out energy."""
    r = [x for x in results if x.beta_size]
    rho = stats.spearmanr([x.beta_first_energy for x in r], [abs(x.f1_diff) for x in r])
    return float(rho.statistic if hasattr(rho, "statistic") else rho[0])


# ---------------------------------------------------------------------------
# Adversarial perturbation
# ---------------------------------------------------------------------------


def _renormalize(x, dA):
    return x / (x.sum(axis=(1, 2), keepdims=True) * dA)


def attack_many(params, images, target_label: int, step: float = ATTACK_STEP,
                max_iters: int = 200, L: float = sc.L_RING) -> list[AttackResult]:
    """Iterative gradient-sign descent of CE(target) on density images.

    Each step moves every pixel by ``step * max(original)`` against the sign
    of the input gradient, clamps at zero and renormalises the density.
    Images stop updating once their predicted label equals the target.
    """
    x0 = np.asarray(images, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    n, R = x0.shape[0], x0.shape[1]
    dA = (L / R) ** 2
    params64 = params.astype(np.float64)
    scale = step * x0.max(axis=(1, 2), keepdims=True)
    x = x0.copy()
    before = cn.predict_proba(params64, x0)
    done = np.zeros(n, bool)
    iters = np.full(n, max_iters)
    target = np.full(n, target_label)
    for it in range(1, max_iters + 1):
        act = np.flatnonzero(~done)
        if act.size == 0 or step == 0:
            break
        _, _, g = cn.loss_and_grads(params64, x[act], target[act], need_input=True)
        xa = np.maximum(x[act] - scale[act] * np.sign(g), 0.0)
        x[act] = _renormalize(xa, dA)
        hit = act[cn.predict_labels(params64, x[act]) == target_label]
        done[hit] = True
        iters[hit] = it
    after = cn.predict_proba(params64, x)
    peak = x0.max(axis=(1, 2))
    linf = np.abs(x - x0).max(axis=(1, 2)) / np.where(peak > 0, peak, 1.0)
    return [AttackResult(int(iters[i]), bool(done[i]), float(linf[i]),
                         cn.Prediction(*before[i]), cn.Prediction(*after[i]), x[i])
            for i in range(n)]


def adversarial_attack(params, image, target_label: int, step: float = ATTACK_STEP,
                       max_iters: int = 200) -> AttackResult:
    grid = getattr(image, "values", image)
    return attack_many(params, np.asarray(grid)[None], target_label, step, max_iters)[0]


# ---------------------------------------------------------------------------
# CSV rows
# ---------------------------------------------------------------------------


def mass_scan_rows(res: ScanResult):
    lo, hi = res.band
    return [(k, m, a, b) for k, m, a, b in zip(res.abscissa, res.accuracy, lo, hi)]


def alpha_scan_rows(res: ScanResult):
    c = res.per_class
    return [(a, o, k1, k2, k5, ki) for a, o, k1, k2, k5, ki in
            zip(res.abscissa, res.accuracy, c["k1"], c["k2"], c["k5"], c["kinf"])]


def noise_scan_rows(res: ScanResult):
    c = res.per_class
    return list(zip(res.abscissa, c["integrable"], c["nonintegrable"], res.accuracy))


def loo_rows(results):
    return [(r.beta_first_energy, r.beta_size, r.f1_diff) for r in results]


def attack_rows(state_indices, results):
    return [(int(s), r.iterations, r.success, r.linf_rel)
            for s, r in zip(state_indices, results)]


# ---------------------------------------------------------------------------
# Artifact cache
# ---------------------------------------------------------------------------


class ArtifactStore:
    """Compute-once cache of spectra, datasets and models under one directory."""

    def __init__(self, root, cutoff: int = 130, state_range=(50, 1050), R: int = 64,
                 log=None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cutoff = cutoff
        self.state_range = tuple(state_range)
        self.R = R
        self.log = log or (lambda msg: None)

    def _tag(self, kappa):
        return "inf" if math.isinf(kappa) else f"{kappa:g}"

    def spectrum(self, kappa, num_states=None, coefficients=True, parity=None):
        num_states = num_states or self.state_range[1]
        tag = f"k{self._tag(kappa)}_c{self.cutoff}_n{num_states}"
        tag += f"_p{parity:+d}" if parity else ""
        tag += "" if coefficients else "_e"
        path = self.root / f"{tag}.qbs"
        if path.exists():
            return formats.read_spectrum(path)
        self.log(f"solving kappa={kappa} c={self.cutoff} states={num_states}")
        sol = sc.solve_spectrum(sc.MassRatio.from_kappa(kappa), self.cutoff, num_states,
                                coefficients, parity)
        formats.write_spectrum(path, sol)
        return sol

    def images(self, kappa, kind=im.DENSITY):
        path = self.root / f"img_{kind}_k{self._tag(kappa)}_c{self.cutoff}_R{self.R}.npy"
        if path.exists():
            return np.load(path)
        a, b = self.state_range
        sol = self.spectrum(kappa)
        arr = im.rasterize_many(sol, np.arange(a, b), self.R, kind)
        arr = arr.astype(np.float32) if kind == im.DENSITY else arr
        np.save(path, arr)
        return arr

    def dataset(self, split_seed=0):
        path = self.root / f"dataset_c{self.cutoff}_R{self.R}_s{split_seed}.qbd"
        epath = path.with_suffix(".energies.npy")
        if path.exists() and epath.exists():
            ds = formats.read_dataset(path)
            ds.energies = np.load(epath)
            return ds
        sols = [self.spectrum(k) for k in DATASET_KAPPAS]
        ds = im.build_dataset(sols, self.state_range, self.R, im.DENSITY, split_seed)
        formats.write_dataset(path, ds)
        np.save(epath, ds.energies)
        return ds

    def psi_images(self, dataset):
        """float64 psi grids aligned with the dataset records."""
        out = np.empty(dataset.images.shape)
        a = self.state_range[0]
        for k in DATASET_KAPPAS:
            sel = np.flatnonzero(dataset.inv_kappa == inv(k))
            out[sel] = self.images(k, im.PSI)[dataset.state_index[sel] - a]
        return out

    def model(self, dataset, config: cn.TrainingConfig, spec=None, name=None):
        name = name or f"model_i{config.init_seed}_s{config.shuffle_seed}_e{config.epochs}"
        path = self.root / f"{name}.qbn"
        if path.exists():
            return cn.load_model(path, dataset.resolution)
        self.log(f"training {name}")
        params, hist = cn.train(dataset, spec, config)
        cn.save_model(params, path)
        formats.write_sidecar(path, {"training": vars(config)},
                              test_accuracy=hist.test_accuracy, loss=hist.loss)
        return params
