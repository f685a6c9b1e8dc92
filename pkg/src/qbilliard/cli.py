"""qbilliard command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import convnet as cn
from . import experiments as ex
from . import formats as fm
from . import imaging as im
from . import spectral_core as sc
from . import spectral_stats as ss

log = logging.getLogger("qbilliard")


class StageError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"{stage}: {msg}")
        self.stage = stage


def _inv_kappa(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"inv-kappa must lie in [0, 1], got {v}")
    return v


def _parity(text):
    v = int(text)
    if v not in (-1, 1):
        raise argparse.ArgumentTypeError("parity must be +1 or -1")
    return v


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _spec(cfg: cfgmod.RunConfig) -> cn.ArchitectureSpec:
    return cn.ArchitectureSpec(
        input_size=cfg.resolution, conv1_filters=cfg.conv1_filters,
        conv1_kernel=cfg.conv1_kernel, conv1_padding=cfg.padding,
        conv2_filters=cfg.conv2_filters, conv2_kernel=cfg.conv2_kernel,
        conv2_padding=cfg.padding, dense_width=cfg.dense_width)


def _training(cfg: cfgmod.RunConfig, **kw) -> cn.TrainingConfig:
    base = dict(optimizer=cfg.optimizer, learning_rate=cfg.learning_rate,
                batch_size=cfg.batch_size, epochs=cfg.epochs, init_seed=cfg.init_seed,
                shuffle_seed=cfg.shuffle_seed)
    base.update(kw)
    return cn.TrainingConfig(**base)


def _load_dataset(path):
    ds = fm.read_dataset(path)
    meta = fm.read_sidecar(path) or {}
    if "energies" in meta:
        ds.energies = np.asarray(meta["energies"], dtype=np.float64)
    return ds


def _check_chain(model_path, dataset_path, stage):
    """The model must have been trained on exactly this dataset file."""
    meta = fm.read_sidecar(model_path)
    if not meta or "dataset_sha256" not in meta:
        return
    have = fm.file_digest(dataset_path)
    if meta["dataset_sha256"] != have:
        raise StageError(stage, f"digest mismatch: {model_path} was trained on a different "
                                f"dataset than {dataset_path}")


def _load_models(paths, resolution=None):
    return [cn.load_model(p, resolution) for p in paths]


def _rows_note(path, n):
    print(f"wrote {path} ({n} rows)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_diagonalize(args, cfg):
    m = sc.MassRatio(args.inv_kappa)
    c = args.cutoff or cfg.cutoff
    try:
        sol = sc.solve_spectrum(m, c, args.num_states, args.coefficients, args.parity)
    except (sc.SolverError, np.linalg.LinAlgError, ValueError) as exc:
        raise StageError("diagonalize", str(exc)) from exc
    fm.write_spectrum(args.out, sol)
    fm.write_sidecar(args.out, {"inv_kappa": m.inv_kappa, "cutoff": c,
                                "num_states": args.num_states, "parity": args.parity,
                                "coefficients": args.coefficients})
    path = "diagonal" if m.inv_kappa == 0 else "dense"
    print(f"{len(sol)} levels (cutoff {c}, 1/kappa={m.inv_kappa:g}, {path} path) -> {args.out}")
    if m.inv_kappa == 1.0 and args.parity is None:
        bethe = sc.bethe_energies(len(sol))
        res = sc.benchmark_accuracy(sol.energies, bethe)
        print(f"bethe benchmark: {res.below_1e4} levels with eps<1e-4, "
              f"{res.below_1e3} with eps<1e-3 (of {len(sol)})")
    return 0


def _spectrum_levels(path, parity):
    sol = fm.read_spectrum(path, with_coefficients=False)
    if parity is not None and sol.parity_block == 0:
        sol = sol.select(parity)
    return sol


def cmd_stats_spacing(args, cfg):
    sol = _spectrum_levels(args.spectrum, args.parity)
    levels = sol.energies[:args.levels] if args.levels else sol.energies
    u = ss.unfold(levels, sol.parity_block, sol.inv_kappa)
    h = ss.spacing_histogram(u, args.bins, args.s_max)
    cols = list(fm.HISTOGRAM_COLUMNS)
    rows = [[a, b, d] for a, b, d in zip(h.edges[:-1], h.edges[1:], h.densities)]
    if args.reference:
        cols += ["p_goe", "p_poisson"]
        mid = h.centers
        for r, g, p in zip(rows, ss.wigner_goe(mid), ss.poisson(mid)):
            r += [g, p]
    fm.write_csv(args.out, cols, rows)
    ks_g = ss.ks_distance(u.spacings, ss.goe_cdf)
    ks_p = ss.ks_distance(u.spacings, ss.poisson_cdf)
    print(f"{u.spacings.size} spacings; KS to GOE {ks_g:.4f}, KS to Poisson {ks_p:.4f}")
    _rows_note(args.out, len(rows))
    return 0


def cmd_stats_deltamin(args, cfg):
    spectra = [_spectrum_levels(p, args.parity) for p in args.spectra]
    n_max = args.n_max or min(len(s) for s in spectra)
    grid = np.arange(args.n_min, n_max + 1)
    curve = ss.delta_min_average(spectra, grid)
    fm.write_csv(args.out, fm.DELTA_MIN_COLUMNS, [(int(n), v) for n, v in zip(grid, curve)])
    a, b = ss.fit_power_law(grid, curve)
    print(f"fit: delta_min = {a:.4g} * N^{b:.4f} over N in [{args.n_min}, {n_max}] "
          f"({len(spectra)} spectra)")
    _rows_note(args.out, len(grid))
    return 0


def cmd_stats_amplitude(args, cfg):
    sol = fm.read_spectrum(args.spectrum)
    if sol.coefficients is None:
        raise StageError("stats amplitude", "spectrum file carries no coefficients")
    grid = im.rasterize(sol, args.state, args.resolution, im.PSI)
    edges, _, dens = im.amplitude_histogram(grid, args.bins)
    mid = 0.5 * (edges[1:] + edges[:-1])
    # |psi| density of a centred Gaussian is twice the Gaussian density
    ref = 2 * im.gaussian_prediction(mid, grid.L)
    rows = [(a, b, d, r) for a, b, d, r in zip(edges[:-1], edges[1:], dens, ref)]
    fm.write_csv(args.out, list(fm.HISTOGRAM_COLUMNS) + ["gaussian"], rows)
    print(f"state {args.state} at R={args.resolution}: KS to Gaussian {im.amplitude_ks(grid):.4f}")
    _rows_note(args.out, len(rows))
    return 0


def cmd_dataset_build(args, cfg):
    sols = [fm.read_spectrum(p) for p in args.spectra]
    for p, s in zip(args.spectra, sols):
        if s.coefficients is None:
            raise StageError("dataset build", f"{p} carries no coefficients")
    try:
        ds = im.build_dataset(sols, (cfg.state_start, cfg.state_stop), cfg.resolution,
                              cfg.kind, cfg.split_seed)
    except ValueError as exc:
        raise StageError("dataset build", str(exc)) from exc
    fm.write_dataset(args.out, ds)
    conf = cfg.subset("state_start", "state_stop", "resolution", "kind", "split_seed")
    conf["spectra"] = [fm.file_digest(p) for p in args.spectra]
    fm.write_sidecar(args.out, conf, energies=ds.energies.tolist())
    if args.pgm_dir:
        for i in np.linspace(0, len(ds) - 1, args.pgm_count).astype(int):
            fm.write_pgm(Path(args.pgm_dir) / f"record_{i:05d}.pgm", ds.images[i])
    print(f"{len(ds)} records (train {len(ds.train)}, test {len(ds.test)}, "
          f"integrable {(ds.labels == im.INTEGRABLE).sum()}) -> {args.out}")
    return 0


def cmd_train(args, cfg):
    ds = _load_dataset(args.dataset)
    spec = _spec(cfg)
    tc = _training(cfg)

    def progress(e, h):
        log.info("epoch %d loss %.5f train %.4f test %.4f", e, h.loss[-1],
                 h.train_accuracy[-1], h.test_accuracy[-1] if h.test_accuracy else math.nan)

    try:
        params, hist = cn.train(ds, spec, tc, progress=progress)
    except cn.TrainingDiverged as exc:
        raise StageError("train", f"diverged: {exc}") from exc
    cn.save_model(params, args.out)
    conf = {"spec": cn.spec_dict(spec), "training": vars(tc)}
    fm.write_sidecar(args.out, conf, dataset_sha256=fm.file_digest(args.dataset),
                     loss=hist.loss, train_accuracy=hist.train_accuracy,
                     test_accuracy=hist.test_accuracy)
    acc = hist.test_accuracy[-1] if hist.test_accuracy else math.nan
    print(f"trained {tc.epochs} epochs; final test accuracy {acc:.4f} -> {args.out}")
    return 0


def cmd_eval(args, cfg):
    ds = _load_dataset(args.dataset)
    if args.split != "all":
        _check_chain(args.model, args.dataset, "eval")
    params = cn.load_model(args.model, ds.resolution)
    idx = {"test": ds.test, "train": ds.train, "all": np.arange(len(ds))}[args.split]
    r = cn.evaluate(params, ds.images[idx], ds.labels[idx])
    fmt = lambda v: "absent" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"accuracy {r.accuracy:.4f} on {len(idx)} {args.split} records; "
          f"integrable {fmt(r.per_class[0])}, non-integrable {fmt(r.per_class[1])}")
    print(f"confusion [true x predicted]: {r.confusion.tolist()}")
    return 0


def cmd_exp_mass(args, cfg):
    models = _load_models(args.models, cfg.resolution)
    images = {}
    for p in args.spectra:
        sol = fm.read_spectrum(p)
        if sol.coefficients is None or len(sol) < cfg.state_stop:
            raise StageError("experiment mass", f"{p}: needs coefficients for "
                                                f"{cfg.state_stop} states")
        states = np.arange(cfg.state_start, cfg.state_stop)
        images[ex.kappa_of(sol.inv_kappa)] = im.rasterize_many(sol, states, cfg.resolution)
    res = ex.mass_scan(models, images)
    fm.write_csv(args.out, fm.MASS_SCAN_COLUMNS, ex.mass_scan_rows(res))
    _rows_note(args.out, res.abscissa.size)
    return 0


def cmd_exp_alpha(args, cfg):
    ds = _load_dataset(args.dataset)
    params = cn.load_model(args.model, ds.resolution)
    res = ex.alpha_scan(params, ds, cfg.alphas)
    fm.write_csv(args.out, fm.ALPHA_SCAN_COLUMNS, ex.alpha_scan_rows(res))
    best = res.abscissa[int(np.argmax(res.accuracy))]
    print(f"maximum overall accuracy at alpha={best:g}")
    _rows_note(args.out, res.abscissa.size)
    return 0


def _psi_for_dataset(ds, spectra):
    sols = {s.inv_kappa: s for s in (fm.read_spectrum(p) for p in spectra)}
    out = np.empty(ds.images.shape)
    for ik in np.unique(ds.inv_kappa):
        if ik not in sols or sols[ik].coefficients is None:
            raise StageError("experiment noise", f"no spectrum with coefficients for 1/kappa={ik}")
        sel = np.flatnonzero(ds.inv_kappa == ik)
        out[sel] = im.rasterize_many(sols[ik], ds.state_index[sel], ds.resolution, im.PSI)
    return out


def cmd_exp_noise(args, cfg):
    ds = _load_dataset(args.dataset)
    params = cn.load_model(args.model, ds.resolution)
    psi = _psi_for_dataset(ds, args.spectra)
    res = ex.noise_scan(params, psi, ds.labels, cfg.sigmas, cfg.noise_mode, cfg.noise_G,
                        cfg.noise_seed)
    fm.write_csv(args.out, fm.NOISE_SCAN_COLUMNS, ex.noise_scan_rows(res))
    _rows_note(args.out, res.abscissa.size)
    return 0


def cmd_exp_random(args, cfg):
    params = cn.load_model(args.model)
    res = ex.random_image_study(params, cfg.random_count, cfg.zero_fractions,
                                cfg.distributions, cfg.random_seed)
    rows = [(zf, d, v) for (zf, d), v in res.items()]
    fm.write_csv(args.out, ("zero_fraction", "distribution", "frac_nonintegrable"), rows)
    _rows_note(args.out, len(rows))
    return 0


def cmd_exp_bosonic(args, cfg):
    models = _load_models(args.models)
    res = ex.bosonic_classification(models, cfg.state_start, cfg.state_stop)
    rows = [(p, v) for p, v in zip(args.models, res["per_member"])]
    fm.write_csv(args.out, ("model", "frac_integrable"), rows)
    print(f"integrable fraction mean {res['mean']:.4f} [{res['min']:.4f}, {res['max']:.4f}]")
    return 0


def cmd_exp_loo(args, cfg):
    ds = _load_dataset(args.dataset)
    if ds.energies is None:
        raise StageError("experiment loo", "dataset sidecar with energies is missing")
    spec = _spec(cfg)
    tc = _training(cfg, epochs=cfg.loo_epochs)
    baseline, _ = cn.train(ds, spec, tc)
    test = args.test_state
    if test is None:
        test = ex.pick_test_state(baseline, ds, cfg.loo_test_kappa, cfg.loo_test_energy)
    betas = [[]] + ex.loo_betas(ds, cfg.loo_singles, cfg.loo_blocks, cfg.loo_block_size,
                                cfg.loo_seed)
    log.info("test state %d (E=%.4f), %d beta sets", test, ds.energies[test], len(betas))
    res = ex.leave_out_influence(ds, tc, betas, test, spec, baseline=baseline,
                                 progress=lambda k, r: log.info("beta %d: %r", k, r))
    fm.write_csv(args.out, fm.LOO_COLUMNS, ex.loo_rows(res))
    print(f"rank correlation |diff| vs energy: {ex.influence_correlation(res):.4f}")
    _rows_note(args.out, len(res))
    return 0


def cmd_exp_attack(args, cfg):
    ds = _load_dataset(args.dataset)
    params = cn.load_model(args.model, ds.resolution)
    src, target = ((im.INTEGRABLE, im.NON_INTEGRABLE) if args.direction == "to-nonintegrable"
                   else (im.NON_INTEGRABLE, im.INTEGRABLE))
    test = np.asarray(ds.test)
    cand = test[ds.labels[test] == src]
    cand = cand[cn.predict_labels(params, ds.images[cand]) == src]
    if args.limit:
        cand = cand[:args.limit]
    res = ex.attack_many(params, ds.images[cand], target, cfg.attack_step, cfg.attack_iters)
    fm.write_csv(args.out, fm.ATTACK_COLUMNS, ex.attack_rows(ds.state_index[cand], res))
    ok = np.mean([r.success for r in res]) if res else math.nan
    print(f"{len(res)} states attacked, success rate {ok:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qbilliard", description=__doc__)
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diagonalize", help="solve one mass ratio and write a QBS1 file")
    p.add_argument("--inv-kappa", type=_inv_kappa, required=True)
    p.add_argument("--cutoff", type=int)
    p.add_argument("--num-states", type=int)
    p.add_argument("--parity", type=_parity)
    p.add_argument("--coefficients", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagonalize)

    st = sub.add_parser("stats", help="level and amplitude statistics").add_subparsers(
        dest="stat", required=True)
    p = st.add_parser("spacing")
    p.add_argument("--spectrum", required=True)
    p.add_argument("--parity", type=_parity, default=1)
    p.add_argument("--levels", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--s-max", type=float, default=4.0)
    p.add_argument("--reference", action="store_true", help="add GOE/Poisson columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats_spacing)
    p = st.add_parser("deltamin")
    p.add_argument("--spectra", nargs="+", required=True)
    p.add_argument("--parity", type=_parity, default=1)
    p.add_argument("--n-min", type=int, default=100)
    p.add_argument("--n-max", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats_deltamin)
    p = st.add_parser("amplitude")
    p.add_argument("--spectrum", required=True)
    p.add_argument("--state", type=int, default=500)
    p.add_argument("--resolution", type=int, default=315)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats_amplitude)

    ds = sub.add_parser("dataset", help="rasterise spectra into a QBD1 dataset").add_subparsers(dest="dataset_cmd", required=True)
    p = ds.add_parser("build")
    p.add_argument("--spectra", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm-dir")
    p.add_argument("--pgm-count", type=int, default=8)
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("train", help="train the classifier and write a QBN1 model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    xp = sub.add_parser("experiment", help="robustness and interpretability studies").add_subparsers(dest="experiment", required=True)
    p = xp.add_parser("mass")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--spectra", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_mass)
    p = xp.add_parser("alpha")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_alpha)
    p = xp.add_parser("noise")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--spectra", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_noise)
    p = xp.add_parser("random")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_random)
    p = xp.add_parser("bosonic")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_bosonic)
    p = xp.add_parser("loo")
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-state", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_loo)
    p = xp.add_parser("attack")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--direction", choices=("to-nonintegrable", "to-integrable"),
                   default="to-nonintegrable")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_exp_attack)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        overrides = dict(kv.split("=", 1) for kv in args.set)
    except ValueError:
        ap.error("--set expects KEY=VALUE")
    try:
        cfg = cfgmod.resolve(args.preset, args.config, overrides)
    except (cfgmod.ConfigError, OSError) as exc:
        ap.error(str(exc))
    log.info("resolved config (digest %s):\n%s", fm.config_digest(cfg.as_dict()),
             cfgmod.dump(cfg))
    try:
        return args.func(args, cfg)
    except StageError as exc:
        print(f"error in {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, fm.FormatError, cn.ModelFormatError, RuntimeError) as exc:
        stage = " ".join(str(getattr(args, k)) for k in
                         ("command", "stat", "dataset_cmd", "experiment")
                         if getattr(args, k, None))
        print(f"error in {stage}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
