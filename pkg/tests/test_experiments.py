import math

import numpy as np
import pytest

from qbilliard import convnet as cn
from qbilliard import experiments as ex
from qbilliard import imaging as im
from qbilliard import spectral_core as sc

R = 12
SPEC = cn.ArchitectureSpec(input_size=R, conv1_filters=4, conv2_filters=4, dense_width=8)
CFG = cn.TrainingConfig(epochs=3, batch_size=16, learning_rate=3e-3)


@pytest.fixture(scope="module")
def world():
    sols = {k: sc.solve_spectrum(sc.MassRatio.from_kappa(k), 24, num_states=45)
            for k in ex.DATASET_KAPPAS}
    with pytest.warns(UserWarning):
        ds = im.build_dataset(list(sols.values()), (5, 45), R, split_seed=1)
    params, _ = cn.train(ds, SPEC, CFG)
    psi = np.empty(ds.images.shape)
    for k, s in sols.items():
        sel = np.flatnonzero(ds.inv_kappa == ex.inv(k))
        psi[sel] = im.rasterize_many(s, ds.state_index[sel], R, im.PSI)
    return sols, ds, params, psi


def test_scan_result_invariants():
    r = ex.ScanResult("x", [1, 2], [[0.5, 1.0], [0.7, 0.9]])
    lo, hi = r.band
    assert np.all(lo <= r.accuracy) and np.all(r.accuracy <= hi)
    assert r.at(2) == pytest.approx(0.95)
    with pytest.raises(ValueError):
        ex.ScanResult("x", [1], [[1.5]])
    with pytest.raises(ValueError):
        ex.ScanResult("x", [1, 2], [[1.0]])


def test_mass_scan_truth_labels(world):
    sols, ds, params, _ = world
    imgs = {k: ds.images[ds.inv_kappa == ex.inv(k)] for k in (2.0, 1.0, math.inf)}
    res = ex.mass_scan([params, params], imgs)
    assert res.abscissa.tolist() == [1.0, 2.0, math.inf]
    for j, k in enumerate(res.abscissa):
        sel = ds.inv_kappa == ex.inv(k)
        want = cn.evaluate(params, ds.images[sel], ds.labels[sel]).accuracy
        assert res.per_member[0, j] == res.per_member[1, j] == want


def test_alpha_scan_at_one_matches_evaluate(world):
    _, ds, params, _ = world
    res = ex.alpha_scan(params, ds, (0.5, 1.0))
    per = [cn.evaluate(params, ds.images[ds.inv_kappa == ex.inv(k)],
                       ds.labels[ds.inv_kappa == ex.inv(k)]).accuracy for k in ex.DATASET_KAPPAS]
    assert res.per_class["k1"][1] == per[0] and res.per_class["kinf"][1] == per[3]
    assert res.at(1.0) == pytest.approx(np.mean(per))
    rows = ex.alpha_scan_rows(res)
    assert len(rows) == 2 and rows[1][0] == 1.0


def test_noise_scan_zero_sigma_reproduces_evaluate(world):
    _, ds, params, psi = world
    np.testing.assert_array_equal(ex.noisy_densities(psi, 0.0), ds.images)
    res = ex.noise_scan(params, psi, ds.labels, (0.0, 0.5))
    clean = cn.evaluate(params, ds.images, ds.labels)
    assert res.per_class["integrable"][0] == clean.per_class[0]
    assert res.per_class["nonintegrable"][0] == clean.per_class[1]
    again = ex.noise_scan(params, psi, ds.labels, (0.0, 0.5))
    assert np.array_equal(res.per_member, again.per_member)
    with pytest.raises(ValueError):
        ex.noisy_densities(psi[:2], 0.1, mode="cosmic")


def test_noisy_densities_keep_normalisation(world):
    _, ds, _, psi = world
    for mode in ("multiplicative", "additive"):
        d = ex.noisy_densities(psi[:5], 0.7, mode, G=3.0)
        np.testing.assert_allclose(d.sum(axis=(1, 2)) * (math.pi / R) ** 2, 1, rtol=1e-5)


def test_random_and_bosonic_reports(world):
    _, _, params, _ = world
    rep = ex.random_image_study(params, count=10, distributions=("gaussian", "uniform"))
    assert set(rep) == {(0.0, "gaussian"), (0.0, "uniform"), (0.35, "gaussian"),
                        (0.35, "uniform")}
    assert all(0 <= v <= 1 for v in rep.values())
    assert rep == ex.random_image_study(params, count=10, distributions=("gaussian", "uniform"))
    b = ex.bosonic_classification([params, params], 0, 20)
    assert b["min"] <= b["mean"] <= b["max"] and len(b["per_member"]) == 2


def test_loo_betas_are_training_subsets(world):
    _, ds, _, _ = world
    betas = ex.loo_betas(ds, singles=5, blocks=3, block_size=4, seed=2)
    train = set(ds.train.tolist())
    assert len(betas) == 8 and all(len(b) == 1 for b in betas[:5])
    for b in betas[5:]:
        assert len(b) == 4 and set(b) <= train
        assert len(set(ds.inv_kappa[b])) == 1
        assert np.all(np.diff(ds.state_index[b].astype(int)) > 0)
    assert betas == ex.loo_betas(ds, singles=5, blocks=3, block_size=4, seed=2)


def test_leave_out_influence(world):
    _, ds, params, _ = world
    cfg = cn.TrainingConfig(epochs=1, batch_size=16)
    test_state = int(ds.test[0])
    betas = [[], [int(ds.train[0])], [int(i) for i in ds.train[1:4]]]
    res = ex.leave_out_influence(ds, cfg, betas, test_state, SPEC)
    assert res[0].f1_diff == 0.0 and res[0].beta_size == 0
    assert res[2].beta_size == 3
    assert res[1].beta_first_energy == ds.energies[ds.train[0]]
    assert all(-1 <= r.f1_diff <= 1 for r in res)
    with pytest.raises(ValueError):
        ex.leave_out_influence(ds, cfg, [[int(ds.test[1])]], test_state, SPEC)


def test_influence_correlation():
    mk = lambda e, d: ex.InfluenceResult([0], e, d, 0)  # noqa: E731
    assert ex.influence_correlation([mk(e, 0.01 * e) for e in range(1, 9)]) == pytest.approx(1)
    with pytest.raises(ValueError):
        mk(1.0, 1.5)


def test_attack_zero_step_changes_nothing(world):
    _, ds, params, _ = world
    x = ds.images[ds.test[0]]
    r = ex.adversarial_attack(params, x, 1 - int(cn.predict_labels(params, x[None])[0]),
                              step=0.0, max_iters=7)
    assert not r.success and r.iterations == 7 and r.linf_rel == 0.0
    assert np.array_equal(r.image, x.astype(np.float64))


def test_attack_moves_towards_target(world):
    _, ds, params, _ = world
    idx = ds.test[ds.labels[ds.test] == im.INTEGRABLE][:4]
    res = ex.attack_many(params, ds.images[idx], im.NON_INTEGRABLE, step=1e-2, max_iters=60)
    for r in res:
        assert r.linf_rel >= 0 and r.image.min() >= 0
        assert r.image.sum() * (math.pi / R) ** 2 == pytest.approx(1.0)
        if r.success:
            assert r.after.b2 >= r.after.b1
        assert r.after.b2 >= r.before.b2 - 1e-12 or not r.success
    rows = ex.attack_rows(ds.state_index[idx], res)
    assert [len(x) for x in rows] == [4] * 4
