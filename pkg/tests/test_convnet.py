import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbilliard import convnet as cn
from qbilliard import imaging as im
from qbilliard import kernels

TOY = cn.ArchitectureSpec(input_size=8, conv1_filters=3, conv2_filters=4, dense_width=6)
STEP = 1e-5


def _toy_params(seed=1):
    p = cn.init_params(TOY, seed, np.float64)
    rng = np.random.default_rng(seed + 100)
    # nonzero biases keep most units away from the ReLU kink
    for k in p.tensors:
        if k.endswith("_b"):
            p.tensors[k] += 0.1 * rng.standard_normal(p[k].shape)
    return p


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def test_parameter_gradients_match_central_differences():
    p = _toy_params()
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8))
    y = np.array([0, 1, 1])
    _, g, _ = cn.loss_and_grads(p, x, y)
    worst = 0.0
    for name, v in p.tensors.items():
        flat = v.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + STEP
            lp = cn.loss_and_grads(p, x, y)[0]
            flat[i] = old - STEP
            lm = cn.loss_and_grads(p, x, y)[0]
            flat[i] = old
            worst = max(worst, _rel((lp - lm) / (2 * STEP), g[name].reshape(-1)[i]))
    assert worst < 1e-4


def test_input_gradient_matches_central_differences():
    p = _toy_params(2)
    rng = np.random.default_rng(3)
    x = rng.random((8, 8))
    d = cn.input_gradient(p, x, 1)
    assert d.shape == (8, 8)
    for flat_i in rng.choice(64, size=20, replace=False):
        i, j = divmod(int(flat_i), 8)
        old = x[i, j]
        x[i, j] = old + STEP
        lp = cn.loss_and_grads(p, x[None], [1])[0]
        x[i, j] = old - STEP
        lm = cn.loss_and_grads(p, x[None], [1])[0]
        x[i, j] = old
        assert _rel((lp - lm) / (2 * STEP), d[i, j]) < 1e-4


def test_valid_padding_gradients():
    spec = cn.ArchitectureSpec(input_size=12, conv1_filters=2, conv1_padding="valid",
                               conv2_filters=2, conv2_padding="valid", dense_width=3)
    p = cn.init_params(spec, 5, np.float64)
    x = np.random.default_rng(1).random((2, 12, 12))
    _, g, _ = cn.loss_and_grads(p, x, [1, 0])
    w = p["conv1_w"].reshape(-1)
    for i in range(w.size):
        old = w[i]
        w[i] = old + STEP
        lp = cn.loss_and_grads(p, x, [1, 0])[0]
        w[i] = old - STEP
        lm = cn.loss_and_grads(p, x, [1, 0])[0]
        w[i] = old
        assert _rel((lp - lm) / (2 * STEP), g["conv1_w"].reshape(-1)[i]) < 1e-4


def test_output_bias_gradient_closed_form():
    p = _toy_params()
    x = np.random.default_rng(4).random((8, 8))
    b = cn.forward(p, x)
    g = cn.backward(p, x, 0)
    np.testing.assert_allclose(g["dense2_b"], [b.b1 - 1.0, b.b2], atol=1e-14)


def test_zero_network():
    p = cn.NetworkParameters.zeros(cn.ArchitectureSpec(), np.float32)
    zero = np.zeros((64, 64), np.float32)
    assert cn.forward(p, zero) == (0.5, 0.5)
    g = cn.backward(p, zero, 1)
    assert not np.any(g["conv1_w"]) and not np.any(g["conv2_w"])
    # dead path: with zero dense weights no signal reaches the input
    assert not np.any(cn.input_gradient(p, np.ones((64, 64)), 0))
    # tie b1 == b2 counts as non-integrable
    assert cn.predict_labels(p, zero[None])[0] == im.NON_INTEGRABLE


def test_linearity_at_zero_weights():
    # zero conv weights: only dense2 sees the (input-independent) activations
    p = _toy_params()
    for k in ("conv1_w", "conv2_w", "dense1_w"):
        p.tensors[k][:] = 0
    x1, x2 = np.random.default_rng(0).random((2, 8, 8))
    assert cn.forward(p, x1) == cn.forward(p, x2)
    assert not np.any(cn.input_gradient(p, x1, 0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_softmax_sums_to_one(seed, scale):
    p = _toy_params(seed % 50)
    x = np.random.default_rng(seed).random((4, 8, 8)) * scale
    prob = cn.predict_proba(p, x)
    assert np.all(np.isfinite(prob))
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-12)


def test_pooling_halves_each_dimension():
    assert cn.ArchitectureSpec().sizes == (64, 32, 32, 16)
    assert cn.ArchitectureSpec().flat_size == 16 * 16 * 32
    x = np.random.default_rng(0).random((2, 10, 10, 3))
    out, arg = kernels.maxpool2(x)
    assert out.shape == (2, 5, 5, 3)


def test_maxpool_tie_goes_to_first_index():
    x = np.ones((1, 2, 2, 1))
    out, arg = kernels.maxpool2(x)
    back = kernels.maxpool2_backward(np.ones((1, 1, 1, 1)), arg, 2, 2)
    assert back[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_shape_errors():
    p = cn.init_params(TOY, 0)
    with pytest.raises(cn.ShapeError):
        cn.forward(p, np.zeros((9, 9)))
    with pytest.raises(cn.ShapeError):
        cn.NetworkParameters(TOY, {"conv1_w": np.zeros((3, 3, 1, 3))})
    with pytest.raises(ValueError):
        cn.ArchitectureSpec(conv1_padding="full")


def test_evaluate_contract():
    p = cn.NetworkParameters.zeros(TOY)
    x = np.zeros((4, 8, 8))
    # zero net predicts non-integrable for everything
    r = cn.evaluate(p, x, [1, 1, 1, 1])
    assert r.accuracy == 1.0 and r.per_class == {0: None, 1: 1.0}
    r = cn.evaluate(p, x, [0, 1, 0, 1])
    assert r.accuracy == 0.5 and r.per_class[0] == 0.0
    assert r.confusion.tolist() == [[0, 2], [0, 2]]


def _toy_dataset(n=120, seed=0):
    # integrable class: one bright pixel per row; non-integrable: diffuse noise
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, 8, 8), np.float32)
    labels = np.arange(n) % 2
    for i in range(n):
        if labels[i] == 0:
            imgs[i] = 0
            imgs[i, np.arange(8), rng.integers(0, 8, 8)] = 1
        else:
            imgs[i] = rng.random((8, 8))
    tr, te = im.split_indices(n, seed)
    return im.Dataset(imgs, labels.astype(np.uint8), np.where(labels, 0.5, 1.0),
                      np.arange(n, dtype=np.uint32), tr, te, seed)


def test_training_learns_and_is_deterministic():
    ds = _toy_dataset()
    cfg = cn.TrainingConfig(learning_rate=1e-2, epochs=15, batch_size=16, init_seed=3,
                            shuffle_seed=4)
    p1, h1 = cn.train(ds, TOY, cfg)
    p2, h2 = cn.train(ds, TOY, cfg)
    for k in cn.PARAM_NAMES:
        assert np.array_equal(p1[k], p2[k])
    assert h1.loss == h2.loss
    assert h1.test_accuracy[-1] == 1.0
    assert h1.loss[-1] < h1.loss[0]
    p3, _ = cn.train(ds, TOY, cn.TrainingConfig(learning_rate=1e-2, epochs=15, batch_size=16,
                                                init_seed=3, shuffle_seed=5))
    assert not np.array_equal(p1["dense2_w"], p3["dense2_w"])


def test_small_rate_first_epoch_loss_non_increasing():
    ds = _toy_dataset()
    cfg = cn.TrainingConfig(optimizer="sgd", learning_rate=1e-4, epochs=1, batch_size=len(ds))
    # full-batch steps on a fixed batch: loss on that batch must not go up
    p = cn.init_params(TOY, cfg.init_seed)
    x, y = ds.images[ds.train], ds.labels[ds.train]
    losses = []
    for _ in range(5):
        loss, g, _ = cn.loss_and_grads(p, x, y)
        losses.append(loss)
        for k in g:
            p.tensors[k] -= (1e-4 * g[k]).astype(np.float32)
    assert all(b <= a + 1e-7 for a, b in zip(losses, losses[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_errors():
    ds = _toy_dataset()
    with pytest.raises(ValueError):
        cn.train(ds, TOY, cn.TrainingConfig(epochs=1), exclude=ds.train)
    with pytest.raises(cn.TrainingDiverged):
        cn.train(ds, TOY, cn.TrainingConfig(optimizer="sgd", learning_rate=1e30, epochs=3))
    with pytest.raises(ValueError):
        cn.TrainingConfig(batch_size=0)


def test_model_round_trip(tmp_path):
    p = _toy_params().astype(np.float32)
    path = tmp_path / "m.qbn"
    cn.save_model(p, path)
    q = cn.load_model(path)
    assert q.spec == TOY
    x = np.random.default_rng(0).random((5, 8, 8)).astype(np.float32)
    assert np.array_equal(cn.predict_proba(p, x), cn.predict_proba(q, x))
    data = path.read_bytes()
    assert data[:4] == b"QBN1"
    assert cn.model_bytes(q) == data


def test_model_file_errors(tmp_path):
    p = _toy_params().astype(np.float32)
    data = cn.model_bytes(p)
    with pytest.raises(cn.ModelFormatError):
        cn.parse_model(data[:-10])
    bad = bytearray(data)
    bad[40] ^= 1
    with pytest.raises(cn.ModelFormatError):
        cn.parse_model(bytes(bad))
    with pytest.raises(cn.ModelFormatError):
        cn.parse_model(b"XXXX" + data[4:])
    path = tmp_path / "m.qbn"
    path.write_bytes(data)
    with pytest.raises(cn.ShapeError):
        cn.load_model(path, expect_resolution=33)
