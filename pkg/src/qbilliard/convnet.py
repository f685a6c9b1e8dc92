"""A small convolutional classifier written directly in numpy.

Topology is fixed: conv -> ReLU -> 2x2 max-pool -> conv -> ReLU -> 2x2
max-pool -> dense -> ReLU -> dense -> softmax over two classes (index 0 =
integrable, index 1 = non-integrable). Tensors are NHWC. Training runs in
float32; every routine also accepts float64 parameters, which is what the
finite-difference checks use.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Input or parameter shapes do not match the architecture."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite during training."""


class ModelFormatError(ValueError):
    """A model file is truncated, corrupt or of an unknown version."""


@dataclass(frozen=True)
class ArchitectureSpec:
    input_size: int = 64
    conv1_filters: int = 16
    conv1_kernel: int = 3
    conv1_padding: str = "same"
    conv2_filters: int = 32
    conv2_kernel: int = 3
    conv2_padding: str = "same"
    dense_width: int = 128
    outputs: int = 2

    def __post_init__(self):
        for pad in (self.conv1_padding, self.conv2_padding):
            if pad not in ("same", "valid"):
                raise ValueError(f"padding must be 'same' or 'valid', got {pad!r}")
        for k in (self.conv1_kernel, self.conv2_kernel):
            if k % 2 == 0:
                raise ValueError("kernel sizes must be odd")
        if self.flat_size <= 0:
            raise ValueError("input too small for this architecture")

    @staticmethod
    def _pad(kernel, padding):
        return kernel // 2 if padding == "same" else 0

    @property
    def pad1(self):
        return self._pad(self.conv1_kernel, self.conv1_padding)

    @property
    def pad2(self):
        return self._pad(self.conv2_kernel, self.conv2_padding)

    @property
    def sizes(self):
        """Spatial sizes after conv1, pool1, conv2, pool2."""
        s1 = self.input_size + 2 * self.pad1 - self.conv1_kernel + 1
        p1 = s1 // 2
        s2 = p1 + 2 * self.pad2 - self.conv2_kernel + 1
        p2 = s2 // 2
        return s1, p1, s2, p2

    @property
    def flat_size(self):
        return self.sizes[3] ** 2 * self.conv2_filters

    def param_shapes(self):
        k1, k2 = self.conv1_kernel, self.conv2_kernel
        return {
            "conv1_w": (k1, k1, 1, self.conv1_filters),
            "conv1_b": (self.conv1_filters,),
            "conv2_w": (k2, k2, self.conv1_filters, self.conv2_filters),
            "conv2_b": (self.conv2_filters,),
            "dense1_w": (self.flat_size, self.dense_width),
            "dense1_b": (self.dense_width,),
            "dense2_w": (self.dense_width, self.outputs),
            "dense2_b": (self.outputs,),
        }


PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "dense1_w", "dense1_b", "dense2_w", "dense2_b")


@dataclass
class NetworkParameters:
    spec: ArchitectureSpec
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.param_shapes()
        if set(self.tensors) != set(shapes):
            raise ShapeError(f"expected parameters {sorted(shapes)}")
        for name, shape in shapes.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["conv1_w"].dtype

    def astype(self, dtype) -> "NetworkParameters":
        return NetworkParameters(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, spec: ArchitectureSpec, dtype=np.float32) -> "NetworkParameters":
        return cls(spec, {k: np.zeros(s, dtype=dtype) for k, s in spec.param_shapes().items()})


def init_params(spec: ArchitectureSpec, seed: int, dtype=np.float32) -> NetworkParameters:
    """He-scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in PARAM_NAMES:
        shape = spec.param_shapes()[name]
        if name.endswith("_b"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            out[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return NetworkParameters(spec, out)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _as_batch(params: NetworkParameters, images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None]
    R = params.spec.input_size
    if x.ndim != 3 or x.shape[1:] != (R, R):
        raise ShapeError(f"expected images of shape (n, {R}, {R}), got {np.shape(images)}")
    return x.astype(params.dtype, copy=False)[..., None]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(params: NetworkParameters, x: np.ndarray):
    s = params.spec
    n = x.shape[0]
    cache = {"x": x}
    cols1 = kernels.im2col(x, s.conv1_kernel, s.pad1)
    z1 = cols1 @ params["conv1_w"].reshape(-1, s.conv1_filters) + params["conv1_b"]
    a1 = np.maximum(z1, 0)
    p1, arg1 = kernels.maxpool2(a1)
    cols2 = kernels.im2col(p1, s.conv2_kernel, s.pad2)
    z2 = cols2 @ params["conv2_w"].reshape(-1, s.conv2_filters) + params["conv2_b"]
    a2 = np.maximum(z2, 0)
    p2, arg2 = kernels.maxpool2(a2)
    f = p2.reshape(n, -1)
    z3 = f @ params["dense1_w"] + params["dense1_b"]
    a3 = np.maximum(z3, 0)
    z4 = a3 @ params["dense2_w"] + params["dense2_b"]
    cache.update(cols1=cols1, z1=z1, arg1=arg1, p1=p1, cols2=cols2, z2=z2, arg2=arg2,
                 f=f, z3=z3, a3=a3, z4=z4)
    return _softmax(z4.astype(np.float64)), cache


def _backward(params: NetworkParameters, cache, dz4, need_input=False):
    """Backpropagate d(loss)/d(logits) through the stack."""
    s = params.spec
    dt = params.dtype
    dz4 = dz4.astype(dt)
    g = {}
    g["dense2_w"] = cache["a3"].T @ dz4
    g["dense2_b"] = dz4.sum(axis=0, dtype=np.float64).astype(dt)
    dz3 = (dz4 @ params["dense2_w"].T) * (cache["z3"] > 0)
    g["dense1_w"] = cache["f"].T @ dz3
    g["dense1_b"] = dz3.sum(axis=0, dtype=np.float64).astype(dt)
    dp2 = (dz3 @ params["dense1_w"].T).reshape(cache["z2"].shape[0], *([s.sizes[3]] * 2), -1)
    h2 = cache["z2"].shape[1]
    dz2 = kernels.maxpool2_backward(dp2, cache["arg2"], h2, h2) * (cache["z2"] > 0)
    K2 = cache["cols2"].shape[-1]
    g["conv2_w"] = (cache["cols2"].reshape(-1, K2).T @ dz2.reshape(-1, s.conv2_filters)
                    ).reshape(params["conv2_w"].shape)
    g["conv2_b"] = dz2.sum(axis=(0, 1, 2), dtype=np.float64).astype(dt)
    dcols2 = dz2 @ params["conv2_w"].reshape(-1, s.conv2_filters).T
    p = cache["p1"].shape[1]
    dp1 = kernels.col2im(dcols2, p, p, s.conv1_filters, s.conv2_kernel, s.pad2)
    h1 = cache["z1"].shape[1]
    dz1 = kernels.maxpool2_backward(dp1, cache["arg1"], h1, h1) * (cache["z1"] > 0)
    K1 = cache["cols1"].shape[-1]
    g["conv1_w"] = (cache["cols1"].reshape(-1, K1).T @ dz1.reshape(-1, s.conv1_filters)
                    ).reshape(params["conv1_w"].shape)
    g["conv1_b"] = dz1.sum(axis=(0, 1, 2), dtype=np.float64).astype(dt)
    dx = None
    if need_input:
        dcols1 = dz1 @ params["conv1_w"].reshape(-1, s.conv1_filters).T
        R = s.input_size
        dx = kernels.col2im(dcols1, R, R, 1, s.conv1_kernel, s.pad1)[..., 0]
    return g, dx


class Prediction(NamedTuple):
    b1: float
    b2: float

    @property
    def integrable(self) -> bool:
        return self.b1 > self.b2


def predict_proba(params: NetworkParameters, images, batch_size: int = 200) -> np.ndarray:
    """Softmax outputs, shape (n, 2), float64."""
    x = _as_batch(params, images)
    out = np.empty((x.shape[0], params.spec.outputs))
    for lo in range(0, x.shape[0], batch_size):
        out[lo:lo + batch_size] = _forward(params, x[lo:lo + batch_size])[0]
    return out


def forward(params: NetworkParameters, image) -> Prediction:
    """Class probabilities (b1 integrable, b2 non-integrable) for one image."""
    grid = getattr(image, "values", image)
    if np.ndim(grid) != 2:
        raise ShapeError("forward takes a single 2-D image")
    p = predict_proba(params, grid)[0]
    return Prediction(float(p[0]), float(p[1]))


def predict_labels(params: NetworkParameters, images) -> np.ndarray:
    """0 (integrable) iff b1 > b2; exact ties count as non-integrable."""
    p = predict_proba(params, images)
    return np.where(p[:, 0] > p[:, 1], 0, 1).astype(np.uint8)


def loss_and_grads(params: NetworkParameters, images, labels, need_input=False,
                   return_proba=False):
    """Mean categorical cross-entropy and its gradients."""
    x = _as_batch(params, images)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ShapeError("labels and images differ in length")
    prob, cache = _forward(params, x)
    n = x.shape[0]
    logp = np.log(np.clip(prob[np.arange(n), labels], 1e-300, None))
    loss = float(-logp.mean())
    onehot = np.zeros_like(prob)
    onehot[np.arange(n), labels] = 1.0
    grads, dx = _backward(params, cache, (prob - onehot) / n, need_input)
    if return_proba:
        return loss, grads, dx, prob
    return loss, grads, dx


def backward(params: NetworkParameters, image, label) -> dict:
    """Parameter gradients of the cross-entropy for one labelled image."""
    grid = getattr(image, "values", image)
    return loss_and_grads(params, np.asarray(grid)[None], [label])[1]


def input_gradient(params: NetworkParameters, image, target_label: int) -> np.ndarray:
    """d CE(target_label) / d pixels for one image, shape (R, R)."""
    grid = getattr(image, "values", image)
    if np.ndim(grid) != 2:
        raise ShapeError("input_gradient takes a single 2-D image")
    _, _, dx = loss_and_grads(params, np.asarray(grid)[None], [target_label], need_input=True)
    return dx[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    init_seed: int = 0
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        lr = self.lr * math.sqrt(c2) / c1
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params.tensors[k] -= (lr * m / (np.sqrt(v) + self.eps)).astype(m.dtype)


class _SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params.tensors[k] -= (self.lr * g).astype(g.dtype)


@dataclass
class TrainingHistory:
    loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    batch_loss: list = field(default_factory=list)


def train(dataset, spec: ArchitectureSpec | None = None, config: TrainingConfig | None = None,
          exclude=None, record_batches: bool = False, progress=None):
    """Mini-batch training over ``dataset.train`` (minus ``exclude``).

    Fully determined by (init_seed, shuffle_seed): the shuffle generator is
    seeded once and draws one permutation per epoch.
    """
    spec = spec or ArchitectureSpec(input_size=dataset.resolution)
    config = config or TrainingConfig()
    if spec.input_size != dataset.resolution:
        raise ShapeError(f"architecture expects {spec.input_size}px, "
                         f"dataset has {dataset.resolution}px")
    train_idx = np.asarray(dataset.train)
    if exclude is not None and len(exclude):
        train_idx = train_idx[~np.isin(train_idx, np.asarray(exclude))]
    if train_idx.size == 0:
        raise ValueError("empty training split")
    params = init_params(spec, config.init_seed)
    opt = (_Adam(params, config.learning_rate) if config.optimizer == "adam"
           else _SGD(params, config.learning_rate))
    rng = np.random.default_rng(config.shuffle_seed)
    X, y = dataset.images, dataset.labels.astype(np.int64)
    hist = TrainingHistory()
    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        total, hits = 0.0, 0
        for lo in range(0, order.size, config.batch_size):
            b = order[lo:lo + config.batch_size]
            loss, grads, _, prob = loss_and_grads(params, X[b], y[b], return_proba=True)
            hits += int(np.sum(np.where(prob[:, 0] > prob[:, 1], 0, 1) == y[b]))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            total += loss * b.size
            if record_batches:
                hist.batch_loss.append(loss)
            opt.step(params, grads)
        hist.loss.append(total / order.size)
        # running accuracy over the epoch's batches (pre-update weights)
        hist.train_accuracy.append(hits / order.size)
        if len(dataset.test):
            hist.test_accuracy.append(
                evaluate(params, X[dataset.test], y[dataset.test]).accuracy)
        if progress is not None:
            progress(epoch, hist)
    return params, hist


class EvalResult(NamedTuple):
    accuracy: float
    per_class: dict
    confusion: np.ndarray


def evaluate(params: NetworkParameters, images, labels) -> EvalResult:
    """Accuracy under the b1 > b2 rule; confusion[true, predicted]."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return EvalResult(float("nan"), {0: None, 1: None}, np.zeros((2, 2), dtype=np.int64))
    pred = predict_labels(params, images).astype(np.int64)
    conf = np.zeros((2, 2), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    per = {}
    for c in (0, 1):
        n = conf[c].sum()
        per[c] = float(conf[c, c] / n) if n else None
    return EvalResult(float(np.trace(conf) / labels.size), per, conf)


# ---------------------------------------------------------------------------
# Model file: "QBN1" | version u32 | R u32 | layer count u32 | layers | crc32
# layer: kind u8 | dims u32[4] | weights f32[...] | biases f32[...]
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"QBN1"
MODEL_VERSION = 1
LAYER_CONV_SAME, LAYER_CONV_VALID, LAYER_MAXPOOL, LAYER_DENSE_RELU, LAYER_DENSE_SOFTMAX = 1, 2, 3, 4, 5


def model_bytes(params: NetworkParameters) -> bytes:
    s = params.spec
    t = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in params.tensors.items()}
    conv = {"same": LAYER_CONV_SAME, "valid": LAYER_CONV_VALID}
    layers = [
        (conv[s.conv1_padding], t["conv1_w"].shape, t["conv1_w"], t["conv1_b"]),
        (LAYER_MAXPOOL, (2, 2, 0, 0), None, None),
        (conv[s.conv2_padding], t["conv2_w"].shape, t["conv2_w"], t["conv2_b"]),
        (LAYER_MAXPOOL, (2, 2, 0, 0), None, None),
        (LAYER_DENSE_RELU, (1, 1) + t["dense1_w"].shape, t["dense1_w"], t["dense1_b"]),
        (LAYER_DENSE_SOFTMAX, (1, 1) + t["dense2_w"].shape, t["dense2_w"], t["dense2_b"]),
    ]
    payload = bytearray(struct.pack("<III", MODEL_VERSION, s.input_size, len(layers)))
    for kind, dims, w, b in layers:
        payload += struct.pack("<B4I", kind, *dims)
        if w is not None:
            payload += w.tobytes() + b.tobytes()
    return MODEL_MAGIC + bytes(payload) + struct.pack("<I", zlib.crc32(payload))


def parse_model(data: bytes) -> NetworkParameters:
    if len(data) < 20 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a QBN1 model file")
    payload, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFormatError("model checksum mismatch (truncated or corrupt file)")
    version, R, nlayers = struct.unpack_from("<III", payload, 0)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    off = 12
    layers = []
    try:
        for _ in range(nlayers):
            kind, *dims = struct.unpack_from("<B4I", payload, off)
            off += 17
            if kind == LAYER_MAXPOOL:
                layers.append((kind, dims, None, None))
                continue
            wshape = tuple(dims) if kind in (LAYER_CONV_SAME, LAYER_CONV_VALID) else tuple(dims[2:])
            nw = int(np.prod(wshape))
            w = np.frombuffer(payload, "<f4", nw, off).reshape(wshape)
            off += 4 * nw
            b = np.frombuffer(payload, "<f4", wshape[-1], off)
            off += 4 * wshape[-1]
            layers.append((kind, dims, w, b))
    except (struct.error, ValueError) as exc:
        raise ModelFormatError(f"malformed layer records: {exc}") from exc
    kinds = [k for k, *_ in layers]
    if (len(layers) != 6 or kinds[1] != LAYER_MAXPOOL or kinds[3] != LAYER_MAXPOOL
            or kinds[4] != LAYER_DENSE_RELU or kinds[5] != LAYER_DENSE_SOFTMAX):
        raise ModelFormatError("layer sequence does not match conv-pool-conv-pool-dense-dense")
    pad = {LAYER_CONV_SAME: "same", LAYER_CONV_VALID: "valid"}
    c1, c2, d1, d2 = layers[0][2], layers[2][2], layers[4][2], layers[5][2]
    spec = ArchitectureSpec(
        input_size=R, conv1_filters=c1.shape[3], conv1_kernel=c1.shape[0],
        conv1_padding=pad[kinds[0]], conv2_filters=c2.shape[3], conv2_kernel=c2.shape[0],
        conv2_padding=pad[kinds[2]], dense_width=d1.shape[1], outputs=d2.shape[1])
    t = dict(zip(PARAM_NAMES, [layers[i][j].astype(np.float32) for i in (0, 2, 4, 5)
                               for j in (2, 3)]))
    return NetworkParameters(spec, t)


def save_model(params: NetworkParameters, path) -> None:
    from .formats import atomic_write

    atomic_write(path, model_bytes(params))


def load_model(path, expect_resolution: int | None = None) -> NetworkParameters:
    with open(path, "rb") as fh:
        params = parse_model(fh.read())
    if expect_resolution is not None and params.spec.input_size != expect_resolution:
        raise ShapeError(f"model expects {params.spec.input_size}px input, "
                         f"data has {expect_resolution}px")
    return params


def spec_dict(spec: ArchitectureSpec) -> dict:
    return asdict(spec)
