"""Minimal CNN engine (numpy only) plus the two regression losses.

Layers implement ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> (dx, param_grads)`` with analytic gradients.
Tensors are (batch, channels, rows, cols) float arrays; float64 is the
default and float32 is available for speed. Convolutions are
cross-correlations; max pooling routes gradient to the first maximal
element of each window in row-major scan order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericalError

_MAGIC = b"FEN1"


# ---------------------------------------------------------------------------
# layers

def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


class Conv2d:
    def __init__(self, in_ch, out_ch, kh, kw, stride=1, pad=0, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.kh, self.kw, self.stride, self.pad = kh, kw, stride, pad
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = _he_init(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)

    @property
    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise DimensionError(f"conv expects {self.in_ch} channels, got {c}")
        ho = (h + 2 * self.pad - self.kh) // self.stride + 1
        wo = (w + 2 * self.pad - self.kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError("convolution output would be empty")
        return (self.out_ch, ho, wo)

    def forward(self, x):
        cols, ho, wo = _im2col(x, self.kh, self.kw, self.stride, self.pad)
        wmat = self.weight.reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.bias
        n = x.shape[0]
        y = out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return y, (x.shape, cols)

    def backward(self, dy, cache):
        x_shape, cols = cache
        n, _, ho, wo = dy.shape
        dmat = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dw = (dmat.T @ cols).reshape(self.weight.shape)
        db = dmat.sum(axis=0)
        dcols = dmat @ self.weight.reshape(self.out_ch, -1)
        dcols = dcols.reshape(n, ho, wo, self.in_ch, self.kh, self.kw)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)

        _, c, h, w = x_shape
        p, s = self.pad, self.stride
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, [dw, db]


class ReLU:
    params = []

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, []


class MaxPool2d:
    def __init__(self, ph, pw):
        self.ph, self.pw = ph, pw

    params = []

    def out_shape(self, shape):
        c, h, w = shape
        if h < self.ph or w < self.pw:
            raise DimensionError("pooling window larger than input")
        return (c, h // self.ph, w // self.pw)

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // self.ph, w // self.pw
        xc = x[:, :, :ho * self.ph, :wo * self.pw]
        win = xc.reshape(n, c, ho, self.ph, wo, self.pw).transpose(0, 1, 2, 4, 3, 5)
        flat = win.reshape(n, c, ho, wo, self.ph * self.pw)
        idx = np.argmax(flat, axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        x_shape, idx = cache
        n, c, h, w = x_shape
        ho, wo = h // self.ph, w // self.pw
        flat = np.zeros((n, c, ho, wo, self.ph * self.pw), dtype=dy.dtype)
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        win = flat.reshape(n, c, ho, wo, self.ph, self.pw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, :ho * self.ph, :wo * self.pw] = win.reshape(n, c, ho * self.ph, wo * self.pw)
        return dx, []


class ResidualBlock:
    """conv3x3 - relu - conv3x3, identity skip, final relu."""

    def __init__(self, channels, rng=None, dtype=np.float64):
        self.conv1 = Conv2d(channels, channels, 3, 3, 1, 1, rng, dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(channels, channels, 3, 3, 1, 1, rng, dtype)
        self.relu2 = ReLU()
        self.channels = channels

    @property
    def params(self):
        return self.conv1.params + self.conv2.params

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise DimensionError(f"residual block expects {self.channels} channels")
        return shape

    def forward(self, x):
        h1, c1 = self.conv1.forward(x)
        h2, c2 = self.relu1.forward(h1)
        h3, c3 = self.conv2.forward(h2)
        y, c4 = self.relu2.forward(h3 + x)
        return y, (c1, c2, c3, c4)

    def backward(self, dy, cache):
        c1, c2, c3, c4 = cache
        dsum, _ = self.relu2.backward(dy, c4)
        dh2, g2 = self.conv2.backward(dsum, c3)
        dh1, _ = self.relu1.backward(dh2, c2)
        dx1, g1 = self.conv1.backward(dh1, c1)
        return dx1 + dsum, g1 + g2


class GlobalAvgPool:
    params = []

    def out_shape(self, shape):
        return (shape[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache):
        n, c, h, w = cache
        dx = np.broadcast_to(dy[:, :, None, None], cache) / (h * w)
        return np.ascontiguousarray(dx, dtype=dy.dtype), []


class Dense:
    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.weight = _he_init(rng, (out_dim, in_dim), in_dim, dtype)
        self.bias = np.zeros(out_dim, dtype=dtype)
        self.in_dim, self.out_dim = in_dim, out_dim

    @property
    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        flat = int(np.prod(shape))
        if flat != self.in_dim:
            raise DimensionError(f"dense expects {self.in_dim} inputs, got {flat}")
        return (self.out_dim,)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.weight.T + self.bias, (x.shape, flat)

    def backward(self, dy, cache):
        x_shape, flat = cache
        dw = dy.T @ flat
        db = dy.sum(axis=0)
        dx = (dy @ self.weight).reshape(x_shape)
        return dx, [dw, db]


# ---------------------------------------------------------------------------
# network specification

def conv(out_ch, kh, kw, stride=1, pad=0):
    return {"kind": "conv", "out": out_ch, "kh": kh, "kw": kw, "stride": stride, "pad": pad}


def relu():
    return {"kind": "relu"}


def maxpool(h=2, w=2):
    return {"kind": "maxpool", "h": h, "w": w}


def resblock(channels):
    return {"kind": "resblock", "channels": channels}


def gap():
    return {"kind": "gap"}


def fc(out_dim):
    return {"kind": "fc", "out": out_dim}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    seed: int = 0
    dtype: str = "float64"

    def to_json(self) -> dict:
        return {"layers": list(self.layers), "input_shape": list(self.input_shape),
                "seed": self.seed, "dtype": self.dtype}

    @classmethod
    def from_json(cls, doc) -> "NetworkSpec":
        return cls(tuple(doc["layers"]), tuple(doc["input_shape"]),
                   doc.get("seed", 0), doc.get("dtype", "float64"))


def output_shape(spec: NetworkSpec) -> tuple:
    """Walk the layer chain symbolically; raises on any incompatibility."""
    shape = tuple(spec.input_shape)
    for desc in spec.layers:
        kind = desc["kind"]
        if kind == "conv":
            if len(shape) != 3:
                raise DimensionError("conv needs a (c, h, w) input")
            c, h, w = shape
            ho = (h + 2 * desc["pad"] - desc["kh"]) // desc["stride"] + 1
            wo = (w + 2 * desc["pad"] - desc["kw"]) // desc["stride"] + 1
            if ho < 1 or wo < 1:
                raise DimensionError("convolution output would be empty")
            shape = (desc["out"], ho, wo)
        elif kind == "relu":
            pass
        elif kind == "maxpool":
            c, h, w = shape
            if h < desc["h"] or w < desc["w"]:
                raise DimensionError("pooling window larger than input")
            shape = (c, h // desc["h"], w // desc["w"])
        elif kind == "resblock":
            if shape[0] != desc["channels"]:
                raise DimensionError("residual block channel mismatch")
        elif kind == "gap":
            shape = (shape[0],)
        elif kind == "fc":
            shape = (desc["out"],)
        else:
            raise DimensionError(f"unknown layer kind {kind!r}")
    return shape


class Network:
    """A layer stack built from a NetworkSpec with seeded initialization."""

    def __init__(self, spec: NetworkSpec):
        output_shape(spec)
        self.spec = spec
        dtype = np.dtype(spec.dtype).type
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        self.layers = []
        shape = tuple(spec.input_shape)
        for desc in spec.layers:
            kind = desc["kind"]
            if kind == "conv":
                layer = Conv2d(shape[0], desc["out"], desc["kh"], desc["kw"],
                               desc["stride"], desc["pad"], rng, dtype)
                shape = layer.out_shape(shape)
            elif kind == "relu":
                layer = ReLU()
            elif kind == "maxpool":
                layer = MaxPool2d(desc["h"], desc["w"])
                shape = layer.out_shape(shape)
            elif kind == "resblock":
                layer = ResidualBlock(desc["channels"], rng, dtype)
            elif kind == "gap":
                layer = GlobalAvgPool()
                shape = layer.out_shape(shape)
            elif kind == "fc":
                layer = Dense(int(np.prod(shape)), desc["out"], rng, dtype)
                shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.dtype = dtype

    @property
    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def forward(self, x):
        """Returns (output, caches); caches feed backward()."""
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(
                f"input shape {tuple(x.shape[1:])} != spec {tuple(self.spec.input_shape)}")
        caches = []
        y = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self.layers:
            y, cache = layer.forward(y)
            caches.append(cache)
        return y, caches

    def predict(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, dy, caches):
        """Gradient for every parameter, aligned with self.params."""
        grads = [None] * len(self.layers)
        d = np.ascontiguousarray(dy, dtype=self.dtype)
        for i in reversed(range(len(self.layers))):
            d, g = self.layers[i].backward(d, caches[i])
            grads[i] = g
        flat = []
        for g in grads:
            flat.extend(g)
        return flat, d


def desk_facial_spec(expression_dim: int, seed: int = 0, dtype: str = "float64") -> NetworkSpec:
    """Small residual regressor for 112x224 masked face strips."""
    return NetworkSpec(
        layers=(
            conv(8, 7, 7, stride=2, pad=3), relu(), maxpool(2, 2),
            conv(16, 3, 3, stride=1, pad=1), relu(),
            resblock(16), resblock(16),
            gap(), fc(expression_dim),
        ),
        input_shape=(1, 112, 224), seed=seed, dtype=dtype,
    )


def paper_facial_spec(expression_dim: int = 79, seed: int = 0, dtype: str = "float64") -> NetworkSpec:
    """Full-scale variant: an 18-layer residual stack sized for 112x224 input."""
    layers = [conv(64, 7, 7, stride=2, pad=3), relu(), maxpool(2, 2),
              resblock(64), resblock(64)]
    for ch in (128, 256, 512):
        layers += [conv(ch, 3, 3, stride=2, pad=1), relu(), resblock(ch), resblock(ch)]
    layers += [gap(), fc(expression_dim)]
    return NetworkSpec(tuple(layers), (1, 112, 224), seed, dtype)


def desk_eye_spec(seed: int = 0, dtype: str = "float64") -> NetworkSpec:
    """Small eye regressor; strided first conv keeps desk training cheap."""
    return NetworkSpec(
        layers=(
            conv(8, 11, 11, stride=2), relu(),
            conv(16, 5, 5), relu(), maxpool(2, 2),
            conv(16, 5, 5), maxpool(2, 2),
            fc(5),
        ),
        input_shape=(1, 87, 135), seed=seed, dtype=dtype,
    )


def paper_eye_spec(seed: int = 0, dtype: str = "float64") -> NetworkSpec:
    return NetworkSpec(
        layers=(
            conv(16, 11, 11), relu(),
            conv(32, 5, 5), relu(), maxpool(2, 2),
            conv(32, 5, 5), maxpool(2, 2),
            fc(5),
        ),
        input_shape=(1, 87, 135), seed=seed, dtype=dtype,
    )


# ---------------------------------------------------------------------------
# losses

def facial_loss(pred, label, basis, pose, dense_weight, landmark_weight, visible_idx):
    """Three-term expression loss: coefficient L2 plus dense and landmark terms.

    Both meshes share the same identity, so their difference lives in the
    expression axes and the loss is an exact quadratic form in
    pred - label. Returns (value, gradient wrt pred).
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    d_exp = basis.dims[1]
    if pred.shape != (d_exp,) or label.shape != (d_exp,):
        raise DimensionError(f"expected length-{d_exp} expression vectors")
    m = facial_loss_matrix(basis, pose, dense_weight, landmark_weight, visible_idx)
    delta = pred - label
    return float(delta @ m @ delta), 2.0 * (m @ delta)


def facial_loss_matrix(basis, pose, dense_weight, landmark_weight, visible_idx) -> np.ndarray:
    """The quadratic form I + w_d * Gd + w_l * Gl for a given pose/visibility."""
    d_exp = basis.dims[1]
    m = np.eye(d_exp)
    if dense_weight != 0.0 and len(visible_idx):
        rows = np.asarray(visible_idx, dtype=np.int64)
        rows3 = (3 * rows[:, None] + np.arange(3)[None, :]).ravel()
        av = basis.expression_axes[rows3]
        m += dense_weight * (av.T @ av)
    if landmark_weight != 0.0 and len(basis.landmarks_mouth):
        p2r = pose.s * pose.R[:2]
        rows3 = (3 * basis.landmarks_mouth[:, None] + np.arange(3)[None, :])
        bl = np.concatenate([p2r @ basis.expression_axes[r3] for r3 in rows3], axis=0)
        m += landmark_weight * (bl.T @ bl)
    return m


def eye_loss(pred, label):
    """Plain squared L2 on the 5 eye parameters; returns (value, gradient)."""
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    delta = pred - label
    return float(delta @ delta), 2.0 * delta


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay_base: float = 0.9
    decay_every: str = "epoch"  # "epoch" | "half_epoch"
    epochs: int = 10
    batch_size: int = 32
    dense_weight: float = 1e-6
    landmark_weight: float = 1.0
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.decay_base, self.epochs, self.batch_size) <= 0:
            raise DimensionError("training hyperparameters must be positive")
        if self.decay_every not in ("epoch", "half_epoch"):
            raise DimensionError("decay_every must be 'epoch' or 'half_epoch'")


def paper_facial_train() -> TrainConfig:
    return TrainConfig(lr=1e-3, decay_base=0.9, decay_every="epoch", epochs=70,
                       batch_size=64, landmark_weight=1.0, dense_weight=1e-6)


def paper_eye_train() -> TrainConfig:
    return TrainConfig(lr=1e-4, decay_base=0.96, decay_every="half_epoch",
                       epochs=70, batch_size=256)


def schedule_lr(cfg: TrainConfig, epoch: int, batch_idx: int, batches_per_epoch: int) -> float:
    if cfg.decay_every == "epoch":
        return cfg.lr * cfg.decay_base ** epoch
    half = 1 if batch_idx >= (batches_per_epoch + 1) // 2 else 0
    return cfg.lr * cfg.decay_base ** (2 * epoch + half)


@dataclass
class TrainingData:
    """In-memory training set; aux carries per-sample loss context."""

    inputs: np.ndarray
    labels: np.ndarray
    aux: list | None = None


def l2_batch_loss(pred, labels, aux):
    delta = pred - labels
    b = pred.shape[0]
    return float((delta * delta).sum() / b), 2.0 * delta / b


def make_facial_batch_loss(matrices: dict):
    """Batch loss using per-frame quadratic forms keyed by aux frame id."""

    def loss_fn(pred, labels, aux):
        delta = pred - labels
        b = pred.shape[0]
        grad = np.empty_like(delta)
        total = 0.0
        for i in range(b):
            m = matrices[aux[i]]
            md = m @ delta[i]
            total += float(delta[i] @ md)
            grad[i] = 2.0 * md
        return total / b, grad / b

    return loss_fn


@dataclass
class TrainResult:
    history: list
    epochs: int


def train(net: Network, data: TrainingData, cfg: TrainConfig, loss_fn=l2_batch_loss,
          log_path=None) -> TrainResult:
    """Deterministic minibatch SGD with momentum and a decaying step size."""
    n = data.inputs.shape[0]
    if data.labels.shape[0] != n:
        raise DimensionError("inputs and labels disagree on sample count")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = net.params
    velocity = [np.zeros_like(p) for p in params]
    history = []
    log_f = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            batches = [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
            total = 0.0
            for bi, idx in enumerate(batches):
                lr = schedule_lr(cfg, epoch, bi, len(batches))
                x = data.inputs[idx]
                y = data.labels[idx]
                aux = [data.aux[i] for i in idx] if data.aux is not None else None
                pred, caches = net.forward(x)
                loss, dpred = loss_fn(pred, y, aux)
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"training diverged (loss={loss}) at epoch {epoch}, batch {bi}")
                grads, _ = net.backward(dpred.astype(net.dtype), caches)
                for p, v, g in zip(params, velocity, grads):
                    v *= cfg.momentum
                    v -= lr * g
                    p += v
                total += loss * len(idx)
            mean_loss = total / n
            history.append(mean_loss)
            if log_f:
                log_f.write(json.dumps({"epoch": epoch,
                                        "lr": schedule_lr(cfg, epoch, 0, len(batches)),
                                        "mean_loss": mean_loss}) + "\n")
    finally:
        if log_f:
            log_f.close()
    return TrainResult(history=history, epochs=cfg.epochs)


# ---------------------------------------------------------------------------
# prediction and persistence

def to_unit(image) -> np.ndarray:
    """Pixels in [0, 1]; integer images are divided by 255."""
    arr = np.asarray(image)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(float) / 255.0
    return arr.astype(float)


def predict_expression(net: Network, image) -> np.ndarray:
    """Run the facial regressor on one normalized 112x224 image."""
    x = to_unit(image)[None, None]
    return net.predict(x)[0].astype(float)


def predict_eye(net: Network, image):
    """Run the eye regressor on one normalized 87x135 image; returns EyeState."""
    from .synth_eye import EyeState

    x = to_unit(image)[None, None]
    return EyeState.from_vector(net.predict(x)[0])


def save_network(net: Network, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        for p in net.params:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(net.spec.to_json(), f, indent=2)
        f.write("\n")


def load_network(path) -> Network:
    try:
        with open(str(path) + ".json") as f:
            spec = NetworkSpec.from_json(json.load(f))
    except FileNotFoundError:
        raise DataError(f"missing sidecar {path}.json") from None
    net = Network(spec)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a network weights file (bad magic)")
    off = 4
    for p in net.params:
        count = p.size
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += count * 8
        p[...] = arr.reshape(p.shape).astype(p.dtype)
    if off != len(blob):
        raise DataError(f"{path}: payload size mismatch")
    return net
