"""A small numpy convolutional network with exact receptive-field geometry.

Activations are NHWC arrays.  Every layer implements ``forward`` and
``backward``; parameter layers keep their gradients in ``grads`` after a
backward pass.  The reference architecture ``T3`` is

    conv(5x5, 1->16, stride 2, pad 2) - relu - maxpool(2)
    - conv(3x3, 16->32, pad 1) - relu - conv(3x3, 32->32, pad 1) - relu
    - fc - softmax

on 32x32 grayscale inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_random_state
from .fields import FeatureField, Geometry, read_tensor, write_tensor

__all__ = [
    "Conv2D",
    "ReLU",
    "MaxPool",
    "Dense",
    "Network",
    "NetworkSplit",
    "TrainConfig",
    "TrainingDivergedError",
    "ConvNetClassifier",
    "ProbeExtractor",
    "softmax_logloss",
    "build_t3",
    "forward",
    "train",
    "grad_check",
    "save_network",
    "load_network",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


def _im2col(x, k, stride):
    # x: (N, H, W, C) already padded -> (N, Ho, Wo, k*k*C)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    N, Ho, Wo, C = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(N, Ho, Wo, k * k * C)


def _col2im(cols, shape, k, stride):
    # inverse scatter of _im2col: cols (N, Ho, Wo, k, k, C) -> (N, H, W, C)
    N, Ho, Wo = cols.shape[:3]
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, :, i, j]
    return out


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def out_shape(self, shape):
        return shape

    def geometry(self, geo):
        return geo

    def config(self):
        return {"kind": self.kind}


class Conv2D(Layer):
    """Cross-correlation with ``out_ch`` filters of size ``k x k x in_ch``."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, k, stride=1, pad=0, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        rng = check_random_state(rng)
        scale = np.sqrt(2.0 / (k * k * in_ch))
        self.params = {"W": rng.standard_normal((k, k, in_ch, out_ch)) * scale, "b": np.zeros(out_ch)}

    def forward(self, x):
        if x.shape[-1] != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got input {x.shape}")
        p = self.pad
        xp = np.pad(x, [(0, 0), (p, p), (p, p), (0, 0)]) if p else x
        cols = _im2col(xp, self.k, self.stride)
        self._cache = (xp.shape, cols)
        W = self.params["W"].reshape(-1, self.out_ch)
        return cols @ W + self.params["b"]

    def backward(self, dout):
        xshape, cols = self._cache
        W = self.params["W"]
        flat = dout.reshape(-1, self.out_ch)
        self.grads = {
            "W": (cols.reshape(-1, cols.shape[-1]).T @ flat).reshape(W.shape),
            "b": flat.sum(axis=0),
        }
        dcols = (dout @ W.reshape(-1, self.out_ch).T).reshape(dout.shape[:3] + (self.k, self.k, self.in_ch))
        dx = _col2im(dcols, xshape, self.k, self.stride)
        p = self.pad
        return dx[:, p:xshape[1] - p, p:xshape[2] - p] if p else dx

    def out_shape(self, shape):
        H, W, _ = shape
        Ho = (H + 2 * self.pad - self.k) // self.stride + 1
        Wo = (W + 2 * self.pad - self.k) // self.stride + 1
        return (Ho, Wo, self.out_ch)

    def geometry(self, geo):
        return geo.then_conv(self.k, self.stride, self.pad)

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k,
                "stride": self.stride, "pad": self.pad}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class MaxPool(Layer):
    """Non-overlapping max pooling (``size == stride``); ties go to the first maximum."""

    kind = "maxpool"

    def __init__(self, size=2, stride=None):
        super().__init__()
        self.size = size
        self.stride = stride or size
        if self.stride != self.size:
            raise ValueError("only non-overlapping pooling is supported")

    def forward(self, x):
        s = self.size
        N, H, W, C = x.shape
        Ho, Wo = H // s, W // s
        blocks = x[:, :Ho * s, :Wo * s].reshape(N, Ho, s, Wo, s, C).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(N, Ho, Wo, C, s * s)
        idx = np.argmax(blocks, axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], -1)[..., 0]

    def backward(self, dout):
        shape, idx = self._cache
        s = self.size
        N, H, W, C = shape
        Ho, Wo = dout.shape[1:3]
        blocks = np.zeros((N, Ho, Wo, C, s * s))
        np.put_along_axis(blocks, idx[..., None], dout[..., None], -1)
        blocks = blocks.reshape(N, Ho, Wo, C, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(N, Ho * s, Wo * s, C)
        dx = np.zeros(shape)
        dx[:, :Ho * s, :Wo * s] = blocks
        return dx

    def out_shape(self, shape):
        H, W, C = shape
        return (H // self.size, W // self.size, C)

    def geometry(self, geo):
        return geo.then_conv(self.size, self.stride, 0)

    def config(self):
        return {"kind": self.kind, "size": self.size, "stride": self.stride}


class Dense(Layer):
    """Fully-connected layer on the flattened input."""

    kind = "fc"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = check_random_state(rng)
        self.in_features, self.out_features = in_features, out_features
        self.params = {"W": rng.standard_normal((in_features, out_features)) * np.sqrt(1.0 / in_features),
                       "b": np.zeros(out_features)}

    def forward(self, x):
        self._shape = x.shape
        flat = x.reshape(len(x), -1)
        if flat.shape[1] != self.in_features:
            raise ValueError(f"fc expects {self.in_features} inputs, got {flat.shape[1]}")
        self._x = flat
        return flat @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads = {"W": self._x.T @ dout, "b": dout.sum(axis=0)}
        return (dout @ self.params["W"].T).reshape(self._shape)

    def out_shape(self, shape):
        return (self.out_features,)

    def geometry(self, geo):
        return None

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


def softmax_logloss(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _layer_from_config(cfg):
    kind = cfg["kind"]
    if kind == "conv":
        return Conv2D(cfg["in_ch"], cfg["out_ch"], cfg["k"], cfg["stride"], cfg["pad"], rng=0)
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(cfg["size"], cfg["stride"])
    if kind == "fc":
        return Dense(cfg["in_features"], cfg["out_features"], rng=0)
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """Ordered list of layers with an input shape ``(H, W, C)``."""

    def __init__(self, layers, input_shape, seed=0, name="net"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.name = name
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape

    def __len__(self):
        return len(self.layers)

    def _prep(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == len(self.input_shape) - 1 + 1 and x.shape[1:] == self.input_shape[:2]:
            x = x[..., None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"network expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        return x

    def run(self, x, start=0, stop=None):
        """Forward through layers ``[start, stop)``; no input reshaping when ``start > 0``."""
        if start == 0:
            x = self._prep(x)
        for layer in self.layers[start:stop]:
            x = layer.forward(x)
        return x

    def backward(self, grad, start=0, stop=None):
        stop = len(self.layers) if stop is None else stop
        for layer in reversed(self.layers[start:stop]):
            grad = layer.backward(grad)
        return grad

    def geometries(self):
        geo = Geometry()
        out = []
        for layer in self.layers:
            geo = layer.geometry(geo) if geo is not None else None
            out.append(geo)
        return out

    def shapes(self):
        shape = self.input_shape
        out = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def conv_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    def probe_index(self, probe):
        """Split index right after the ``probe``-th convolution (1-based)."""
        convs = self.conv_indices()
        if not 1 <= probe <= len(convs):
            raise ValueError(f"probe must be in 1..{len(convs)}, got {probe}")
        return convs[probe - 1] + 1

    def split(self, s):
        return NetworkSplit(self, s)

    def probe(self, probe):
        return NetworkSplit(self, self.probe_index(probe))

    def predict_logits(self, x, batch=256):
        x = self._prep(x)
        return np.concatenate([self.run(x[i:i + batch]) for i in range(0, len(x), batch)])

    def predict(self, x):
        return np.argmax(self.predict_logits(x), axis=1)

    def error(self, x, y):
        return float(np.mean(self.predict(x) != np.asarray(y)))

    def param_list(self):
        return [(i, name) for i, layer in enumerate(self.layers) for name in layer.params]

    def get_weights(self):
        return {f"{i}.{n}": self.layers[i].params[n].copy() for i, n in self.param_list()}

    def set_weights(self, weights):
        for key, val in weights.items():
            i, n = key.split(".")
            self.layers[int(i)].params[n] = np.array(val, dtype=np.float64)

    def config(self):
        return {"name": self.name, "input_shape": list(self.input_shape), "seed": self.seed,
                "layers": [layer.config() for layer in self.layers]}


def forward(net, x):
    """All activations of ``net`` on image(s) ``x``.

    Returns one entry per layer: a :class:`FeatureField` (or a batch array
    for batched input) for spatial layers, the raw vector for dense ones.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(net.input_shape) - 1 or (x.ndim == 3 and x.shape == net.input_shape)
    if single:
        x = x[None]
    a = net._prep(x)
    acts = []
    for layer, geo in zip(net.layers, net.geometries()):
        a = layer.forward(a)
        if single:
            acts.append(FeatureField(a[0], geo) if a.ndim == 4 else a[0])
        else:
            acts.append(a)
    return acts


def build_t3(num_classes=2, seed=0, input_size=32):
    """The reference three-convolution network on ``input_size`` grayscale images."""
    rng = np.random.default_rng(seed)
    layers = [
        Conv2D(1, 16, 5, stride=2, pad=2, rng=rng), ReLU(), MaxPool(2),
        Conv2D(16, 32, 3, pad=1, rng=rng), ReLU(),
        Conv2D(32, 32, 3, pad=1, rng=rng), ReLU(),
    ]
    shape = (input_size, input_size, 1)
    for layer in layers:
        shape = layer.out_shape(shape)
    layers.append(Dense(int(np.prod(shape)), num_classes, rng=rng))
    return Network(layers, (input_size, input_size, 1), seed=seed, name="T3")


@dataclass
class NetworkSplit:
    """``phi = phi2 o phi1`` with ``phi1 = layers[:s]`` and ``phi2 = layers[s:]``."""

    net: Network
    s: int

    def __post_init__(self):
        if not 0 < self.s < len(self.net):
            raise ValueError(f"split index must be in 1..{len(self.net) - 1}, got {self.s}")

    def phi1(self, x, batch=256):
        x = self.net._prep(x)
        return np.concatenate([self.net.run(x[i:i + batch], 0, self.s) for i in range(0, len(x), batch)])

    def phi2(self, f, batch=256):
        return np.concatenate([self.net.run(f[i:i + batch], self.s) for i in range(0, len(f), batch)])

    @property
    def geometry(self):
        return self.net.geometries()[self.s - 1]

    @property
    def feature_shape(self):
        return self.net.shapes()[self.s - 1]


class ProbeExtractor:
    """Feature extractor exposing ``phi1`` of a network split for map learning."""

    def __init__(self, split):
        self.split = split
        self.geometry = split.geometry

    def features(self, images):
        return self.split.phi1(images)

    def __call__(self, x):
        return FeatureField(self.split.phi1(np.asarray(x)[None])[0], self.geometry)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    lr_decay: float = 0.1
    decay_epochs: tuple = field(default_factory=tuple)
    augment: str | None = None

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate, momentum and weight decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** sum(epoch >= e for e in self.decay_epochs)


class SGD:
    """Momentum SGD with L2 weight decay on the ``W`` tensors of ``layers``."""

    def __init__(self, layers, cfg):
        self.cfg = cfg
        self.slots = [(layer, n, n == "W") for layer in layers for n in layer.params]
        self.velocity = [np.zeros_like(layer.params[n]) for layer, n, _ in self.slots]

    def step(self, lr):
        cfg = self.cfg
        for (layer, n, decay), v in zip(self.slots, self.velocity):
            p = layer.params[n]
            g = layer.grads[n] + cfg.weight_decay * p if decay else layer.grads[n]
            v *= cfg.momentum
            v -= lr * g
            p += v


def _augment(x, kind, rng):
    if kind is None:
        return x
    if kind == "hflip":
        flip = rng.random(len(x)) < 0.5
        x = x.copy()
        x[flip] = x[flip, :, ::-1]
        return x
    raise ValueError(f"unknown augmentation {kind!r}")


def train(net, dataset, cfg=TrainConfig(), val=None):
    """Train ``net`` in place by minibatch SGD on the softmax log-loss.

    ``dataset`` is a :class:`~equimap.imaging.LabeledDataset` or an
    ``(images, labels)`` pair.  Returns ``(net, history)`` with per-epoch mean
    training loss (plus validation error when ``val`` is given); entry 0 is
    the loss before training.
    """
    X, y = _xy(dataset)
    X = net._prep(X)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD([layer for layer in net.layers if layer.params], cfg)
    history = {"loss": [_mean_loss(net, X, y)], "val_error": []}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        lr = cfg.lr_at(epoch)
        total = 0.0
        for s in range(0, len(X), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = _augment(X[idx], cfg.augment, rng)
            loss, grad = softmax_logloss(net.run(xb), y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            net.backward(grad)
            opt.step(lr)
            total += loss * len(idx)
        history["loss"].append(total / len(X))
        if val is not None:
            history["val_error"].append(net.error(*_xy(val)))
        log.debug("epoch %d loss %.4f", epoch, history["loss"][-1])
    return net, history


def _mean_loss(net, X, y, batch=256):
    total = 0.0
    for s in range(0, len(X), batch):
        loss, _ = softmax_logloss(net.run(X[s:s + batch]), y[s:s + batch])
        total += loss * len(X[s:s + batch])
    return total / len(X)


def _xy(data):
    if hasattr(data, "images"):
        return np.asarray(data.images), np.asarray(data.labels)
    X, y = data
    return np.asarray(X), np.asarray(y)


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn classifier around the ``T3`` network.

    Parameters mirror :class:`TrainConfig`; ``augment="hflip"`` mirrors half
    of every minibatch.
    """

    def __init__(self, num_classes=2, epochs=20, lr=0.05, momentum=0.9, weight_decay=5e-4,
                 batch_size=32, seed=0, augment=None, decay_epochs=()):
        self.num_classes = num_classes
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed
        self.augment = augment
        self.decay_epochs = decay_epochs

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        self.classes_ = np.arange(self.num_classes)
        self.net_ = build_t3(self.num_classes, seed=self.seed, input_size=X.shape[1])
        cfg = TrainConfig(self.lr, self.momentum, self.weight_decay, self.batch_size, self.epochs,
                          self.seed, decay_epochs=tuple(self.decay_epochs), augment=self.augment)
        _, self.history_ = train(self.net_, (X, np.asarray(y)), cfg)
        return self

    def predict(self, X):
        return self.net_.predict(X)

    def predict_proba(self, X):
        z = self.net_.predict_logits(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(layer, input_shape, seed=0, h=1e-4, n_samples=40, input_fn=None):
    """Max relative error between analytic and central-difference gradients.

    Checks the input gradient and every parameter gradient of ``layer`` on
    the scalar loss ``sum(R * layer(x))`` for a random ``R``.  ``input_fn``
    may supply the input (e.g. values bounded away from ReLU kinks).
    """
    rng = np.random.default_rng(seed)
    x = input_fn(rng, input_shape) if input_fn is not None else rng.standard_normal(input_shape)
    out = layer.forward(x)
    R = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(R * layer.forward(x)))

    layer.forward(x)
    dx = layer.backward(R)
    analytic = [(x, dx)] + [(layer.params[n], layer.grads[n]) for n in layer.params]
    worst = 0.0
    for arr, grad in analytic:
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_network(net, directory, hyper=None):
    """Write ``manifest.json`` plus one ``EQF1`` tensor file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for key, arr in net.get_weights().items():
        fname = f"{key}.eqf"
        tensors[key] = {"file": fname, "shape": write_tensor(directory / fname, arr)}
    manifest = {"architecture": net.config(), "tensors": tensors, "hyperparameters": hyper or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, default=_jsonable))
    return directory / "manifest.json"


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_network(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arch = manifest["architecture"]
    net = Network([_layer_from_config(c) for c in arch["layers"]], arch["input_shape"],
                  seed=arch.get("seed", 0), name=arch.get("name", "net"))
    net.set_weights({k: read_tensor(directory / v["file"], v["shape"]) for k, v in manifest["tensors"].items()})
    return net
