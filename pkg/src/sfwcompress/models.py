"""Desk-scale differentiable models and problems with hand-written gradients."""
from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteLoss, ShapeMismatch, TruncatedPayload, UnknownMagic
from .numerics import RngStream, svd_full
from .regions import init_fan_in_gaussian

IDX_IMAGE_MAGIC = 2051  # 0x00000803: unsigned bytes, 3 dimensions
IDX_LABEL_MAGIC = 2049  # 0x00000801: unsigned bytes, 1 dimension


# --- layers ----------------------------------------------------------------

class Layer:
    kind = "activation"
    # role per parameter name: weight | bias | norm
    roles: dict = {}

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}

    def init(self, gen: np.random.Generator):
        pass

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class Dense(Layer):
    kind = "dense"
    roles = {"W": "weight", "b": "bias"}

    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}

    def init(self, gen):
        self.params["W"][...] = init_fan_in_gaussian(self.params["W"].shape, gen)
        self.params["b"][...] = 0.0

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dout):
        self.grads = {"W": dout.T @ self._x, "b": dout.sum(axis=0)}
        return dout @ self.params["W"]

    def describe(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv2d(Layer):
    """Stride-1 convolution with zero padding that preserves spatial size.

    Weights have shape ``(n, c, d, d)``; ``matrix_view`` is the
    ``(n, c*d*d)`` reshape used for spectral constraints and decomposition.
    """

    kind = "conv2d"
    roles = {"W": "weight", "b": "bias"}

    def __init__(self, c_in, n_out, d):
        super().__init__()
        if d % 2 != 1:
            raise ValueError("kernel size must be odd for size-preserving padding")
        self.c_in, self.n_out, self.d = c_in, n_out, d
        self.params = {"W": np.zeros((n_out, c_in, d, d)), "b": np.zeros(n_out)}

    def init(self, gen):
        self.params["W"][...] = init_fan_in_gaussian(self.params["W"].shape, gen)
        self.params["b"][...] = 0.0

    @property
    def matrix_view(self):
        return self.params["W"].reshape(self.n_out, -1)

    def forward(self, x, train=False):
        N, c, H, W = x.shape
        if c != self.c_in:
            raise ShapeMismatch(f"conv expects {self.c_in} channels, got {c}")
        p = self.d // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (self.d, self.d), axis=(2, 3))  # N,c,H,W,d,d
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, -1)
        self._cache = (x.shape, cols)
        out = cols @ self.matrix_view.T + self.params["b"]
        return out.reshape(N, H, W, self.n_out).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (N, c, H, W), cols = self._cache
        d, p = self.d, self.d // 2
        dmat = dout.transpose(0, 2, 3, 1).reshape(N * H * W, self.n_out)
        self.grads = {
            "W": (dmat.T @ cols).reshape(self.params["W"].shape),
            "b": dmat.sum(axis=0),
        }
        dcols = (dmat @ self.matrix_view).reshape(N, H, W, c, d, d)
        dxp = np.zeros((N, c, H + 2 * p, W + 2 * p))
        for i in range(d):
            for j in range(d):
                dxp[:, :, i : i + H, j : j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + H, p : p + W] if p else dxp

    def describe(self):
        return {"type": "Conv2d", "c_in": self.c_in, "n_out": self.n_out, "d": self.d}


class BatchNormLite(Layer):
    """Per-channel normalization with a learnable affine map.

    Training batches are normalized with their own statistics; evaluation
    uses running averages, which the training loop refreshes explicitly via
    ``commit_stats`` so that gradient checks stay side-effect free.
    """

    kind = "batchnorm"
    roles = {"gamma": "norm", "beta": "norm"}

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._batch_stats = None

    def init(self, gen):
        self.params["gamma"][...] = 1.0
        self.params["beta"][...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train=False):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self._batch_stats = (mean, var, x.size // self.channels)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        self._cache = (xhat, inv, train)
        return xhat * self._bcast(self.params["gamma"], x) + self._bcast(self.params["beta"], x)

    def backward(self, dout):
        xhat, inv, train = self._cache
        axes = self._axes(dout)
        self.grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
        dxhat = dout * self._bcast(self.params["gamma"], dout)
        if not train:
            return dxhat * self._bcast(inv, dout)
        count = dout.size // self.channels
        mean_dxhat = dxhat.sum(axis=axes) / count
        mean_dxhat_xhat = (dxhat * xhat).sum(axis=axes) / count
        return self._bcast(inv, dout) * (dxhat - self._bcast(mean_dxhat, dout) - xhat * self._bcast(mean_dxhat_xhat, dout))

    def commit_stats(self):
        if self._batch_stats is None:
            return
        mean, var, count = self._batch_stats
        unbiased = var * count / max(count - 1, 1)
        self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
        self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        self._batch_stats = None

    def describe(self):
        return {"type": "BatchNormLite", "channels": self.channels}


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask

    def describe(self):
        return {"type": "ReLU"}


class Tanh(Layer):
    def forward(self, x, train=False):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dout):
        return dout * (1.0 - self._y**2)

    def describe(self):
        return {"type": "Tanh"}


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        N, C, H, W = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (H * W), self._shape).copy()

    def describe(self):
        return {"type": "GlobalAvgPool"}


LAYER_TYPES = {
    "Dense": lambda s: Dense(s["n_in"], s["n_out"]),
    "Conv2d": lambda s: Conv2d(s["c_in"], s["n_out"], s["d"]),
    "BatchNormLite": lambda s: BatchNormLite(s["channels"]),
    "ReLU": lambda s: ReLU(),
    "Tanh": lambda s: Tanh(),
    "GlobalAvgPool": lambda s: GlobalAvgPool(),
}


# --- model -----------------------------------------------------------------

@dataclass(frozen=True)
class ParamInfo:
    layer: int
    layer_kind: str
    role: str

    @property
    def prunable(self) -> bool:
        # biases and normalization parameters are never pruned
        return self.role == "weight"

    @property
    def structured(self) -> bool:
        return self.role == "weight" and self.layer_kind == "conv2d"


def softmax_xent(logits, labels):
    """Mean cross-entropy, accuracy and gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    probs = np.exp(z - logsum[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return loss, acc, dlogits / n


class Model:
    """Ordered layer stack with a softmax cross-entropy head."""

    def __init__(self, layers):
        self.layers = list(layers)

    # parameters
    def named_params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.params.items():
                out[f"{i}.{pname}"] = arr
        return out

    def param_info(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for pname in layer.params:
                out[f"{i}.{pname}"] = ParamInfo(i, layer.kind, layer.roles[pname])
        return out

    def n_params(self, prunable_only=False) -> int:
        info = self.param_info()
        return sum(a.size for name, a in self.named_params().items() if not prunable_only or info[name].prunable)

    def init(self, rng: RngStream):
        for i, layer in enumerate(self.layers):
            layer.init(rng.child(i).generator())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    # computation
    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def loss_and_grads(self, x, y, train=True):
        logits = self.forward(x, train)
        loss, acc, dout = softmax_xent(logits, y)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss is {loss}")
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        grads = {}
        for i, layer in enumerate(self.layers):
            for pname in layer.params:
                grads[f"{i}.{pname}"] = layer.grads[pname]
        return loss, acc, grads

    def commit_stats(self):
        for layer in self.layers:
            if isinstance(layer, BatchNormLite):
                layer.commit_stats()

    def evaluate(self, x, y, batch_size=512):
        """Loss and accuracy, merging batch results in index order."""
        total_loss, correct, n = 0.0, 0, len(y)
        for start in range(0, n, batch_size):
            logits = self.forward(x[start : start + batch_size], train=False)
            yb = y[start : start + batch_size]
            loss, acc, _ = softmax_xent(logits, yb)
            total_loss += loss * len(yb)
            correct += int(round(acc * len(yb)))
        return total_loss / n, correct / n

    def predict(self, x):
        return self.forward(x, train=False).argmax(axis=1)

    def describe(self) -> list:
        return [layer.describe() for layer in self.layers]

    @classmethod
    def from_description(cls, desc) -> "Model":
        return cls([LAYER_TYPES[s["type"]](s) for s in desc])


def make_mlp(n_in, hidden, n_out, activation="relu", batchnorm=False) -> Model:
    act = {"relu": ReLU, "tanh": Tanh}[activation]
    layers, width = [], n_in
    for h in hidden:
        layers.append(Dense(width, h))
        if batchnorm:
            layers.append(BatchNormLite(h))
        layers.append(act())
        width = h
    layers.append(Dense(width, n_out))
    return Model(layers)


def make_cnn(in_channels, channels, n_out, kernel=3, activation="relu", batchnorm=False) -> Model:
    act = {"relu": ReLU, "tanh": Tanh}[activation]
    layers, c = [], in_channels
    for n in channels:
        layers.append(Conv2d(c, n, kernel))
        if batchnorm:
            layers.append(BatchNormLite(n))
        layers.append(act())
        c = n
    layers += [GlobalAvgPool(), Dense(c, n_out)]
    return Model(layers)


# --- datasets --------------------------------------------------------------

@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ShapeMismatch("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def batches(self, batch_size, rng: RngStream | None = None):
        order = np.arange(len(self)) if rng is None else rng.generator().permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.inputs[idx], self.labels[idx]

    def subset(self, n) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.split)


def _balanced_counts(n, classes):
    return [n // classes + (c < n % classes) for c in range(classes)]


def _split(x, y, n_train, seed):
    perm = RngStream(seed, "data", (1,)).generator().permutation(len(y))
    x, y = x[perm], y[perm]
    return Dataset(x[:n_train], y[:n_train], "train"), Dataset(x[n_train:], y[n_train:], "test")


def make_two_moons(seed, n, noise=0.1, n_test=0):
    """Two interleaving half circles; with ``n_test`` also returns a test split.

    Class 0 lies on the unit upper arc, class 1 on the shifted lower arc.
    """
    total = n + n_test
    n0, n1 = _balanced_counts(total, 2)
    gen = RngStream(seed, "data").generator()
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    x = np.vstack([
        np.column_stack([np.cos(t0), np.sin(t0)]),
        np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)]),
    ])
    if noise:
        x = x + noise * gen.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    train, test = _split(x, y, n, seed)
    return (train, test) if n_test else train


def make_blobs(seed, n, classes, dim=2, std=1.0, n_test=0, shape=None):
    """Isotropic Gaussian clusters around random centers.

    With ``shape=(c, h, w)`` the centers are smooth random images instead of
    points in ``[-5, 5]^dim``, giving a small image classification task.
    """
    total = n + n_test
    gen = RngStream(seed, "data").generator()
    if shape is None:
        centers = gen.uniform(-5.0, 5.0, size=(classes, dim))
    else:
        c, h, w = shape
        coarse = gen.standard_normal((classes, c, (h + 1) // 2, (w + 1) // 2))
        centers = np.repeat(np.repeat(coarse, 2, axis=2), 2, axis=3)[:, :, :h, :w]
    counts = _balanced_counts(total, classes)
    x = np.concatenate([centers[i] + std * gen.standard_normal((cnt,) + centers[i].shape) for i, cnt in enumerate(counts)])
    y = np.concatenate([np.full(cnt, i, dtype=np.int64) for i, cnt in enumerate(counts)])
    train, test = _split(x, y, n, seed)
    return (train, test) if n_test else train


# --- IDX files -------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse an IDX image (magic 2051) or label (magic 2049) file as uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_idx(blob)


def parse_idx(blob: bytes) -> np.ndarray:
    if len(blob) < 4:
        raise TruncatedPayload("missing magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    ndim = {IDX_IMAGE_MAGIC: 3, IDX_LABEL_MAGIC: 1}.get(magic)
    if ndim is None:
        raise UnknownMagic(f"unknown IDX magic 0x{magic:08X}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedPayload("header shorter than its dimension count")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise TruncatedPayload(f"expected {count} payload bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGE_MAGIC, 1: IDX_LABEL_MAGIC}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path=None, limit=None, split="train") -> Dataset:
    """Images scaled to [0, 1] with shape ``(N, 1, rows, cols)``."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path} is not an IDX image file")
    labels = read_idx(labels_path).astype(np.int64) if labels_path else np.zeros(len(images), dtype=np.int64)
    x = images[:, None, :, :].astype(np.float64) / 255.0
    if limit is not None:
        x, labels = x[:limit], labels[:limit]
    return Dataset(x, labels, split)


# --- convex finite-sum problem ---------------------------------------------

@dataclass
class LeastSquaresProblem:
    """``L(theta) = mean_i 0.5 * (x_i . theta - y_i)^2``."""

    X: np.ndarray
    y: np.ndarray

    @property
    def m(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    def loss(self, theta) -> float:
        r = self.X @ theta - self.y
        return float(0.5 * np.mean(r * r))

    def grad(self, theta) -> np.ndarray:
        return self.X.T @ (self.X @ theta - self.y) / self.m

    def batch_grad(self, theta, idx) -> np.ndarray:
        Xb = self.X[idx]
        return Xb.T @ (Xb @ theta - self.y[idx]) / len(idx)

    def per_sample_grad_norms(self, theta) -> np.ndarray:
        r = self.X @ theta - self.y
        return np.abs(r) * np.linalg.norm(self.X, axis=1)

    def smoothness(self) -> float:
        """Largest eigenvalue of ``X^T X / m``."""
        return float(svd_full(self.X / math.sqrt(self.m)).sigma[0] ** 2)

    def lipschitz_bound(self, radius) -> float:
        """Sup of per-sample gradient norms over ``||theta||_2 <= radius``."""
        row = np.linalg.norm(self.X, axis=1)
        return float(np.max(row * (row * radius + np.abs(self.y))))

    def unconstrained_min(self) -> float:
        theta, *_ = np.linalg.lstsq(self.X, self.y, rcond=None)
        return self.loss(theta)

    def gap_bound(self, theta0) -> float:
        """Upper bound on ``L(theta0) - min_C L`` (unconstrained min is lower)."""
        return self.loss(theta0) - self.unconstrained_min()


def least_squares_problem(seed, m, n, *, offset=1.0, spread=1.0, noise=0.1, target_scale=3.0,
                          aligned=False) -> LeastSquaresProblem:
    """Seeded least-squares instance.

    Rows are ``offset * e_1`` plus Gaussian scatter of total scale about
    ``spread``; targets come from a planted vector of norm ``target_scale``,
    random in direction or along ``e_1`` when ``aligned``. Small spread
    with an aligned target gives nearly parallel per-sample gradients.
    """
    gen = RngStream(seed, "data").generator()
    mean = np.zeros(n)
    mean[0] = offset
    X = mean + spread * gen.standard_normal((m, n)) / math.sqrt(n)
    planted = mean.copy() if aligned else gen.standard_normal(n)
    planted *= target_scale / np.linalg.norm(planted)
    y = X @ planted + noise * gen.standard_normal(m)
    return LeastSquaresProblem(X, y)


# --- gradient verification -------------------------------------------------

def finite_diff_check(loss_fn: Callable[[], float], params: dict, grads: dict, eps=1e-5,
                      min_coords=64, rng: RngStream | None = None, atol=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` evaluates the loss at the current contents of ``params``
    (perturbed in place and restored). Coordinates are drawn per parameter
    so every tensor is exercised, at least ``min_coords`` overall.

    The denominator is floored at ``atol * max(1, |L|)``: a difference
    quotient cannot resolve gradients much below ``eps_mach * |L| / eps``
    (1e-11 and up here), so exactly-zero gradients such as biases feeding a
    normalization layer are compared in absolute terms.
    """
    gen = (rng or RngStream(0, "noise")).generator()
    names = list(params)
    per = max(8, -(-min_coords // max(len(names), 1)))
    floor = atol * max(1.0, abs(loss_fn()))
    worst = 0.0
    for name in names:
        arr = params[name]
        flat = arr.reshape(-1)
        pick = gen.choice(flat.size, size=min(per, flat.size), replace=False)
        for i in np.sort(pick):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grads[name].reshape(-1)[i])
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
            worst = max(worst, err)
    return worst
