"""Dense autoencoder built on a small handwritten layer engine.

Architecture (fixed): encoder Dense(128)/Dense(64)/Dense(32), each followed
by batch normalization and LeakyReLU(0.2), into a 4-unit linear code; the
decoder mirrors it back to the input width with a linear output.  Training
is Adam on mean-squared reconstruction error with early stopping on the
training loss and a best-epoch checkpoint.  Inference always uses the frozen
batch-norm running statistics, so encoding is deterministic.

Backward passes are checked against central finite differences by
gradient_check; keep any layer change covered by that harness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .traces import derive_rng

CODE_DIM = 4
HIDDEN_WIDTHS = (128, 64, 32)
LEAKY_ALPHA = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng=None):
        limit = 1.0 / np.sqrt(in_dim)
        if rng is None:
            rng = np.random.default_rng(0)
        self.W = rng.uniform(-limit, limit, size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train: bool):
        if train:
            self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        self.dW = self._x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.W.T

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.dW, "b": self.db}

    def to_dict(self):
        return {"type": "dense", "W": self.W.tolist(), "b": self.b.tolist()}


class BatchNorm:
    """Per-feature batch normalization with learnable scale and shift.

    Train mode normalizes by batch statistics and updates running averages;
    eval mode uses the running averages only.
    """

    def __init__(self, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.dgamma = np.zeros(dim)
        self.dbeta = np.zeros(dim)
        self._cache = None

    def forward(self, x, train: bool):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * inv_std
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            self._cache = (xhat, inv_std)
            return self.gamma * xhat + self.beta
        xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return self.gamma * xhat + self.beta

    def backward(self, dy):
        xhat, inv_std = self._cache
        m = dy.shape[0]
        self.dgamma = (dy * xhat).sum(axis=0)
        self.dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        # standard batch-norm gradient through the batch statistics
        dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def to_dict(self):
        return {
            "type": "batchnorm",
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "running_mean": self.running_mean.tolist(),
            "running_var": self.running_var.tolist(),
            "momentum": self.momentum,
            "eps": self.eps,
        }


class LeakyRelu:
    def __init__(self, alpha: float = LEAKY_ALPHA):
        self.alpha = alpha
        self._x = None

    def forward(self, x, train: bool):
        if train:
            self._x = x
        return np.where(x > 0, x, self.alpha * x)

    def backward(self, dy):
        return dy * np.where(self._x > 0, 1.0, self.alpha)

    def params(self):
        return {}

    def grads(self):
        return {}

    def to_dict(self):
        return {"type": "leakyrelu", "alpha": self.alpha}


class Mlp:
    """A plain layer stack with MSE loss; enough network for this toolkit."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train: bool = False, upto: int | None = None):
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers[:upto]:
            out = layer.forward(out, train)
        return out

    def loss_and_grads(self, x, target):
        """Train-mode forward, MSE loss, full backward.  Returns the loss."""
        out = self.forward(x, train=True)
        diff = out - target
        loss = float(np.mean(diff * diff))
        dy = 2.0 * diff / diff.size
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return loss

    def loss(self, x, target, train: bool = True):
        out = self.forward(x, train=train)
        diff = out - target
        return float(np.mean(diff * diff))

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield f"layer{i}.{name}", arr

    def named_grads(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.grads().items():
                yield f"layer{i}.{name}", arr

    def snapshot(self):
        return {name: arr.copy() for name, arr in self.named_params()}

    def restore(self, snap):
        for name, arr in self.named_params():
            arr[:] = snap[name]


@dataclass(frozen=True)
class AutoencoderConfig:
    input_dim: int
    seed: int
    code_dim: int = CODE_DIM
    hidden: tuple = HIDDEN_WIDTHS
    alpha: float = LEAKY_ALPHA
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 64
    patience: int = 20

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "seed": self.seed,
            "code_dim": self.code_dim,
            "hidden": list(self.hidden),
            "alpha": self.alpha,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def build_autoencoder(cfg: AutoencoderConfig, rng=None) -> tuple:
    """Build the fixed symmetric stack.  Returns (net, encoder_layer_count)."""
    if rng is None:
        rng = derive_rng(cfg.seed, "init")
    layers = []
    prev = cfg.input_dim
    for width in cfg.hidden:
        layers.append(Dense(prev, width, rng))
        layers.append(BatchNorm(width))
        layers.append(LeakyRelu(cfg.alpha))
        prev = width
    layers.append(Dense(prev, cfg.code_dim, rng))  # linear code
    encoder_len = len(layers)
    prev = cfg.code_dim
    for width in reversed(cfg.hidden):
        layers.append(Dense(prev, width, rng))
        layers.append(BatchNorm(width))
        layers.append(LeakyRelu(cfg.alpha))
        prev = width
    layers.append(Dense(prev, cfg.input_dim, rng))  # linear reconstruction
    return Mlp(layers), encoder_len


class Adam:
    def __init__(self, net: Mlp, lr: float, beta1: float, beta2: float, eps: float):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in net.named_params()}
        self.v = {name: np.zeros_like(arr) for name, arr in net.named_params()}

    def step(self):
        self.t += 1
        grads = dict(self.net.named_grads())
        for name, arr in self.net.named_params():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            mhat = self.m[name] / (1 - self.beta1 ** self.t)
            vhat = self.v[name] / (1 - self.beta2 ** self.t)
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class AutoencoderModel:
    cfg: AutoencoderConfig
    net: Mlp
    encoder_len: int
    loss_history: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def smoothed_history(self):
        """Best-so-far training loss per epoch; non-increasing by construction."""
        return np.minimum.accumulate(np.asarray(self.loss_history)).tolist()


def train_autoencoder(X, cfg: AutoencoderConfig) -> AutoencoderModel:
    """Train on X (rows are feature vectors).  Deterministic in (X, cfg)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"expected (n, {cfg.input_dim}) matrix, got {X.shape}")
    n = X.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    rng = derive_rng(cfg.seed, "train")
    net, encoder_len = build_autoencoder(cfg, derive_rng(cfg.seed, "init"))
    opt = Adam(net, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    model = AutoencoderModel(cfg=cfg, net=net, encoder_len=encoder_len)
    best_loss = np.inf
    best_snap = net.snapshot()
    stale = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if idx.size < 2:
                continue  # batch statistics are meaningless for one row
            batch = X[idx]
            batch_losses.append(net.loss_and_grads(batch, batch))
            opt.step()
        epoch_loss = float(np.mean(batch_losses))
        model.loss_history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_snap = net.snapshot()
            model.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.restore(best_snap)
    return model


def encode(model: AutoencoderModel, X) -> np.ndarray:
    """Map rows to the 4-dim code, eval mode (frozen batch-norm statistics)."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    codes = model.net.forward(X, train=False, upto=model.encoder_len)
    return codes[0] if single else codes


def reconstruct(model: AutoencoderModel, X) -> np.ndarray:
    return model.net.forward(np.asarray(X, dtype=np.float64), train=False)


def gradient_check(net_or_cfg, X, targets=None, step: float = 1e-4) -> float:
    """Max relative error between backprop and central finite differences.

    Accepts a built Mlp or an AutoencoderConfig.  Checks every parameter of
    every layer on the given batch (train-mode loss, targets default to X).
    """
    if isinstance(net_or_cfg, AutoencoderConfig):
        net, _ = build_autoencoder(net_or_cfg)
    else:
        net = net_or_cfg
    X = np.asarray(X, dtype=np.float64)
    target = X if targets is None else np.asarray(targets, dtype=np.float64)
    net.loss_and_grads(X, target)
    analytic = {name: arr.copy() for name, arr in net.named_grads()}
    worst = 0.0
    for name, arr in net.named_params():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = net.loss(X, target, train=True)
            flat[i] = orig - step
            down = net.loss(X, target, train=True)
            flat[i] = orig
            gn = (up - down) / (2 * step)
            denom = max(abs(ga[i]), abs(gn), 1e-6)
            worst = max(worst, abs(ga[i] - gn) / denom)
    return worst


# -- serialization -----------------------------------------------------------

_FORMAT_VERSION = 1


def save_autoencoder(model: AutoencoderModel, path: str) -> None:
    doc = {
        "format_version": _FORMAT_VERSION,
        "family": "autoencoder",
        "cfg": model.cfg.to_dict(),
        "encoder_len": model.encoder_len,
        "layers": [layer.to_dict() for layer in model.net.layers],
        "loss_history": model.loss_history,
        "best_epoch": model.best_epoch,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _layer_from_dict(d):
    if d["type"] == "dense":
        layer = Dense(1, 1)
        layer.W = np.asarray(d["W"], dtype=np.float64)
        layer.b = np.asarray(d["b"], dtype=np.float64)
        layer.dW = np.zeros_like(layer.W)
        layer.db = np.zeros_like(layer.b)
        return layer
    if d["type"] == "batchnorm":
        layer = BatchNorm(len(d["gamma"]), momentum=d["momentum"], eps=d["eps"])
        layer.gamma = np.asarray(d["gamma"], dtype=np.float64)
        layer.beta = np.asarray(d["beta"], dtype=np.float64)
        layer.running_mean = np.asarray(d["running_mean"], dtype=np.float64)
        layer.running_var = np.asarray(d["running_var"], dtype=np.float64)
        return layer
    if d["type"] == "leakyrelu":
        return LeakyRelu(d["alpha"])
    raise ValueError(f"unknown layer type {d['type']!r}")


def load_autoencoder(path: str) -> AutoencoderModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != _FORMAT_VERSION or doc.get("family") != "autoencoder":
        raise ValueError(f"{path}: not a recognized autoencoder file")
    net = Mlp([_layer_from_dict(d) for d in doc["layers"]])
    model = AutoencoderModel(
        cfg=AutoencoderConfig.from_dict(doc["cfg"]),
        net=net,
        encoder_len=doc["encoder_len"],
        loss_history=list(doc["loss_history"]),
        best_epoch=doc["best_epoch"],
    )
    return model
