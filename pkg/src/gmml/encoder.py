"""MLP feature encoder with a detachable linear projection head.

The encoder is a small fully-connected network trained by mini-batch SGD
with Nesterov momentum under any of the five losses. The final linear
projection head participates in training only; evaluation embeds with the
head detached. Checkpoints round-trip through a versioned binary format
with a trailing CRC-32.
"""

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .losses import LOSS_KINDS, batch_loss
from .rng import stream

__all__ = [
    "Layer",
    "MlpParams",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "init_mlp",
    "forward",
    "backward",
    "lr_schedule",
    "sgd_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

_ACTIVATIONS = ("identity", "relu")


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"
    is_head: bool = False

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights))
        self.bias = np.asarray(self.bias).ravel()
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError("bias length does not match layer output width")


@dataclass
class MlpParams:
    layers: list

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weights.shape[1] != prev.weights.shape[0]:
                raise ValueError(
                    f"layer dims do not chain: {prev.weights.shape} -> {cur.weights.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    def body(self):
        return [l for l in self.layers if not l.is_head]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weights.copy(), l.bias.copy(), l.activation, l.is_head) for l in self.layers]
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [
                Layer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation, l.is_head)
                for l in self.layers
            ]
        )


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 40
    warmup_epochs: int = 10
    base_lr: float = 0.003
    decay_epoch: int = 28
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_kind: str = "gm"
    p: float = 1.0
    seed: int = 0
    precision: str = "64-bit"

    def __post_init__(self):
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.decay_epoch > self.epochs:
            raise ValueError("decay_epoch must not exceed epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.precision not in ("64-bit", "32-bit"):
            raise ValueError("precision must be '64-bit' or '32-bit'")


@dataclass
class EpochRecord:
    mean_loss: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)


def init_mlp(in_dim, hidden_dims, head_dim, seed=0, rng=None) -> MlpParams:
    """He-style uniform fan-in initialization; the head is a linear layer."""
    if rng is None:
        rng = stream(seed, "init")
    layers = []
    prev = in_dim
    for width in hidden_dims:
        bound = np.sqrt(6.0 / prev)
        layers.append(
            Layer(rng.uniform(-bound, bound, size=(width, prev)), np.zeros(width), "relu")
        )
        prev = width
    if head_dim is not None:
        bound = np.sqrt(6.0 / prev)
        layers.append(
            Layer(
                rng.uniform(-bound, bound, size=(head_dim, prev)),
                np.zeros(head_dim),
                "identity",
                is_head=True,
            )
        )
    return MlpParams(layers)


def _apply_activation(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(params: MlpParams, inputs, include_head: bool = True) -> np.ndarray:
    """Embed inputs; with include_head=False head layers are skipped entirely."""
    X = np.atleast_2d(np.asarray(inputs))
    if X.shape[1] != params.in_dim:
        raise ValueError(f"input dim {X.shape[1]} does not match encoder dim {params.in_dim}")
    layers = params.layers if include_head else params.body()
    for layer in layers:
        X = _apply_activation(X @ layer.weights.T + layer.bias, layer.activation)
    return X


def _forward_cached(params: MlpParams, X):
    """Forward pass retaining pre-activations and layer inputs for backprop."""
    acts = [X]
    pre = []
    for layer in params.layers:
        z = acts[-1] @ layer.weights.T + layer.bias
        pre.append(z)
        acts.append(_apply_activation(z, layer.activation))
    return acts, pre


def backward(params: MlpParams, inputs, upstream) -> list:
    """Gradients of the loss w.r.t. every weight and bias (head included).

    `upstream` is dL/d(output features) from a prior forward with the head.
    Returns one (dW, db) pair per layer.
    """
    X = np.atleast_2d(np.asarray(inputs))
    G = np.atleast_2d(np.asarray(upstream))
    acts, pre = _forward_cached(params, X)
    if G.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {G.shape} does not match output {acts[-1].shape}")
    grads = [None] * len(params.layers)
    g = G
    for li in reversed(range(len(params.layers))):
        layer = params.layers[li]
        if layer.activation == "relu":
            g = g * (pre[li] > 0)
        grads[li] = (g.T @ acts[li], g.sum(axis=0))
        if li > 0:
            g = g @ layer.weights
    return grads


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Linear warmup to base_lr, then a single step decay at decay_epoch."""
    if not (0 <= epoch < config.epochs):
        raise ValueError(f"epoch {epoch} out of range [0, {config.epochs})")
    if epoch >= config.decay_epoch:
        return config.base_lr / config.decay_factor
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    return config.base_lr


def sgd_step(params: MlpParams, grads, velocity, lr, momentum, weight_decay):
    """One Nesterov momentum update, in place.

    Weight decay is added to the raw gradient before the momentum update:
    g <- dL/dw + wd*w; v <- mu*v + g; w <- w - lr*(g + mu*v).
    """
    if velocity is None:
        velocity = [
            (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers
        ]
    if len(grads) != len(params.layers):
        raise ValueError("gradient count does not match layer count")
    for layer, (dW, db), (vW, vb) in zip(params.layers, grads, velocity):
        if dW.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ValueError("gradient shape does not match parameter shape")
        gW = dW + weight_decay * layer.weights
        gb = db + weight_decay * layer.bias
        vW *= momentum
        vW += gW
        vb *= momentum
        vb += gb
        layer.weights -= lr * (gW + momentum * vW)
        layer.bias -= lr * (gb + momentum * vb)
    return params, velocity


def _class_balanced_batch(rng, class_indices, classes, batch_size):
    """Draw a batch in which every present class has at least two samples.

    Classes are drawn for batch_size // 2 pair slots; each class drawn k
    times contributes 2k distinct samples (capped at its population).
    """
    slots = max(batch_size // 2, 1)
    drawn = rng.choice(len(classes), size=slots, replace=True)
    counts = np.bincount(drawn, minlength=len(classes))
    idx = []
    for ci in np.nonzero(counts)[0]:
        pool = class_indices[classes[ci]]
        need = min(2 * int(counts[ci]), len(pool))
        idx.extend(rng.choice(pool, size=need, replace=False))
    return np.array(idx, dtype=np.int64)


def train(features, labels, params: MlpParams, config: TrainConfig, loss_kwargs=None):
    """Train the encoder; returns (trained params, history).

    Fully reproducible from config.seed in 64-bit single-threaded mode. Loss
    terms are always accumulated in 64-bit; '32-bit' precision applies to the
    encoder parameters and activations only.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    if X.shape[0] == 0:
        raise ValueError("training split is empty")
    classes, counts = np.unique(y, return_counts=True)
    small = classes[counts < 2]
    if small.size:
        raise ValueError(f"class with fewer than two samples: {int(small[0])}")
    loss_kwargs = loss_kwargs or {}

    dtype = np.float32 if config.precision == "32-bit" else np.float64
    params = params.astype(dtype)
    Xc = X.astype(dtype)
    class_indices = {int(c): np.nonzero(y == c)[0] for c in classes}
    n_batches = max(X.shape[0] // config.batch_size, 1)

    velocity = None
    history = TrainHistory()
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        rng = stream(config.seed, f"batches:{epoch}")
        epoch_losses = []
        t0 = time.perf_counter()
        for _ in range(n_batches):
            idx = _class_balanced_batch(rng, class_indices, classes, config.batch_size)
            feats = forward(params, Xc[idx], include_head=True)
            value, fgrads = batch_loss(
                feats, y[idx], config.loss_kind, config.p, **loss_kwargs
            )
            grads = backward(params, Xc[idx], fgrads.astype(dtype))
            params, velocity = sgd_step(
                params, grads, velocity, lr, config.momentum, config.weight_decay
            )
            epoch_losses.append(value)
        history.epochs.append(
            EpochRecord(
                float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                lr,
                time.perf_counter() - t0,
            )
        )
    return params, history


# --- checkpoint format -------------------------------------------------------

_CKPT_MAGIC = b"GMML"
_CKPT_VERSION = 1
_ACT_CODES = {"identity": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class CheckpointError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def save_checkpoint(params: MlpParams, path) -> None:
    """Versioned binary checkpoint: header, f64 LE payload, trailing CRC-32."""
    parts = [
        _CKPT_MAGIC,
        struct.pack("<II", _CKPT_VERSION, len(params.layers)),
    ]
    for layer in params.layers:
        out_dim, in_dim = layer.weights.shape
        parts.append(
            struct.pack("<IIBB", out_dim, in_dim, _ACT_CODES[layer.activation], int(layer.is_head))
        )
    for layer in params.layers:
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError("bad magic", "bad-magic")
    if len(raw) < 12 + 4:
        raise CheckpointError("truncated header", "truncated")
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointError("checksum mismatch", "crc-mismatch")
    version, n_layers = struct.unpack_from("<II", body, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", "bad-version")
    off = 12
    headers = []
    for _ in range(n_layers):
        out_dim, in_dim, act, is_head = struct.unpack_from("<IIBB", body, off)
        off += 10
        headers.append((out_dim, in_dim, act, is_head))
    layers = []
    for out_dim, in_dim, act, is_head in headers:
        n_w = out_dim * in_dim
        end = off + 8 * (n_w + out_dim)
        if end > len(body):
            raise CheckpointError("truncated payload", "truncated")
        W = np.frombuffer(body, dtype="<f8", count=n_w, offset=off).reshape(out_dim, in_dim)
        off += 8 * n_w
        b = np.frombuffer(body, dtype="<f8", count=out_dim, offset=off)
        off += 8 * out_dim
        layers.append(Layer(W.copy(), b.copy(), _ACT_NAMES[act], bool(is_head)))
    return MlpParams(layers)
