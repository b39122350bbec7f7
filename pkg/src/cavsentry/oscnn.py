"""Two-layer omni-scale 1D CNN: banks of every kernel size 1..L per layer.

Each layer concatenates its bank outputs, then batch-norm and ReLU. A global
average pool and an affine head produce two logits (normal, anomaly).

For speed the L banks of a layer are evaluated as one convolution of size L
whose kernel is zero outside each bank's support; gradients are sliced back
per bank, so the result is identical to running the banks separately.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import nn
from .nn import AdamState, BNParams, ConvParams
from .traces import LabeledWindowSet

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CSMD"
MODEL_VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 20
    in_channels: int = 3
    channels_per_kernel: int = 4
    n_classes: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.in_channels < 1 or self.channels_per_kernel < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def L(self) -> int:
        return self.window_len // 2

    @property
    def kernel_sizes(self) -> List[int]:
        return list(range(1, self.L + 1))

    @property
    def width(self) -> int:
        """Channels after concatenating one layer's banks."""
        return self.L * self.channels_per_kernel


def receptive_field_sums(cfg: ModelConfig) -> List[int]:
    """Every pairwise sum of a layer-1 and a layer-2 kernel size."""
    return sorted(a + b for a in cfg.kernel_sizes for b in cfg.kernel_sizes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    lr: float = 1e-4
    seed: int = 0
    shuffle: bool = True
    class_weights: Optional[tuple] = None  # e.g. inverse class frequency

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class OSCNN:
    """Parameters, batch-norm statistics and optimizer state of one network."""

    def __init__(self, cfg: ModelConfig, params: Dict[str, np.ndarray], bn: Dict[str, BNParams],
                 adam: Optional[AdamState] = None):
        self.cfg = cfg
        self.params = params
        self.bn = bn
        self.adam = adam or AdamState()
        self.training = False

    # -- parameter layout --------------------------------------------------
    def bank(self, layer: int, k: int) -> ConvParams:
        return ConvParams(self.params[f"l{layer}.k{k}.w"], self.params[f"l{layer}.k{k}.b"])

    def merged_conv(self, layer: int) -> ConvParams:
        cfg = self.cfg
        L, cpk = cfg.L, cfg.channels_per_kernel
        c_in = cfg.in_channels if layer == 1 else cfg.width
        w = np.zeros((cfg.width, c_in, L))
        b = np.empty(cfg.width)
        left_L = nn.same_padding(L)[0]
        for i, k in enumerate(cfg.kernel_sizes):
            off = left_L - nn.same_padding(k)[0]
            bank = self.bank(layer, k)
            w[i * cpk:(i + 1) * cpk, :, off:off + k] = bank.w
            b[i * cpk:(i + 1) * cpk] = bank.b
        return ConvParams(w, b)

    def split_conv_grad(self, layer: int, g: ConvParams, grads: dict) -> None:
        cfg = self.cfg
        cpk = cfg.channels_per_kernel
        left_L = nn.same_padding(cfg.L)[0]
        for i, k in enumerate(cfg.kernel_sizes):
            off = left_L - nn.same_padding(k)[0]
            grads[f"l{layer}.k{k}.w"] = g.w[i * cpk:(i + 1) * cpk, :, off:off + k].copy()
            grads[f"l{layer}.k{k}.b"] = g.b[i * cpk:(i + 1) * cpk].copy()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "OSCNN":
        params = {k: v.copy() for k, v in self.params.items()}
        bn = {}
        for name, p in self.bn.items():
            bn[name] = BNParams(params[f"{name}.gamma"], params[f"{name}.beta"],
                                p.running_mean.copy(), p.running_var.copy(), p.momentum, p.eps)
        adam = AdamState(self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.step,
                         {k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()})
        return OSCNN(self.cfg, params, bn, adam)


def build_model(cfg: ModelConfig, seed: int = 0) -> OSCNN:
    rng = np.random.default_rng(seed)
    params = {}
    for layer, c_in in ((1, cfg.in_channels), (2, cfg.width)):
        for k in cfg.kernel_sizes:
            bound = np.sqrt(1.0 / (c_in * k))
            params[f"l{layer}.k{k}.w"] = rng.uniform(-bound, bound, (cfg.channels_per_kernel, c_in, k))
            params[f"l{layer}.k{k}.b"] = np.zeros(cfg.channels_per_kernel)
    bn = {}
    for name in ("bn1", "bn2"):
        p = BNParams.fresh(cfg.width, cfg.bn_momentum, cfg.bn_eps)
        params[f"{name}.gamma"] = p.gamma
        params[f"{name}.beta"] = p.beta
        bn[name] = p
    bound = np.sqrt(1.0 / cfg.width)
    params["head.w"] = rng.uniform(-bound, bound, (cfg.n_classes, cfg.width))
    params["head.b"] = np.zeros(cfg.n_classes)
    return OSCNN(cfg, params, bn)


def _check_input(model: OSCNN, x: np.ndarray) -> None:
    cfg = model.cfg
    if x.ndim != 3 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.window_len:
        raise nn.ShapeError(
            f"expected input (B, {cfg.in_channels}, {cfg.window_len}); got {x.shape}")


def forward(model: OSCNN, x: np.ndarray, training: bool = False, keep_cache: bool = False):
    """Logits of shape (B, n_classes); with ``keep_cache`` also the backward cache."""
    _check_input(model, x)
    t = x.shape[2]
    cache = []
    h = x
    for layer in (1, 2):
        conv = model.merged_conv(layer)
        z = nn.conv1d_same(h, conv)
        assert z.shape[2] == t
        bn_out, bn_cache = nn.batchnorm_fwd(z, model.bn[f"bn{layer}"], training)
        a = nn.relu(bn_out)
        cache.append((h, conv, bn_cache, bn_out))
        h = a
    pooled = nn.global_avg_pool(h)
    logits = nn.linear(pooled, model.params["head.w"], model.params["head.b"])
    if keep_cache:
        return logits, (cache, pooled, t)
    return logits


def backward(model: OSCNN, cache, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
    layers, pooled, t = cache
    grads = {}
    g_pooled, grads["head.w"], grads["head.b"] = nn.linear_bwd(pooled, model.params["head.w"], grad_logits)
    g = nn.global_avg_pool_bwd(g_pooled, t)
    for layer in (2, 1):
        h, conv, bn_cache, bn_out = layers[layer - 1]
        g = nn.relu_bwd(bn_out, g)
        g, grads[f"bn{layer}.gamma"], grads[f"bn{layer}.beta"] = nn.batchnorm_bwd(bn_cache, g)
        g, g_conv = nn.conv1d_same_backward(h, conv, g)
        model.split_conv_grad(layer, g_conv, grads)
    return grads


def loss_and_grads(model: OSCNN, x: np.ndarray, labels, class_weights=None, training: bool = True):
    logits, cache = forward(model, x, training=training, keep_cache=True)
    loss, g = nn.softmax_xent(logits, labels, class_weights)
    return loss, backward(model, cache, g), logits


def train(model: OSCNN, train_set: LabeledWindowSet, cfg: TrainConfig = TrainConfig(),
          on_epoch=None):
    """Mini-batch Adam on softmax cross-entropy. Returns (model, history).

    ``history`` holds one dict per epoch with mean loss and train accuracy.
    ``on_epoch`` is called with each dict as it is produced.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("training set is empty")
    if len(np.unique(train_set.labels)) < 2:
        log.warning("training set holds a single class")
    model.adam.lr = cfg.lr
    rng = np.random.default_rng(cfg.seed)
    x_all, y_all = train_set.values, train_set.labels
    history = []
    model.training = True
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total_loss = 0.0
        correct = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads, logits = loss_and_grads(model, x_all[idx], y_all[idx], cfg.class_weights)
            nn.adam_step(model.params, grads, model.adam)
            total_loss += loss * len(idx)
            correct += int((argmax_normal_ties(logits) == y_all[idx]).sum())
        rec = {"epoch": epoch + 1, "loss": total_loss / n, "accuracy": correct / n}
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.5f acc %.4f", rec["epoch"], rec["loss"], rec["accuracy"])
    model.training = False
    return model, history


def argmax_normal_ties(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties resolve to class 0 (normal)
    return np.argmax(logits, axis=1)


def predict(model: OSCNN, windows, batch_size: int = 256):
    """Labels and softmax scores in inference mode."""
    x = windows.values if isinstance(windows, LabeledWindowSet) else np.asarray(windows, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.cfg.n_classes))
    logits = np.concatenate([forward(model, x[s:s + batch_size], training=False)
                             for s in range(0, len(x), batch_size)])
    return argmax_normal_ties(logits), nn.softmax(logits)


# --- model file ---------------------------------------------------------
# Layout documented in FORMATS.md.

def _tensors(model: OSCNN) -> Dict[str, np.ndarray]:
    out = {f"param/{k}": v for k, v in model.params.items()}
    for name, p in model.bn.items():
        out[f"buffer/{name}.running_mean"] = p.running_mean
        out[f"buffer/{name}.running_var"] = p.running_var
    for k in sorted(model.adam.m):
        out[f"adam_m/{k}"] = model.adam.m[k]
        out[f"adam_v/{k}"] = model.adam.v[k]
    return out


def save(model: OSCNN, path) -> None:
    header = {
        "config": asdict(model.cfg),
        "adam": {"lr": model.adam.lr, "beta1": model.adam.beta1, "beta2": model.adam.beta2,
                 "eps": model.adam.eps, "step": model.adam.step},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tensors = _tensors(model)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<B", MODEL_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.off, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ModelFileError(f"{self.path}: truncated model file")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> OSCNN:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    (version,) = r.unpack("<B")
    if version != MODEL_VERSION:
        raise ModelFileError(f"{path}: model file version {version} is not supported (expected {MODEL_VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError:
        raise ModelFileError(f"{path}: corrupt header") from None
    cfg = ModelConfig(**header["config"])
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * size), "<f8").reshape(shape).astype(np.float64)
    if r.off != len(data):
        raise ModelFileError(f"{path}: trailing bytes after tensors")
    template = build_model(cfg)
    params = {}
    for k, v in template.params.items():
        arr = tensors.get(f"param/{k}")
        if arr is None or arr.shape != v.shape:
            raise ModelFileError(f"{path}: missing or misshapen parameter {k}")
        params[k] = arr
    bn = {}
    for name, p in template.bn.items():
        bn[name] = BNParams(params[f"{name}.gamma"], params[f"{name}.beta"],
                            tensors[f"buffer/{name}.running_mean"], tensors[f"buffer/{name}.running_var"],
                            p.momentum, p.eps)
    a = header["adam"]
    m = {k[len("adam_m/"):]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], m, v)
    return OSCNN(cfg, params, bn, adam)
