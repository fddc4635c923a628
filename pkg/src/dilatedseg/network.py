"""The ten-layer dilated classification network and its variants.

A network is described by a :class:`NetworkConfig` (an ordered tuple of
:class:`LayerSpec`) and parameterised by a *weight set*: a list with one dict
per layer holding ``weight`` and, depending on the layer flags, ``bias`` or
``gamma``/``beta``/``running_mean``/``running_var`` arrays.

Each layer computes ``conv -> [batchnorm] -> activation -> [dropout]``.
"""
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import (BadMagicError, ConfigError, ShapeError, ShapeInconsistencyError,
                     TruncatedPayloadError, VersionMismatchError, ChecksumError, FormatError)

ACTIVATIONS = ("none", "elu", "softmax")

TABLE1_KERNELS = (3, 3, 3, 3, 3, 3, 3, 3, 1, 1)
TABLE1_DILATIONS = (1, 1, 2, 4, 8, 16, 32, 1, 1, 1)
NUM_CLASSES = 3
CLASS_NAMES = ("background", "myocardium", "blood_pool")


@dataclass(frozen=True)
class LayerSpec:
    kernel_size: int
    dilation: int
    out_channels: int
    has_bias: bool = True
    has_batchnorm: bool = False
    has_dropout: bool = False
    activation: str = "elu"

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1 or self.out_channels < 1:
            raise ShapeError(f"invalid layer {self}")
        if self.has_batchnorm and self.has_bias:
            raise ShapeError("batch-normalised layers carry no convolution bias")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class NetworkConfig:
    layers: Tuple[LayerSpec, ...]
    in_channels: int = 1
    dropout_rate: float = 0.5
    elu_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        last = self.layers[-1]
        if last.out_channels >= 2 and last.activation != "softmax":
            raise ShapeError("the final layer must end in a softmax")
        if any(l.activation == "softmax" for l in self.layers[:-1]):
            raise ShapeError("softmax is only allowed on the final layer")

    @property
    def num_classes(self):
        return self.layers[-1].out_channels

    @property
    def field(self):
        return receptive_field(self)[-1]

    @property
    def padding(self):
        """Zero padding per side that makes output extent equal input extent."""
        return (self.field - 1) // 2

    def in_channels_of(self, index):
        return self.in_channels if index == 0 else self.layers[index - 1].out_channels


def default_config(width=32, dilated=True, classifier_width=None, dropout_rate=0.5):
    """Table 1 architecture; ``width`` scales the feature layers.

    The classification layer keeps the 192/32 ratio unless
    ``classifier_width`` is given. ``dilated=False`` sets every dilation to 1.
    """
    if classifier_width is None:
        classifier_width = 6 * width
    channels = [width] * 8 + [classifier_width, NUM_CLASSES]
    dilations = TABLE1_DILATIONS if dilated else (1,) * 10
    layers = []
    for i, (k, d, c) in enumerate(zip(TABLE1_KERNELS, dilations, channels)):
        bn = i in (7, 8)
        act = "softmax" if i == 9 else "elu"
        layers.append(LayerSpec(k, d, c, has_bias=not bn, has_batchnorm=bn,
                                has_dropout=bn, activation=act))
    return NetworkConfig(tuple(layers), in_channels=1, dropout_rate=dropout_rate)


def receptive_field(config: NetworkConfig) -> List[int]:
    fields = []
    f = 1
    for layer in config.layers:
        f += (layer.kernel_size - 1) * layer.dilation
        fields.append(f)
    return fields


def parameter_count(config: NetworkConfig):
    """Per-layer and total parameter counts.

    Batch normalisation counts four values per channel (scale, shift and both
    running statistics).
    """
    per_layer = []
    for i, layer in enumerate(config.layers):
        n = layer.kernel_size ** 2 * config.in_channels_of(i) * layer.out_channels
        if layer.has_bias:
            n += layer.out_channels
        if layer.has_batchnorm:
            n += 4 * layer.out_channels
        per_layer.append(n)
    return per_layer, sum(per_layer)


def output_extent(config: NetworkConfig, extent: int) -> int:
    return extent - (config.field - 1)


# -- configuration files ----------------------------------------------------

CONFIG_KEYS = ("in_channels", "kernels", "dilations", "channels",
               "batchnorm_layers", "dropout_layers", "dropout_rate", "elu_alpha")


def _int_list(text, key, lineno):
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key} expects a list of integers, got {text!r}", lineno) from None


def config_from_entries(entries) -> NetworkConfig:
    """Build a config from ``(key, value, lineno)`` triples.

    See :func:`dilatedseg.imaging_io.read_config_entries`. Layer indices in
    ``batchnorm_layers``/``dropout_layers`` are 1-based.
    """
    values = {}
    for key, value, lineno in entries:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = (value, lineno)
    for key in ("kernels", "dilations", "channels"):
        if key not in values:
            raise ConfigError(f"missing required key {key!r}")
    kernels = _int_list(values["kernels"][0], "kernels", values["kernels"][1])
    dilations = _int_list(values["dilations"][0], "dilations", values["dilations"][1])
    channels = _int_list(values["channels"][0], "channels", values["channels"][1])
    if not (len(kernels) == len(dilations) == len(channels)) or not kernels:
        raise ConfigError("kernels, dilations and channels must have the same nonzero length",
                          values["channels"][1])
    n = len(kernels)

    def layer_set(key):
        if key not in values:
            return set()
        text, lineno = values[key]
        idx = _int_list(text, key, lineno)
        if any(i < 1 or i > n for i in idx):
            raise ConfigError(f"{key} indices must lie in 1..{n}", lineno)
        return {i - 1 for i in idx}

    bn = layer_set("batchnorm_layers")
    do = layer_set("dropout_layers")

    def scalar(key, cast, default):
        if key not in values:
            return default
        text, lineno = values[key]
        try:
            return cast(text)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {text!r}", lineno) from None

    layers = []
    for i in range(n):
        last = i == n - 1
        act = ("softmax" if channels[i] >= 2 else "none") if last else "elu"
        try:
            layers.append(LayerSpec(kernels[i], dilations[i], channels[i], has_bias=i not in bn,
                                    has_batchnorm=i in bn, has_dropout=i in do, activation=act))
        except ShapeError as exc:
            raise ConfigError(str(exc), values["kernels"][1]) from None
    return NetworkConfig(tuple(layers), in_channels=scalar("in_channels", int, 1),
                         dropout_rate=scalar("dropout_rate", float, 0.5),
                         elu_alpha=scalar("elu_alpha", float, 1.0))


def config_to_entries(config: NetworkConfig):
    """Inverse of :func:`config_from_entries`, as an ordered dict of strings."""
    ls = config.layers

    def join(xs):
        return " ".join(str(x) for x in xs)

    return {
        "in_channels": str(config.in_channels),
        "kernels": join(l.kernel_size for l in ls),
        "dilations": join(l.dilation for l in ls),
        "channels": join(l.out_channels for l in ls),
        "batchnorm_layers": join(i + 1 for i, l in enumerate(ls) if l.has_batchnorm),
        "dropout_layers": join(i + 1 for i, l in enumerate(ls) if l.has_dropout),
        "dropout_rate": repr(config.dropout_rate),
        "elu_alpha": repr(config.elu_alpha),
    }


# -- weights ----------------------------------------------------------------

TRAINABLE = ("weight", "bias", "gamma", "beta")


def expected_shapes(config: NetworkConfig):
    shapes = []
    for i, layer in enumerate(config.layers):
        k = layer.kernel_size
        s = {"weight": (layer.out_channels, config.in_channels_of(i), k, k)}
        if layer.has_bias:
            s["bias"] = (layer.out_channels,)
        if layer.has_batchnorm:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                s[name] = (layer.out_channels,)
        shapes.append(s)
    return shapes


def init_weights(config: NetworkConfig, rng, dtype=np.float32):
    """He initialisation: N(0, 2 / fan_in) weights, zero bias, unit BN scale."""
    weights = []
    for i, layer in enumerate(config.layers):
        k = layer.kernel_size
        fan_in = k * k * config.in_channels_of(i)
        shape = (layer.out_channels, config.in_channels_of(i), k, k)
        p = {"weight": (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)}
        c = layer.out_channels
        if layer.has_bias:
            p["bias"] = np.zeros(c, dtype)
        if layer.has_batchnorm:
            p["gamma"] = np.ones(c, dtype)
            p["beta"] = np.zeros(c, dtype)
            p["running_mean"] = np.zeros(c, dtype)
            p["running_var"] = np.ones(c, dtype)
        weights.append(p)
    return weights


def check_weights(config: NetworkConfig, weights):
    if len(weights) != len(config.layers):
        raise ShapeError(f"weight set has {len(weights)} layers, config has {len(config.layers)}")
    for i, (exp, got) in enumerate(zip(expected_shapes(config), weights)):
        if set(exp) != set(got):
            raise ShapeError(f"layer {i + 1}: parameters {sorted(got)} != {sorted(exp)}")
        for name, shape in exp.items():
            if got[name].shape != shape:
                raise ShapeError(f"layer {i + 1} {name}: shape {got[name].shape} != {shape}")


def cast_weights(weights, dtype):
    return [{k: v.astype(dtype) for k, v in p.items()} for p in weights]


# -- forward / backward -----------------------------------------------------

@dataclass
class LayerCache:
    x: np.ndarray
    z: np.ndarray = None
    bn: Optional[tc.BatchNormCache] = None
    y: np.ndarray = None
    mask: Optional[np.ndarray] = None


@dataclass
class ForwardCache:
    layers: List[LayerCache] = field(default_factory=list)
    logits: np.ndarray = None


def _kernel(layer, p):
    return tc.ConvKernel(p["weight"], p.get("bias"), layer.dilation)


def forward(config: NetworkConfig, weights, x, train=False, rng=None, chunk=None):
    """Run the network on ``x`` of shape ``(B, in_channels, H, W)``.

    Returns ``(probs, cache)``; ``cache`` is None in inference mode. Inference
    may process the batch in pieces of ``chunk`` samples, which gives
    identical results since no statistic couples samples.
    """
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"expected input (B, {config.in_channels}, H, W), got {x.shape}")
    f = config.field
    if x.shape[2] < f or x.shape[3] < f:
        raise ShapeError(f"input extent {x.shape[2]}x{x.shape[3]} below the minimum {f}x{f}")
    if not train and chunk is not None and x.shape[0] > chunk:
        parts = [forward(config, weights, x[s:s + chunk])[0] for s in range(0, x.shape[0], chunk)]
        return np.concatenate(parts), None
    if train and rng is None and any(l.has_dropout for l in config.layers):
        raise ValueError("train mode needs a random generator for dropout")

    cache = ForwardCache() if train else None
    a = x
    for layer, p in zip(config.layers, weights):
        lc = LayerCache(x=a) if train else None
        z = tc.conv2d(a, _kernel(layer, p))
        if layer.has_batchnorm:
            z, bnc = tc.batchnorm(z, p["gamma"], p["beta"], p["running_mean"],
                                  p["running_var"], train=train)
            if train:
                lc.bn = bnc
        if layer.activation == "elu":
            a = tc.elu(z, config.elu_alpha)
            if train:
                lc.z, lc.y = z, a
        elif layer.activation == "softmax":
            if train:
                cache.logits = z
            a = tc.softmax_channels(z)
        else:
            a = z
        if layer.has_dropout and train:
            a, lc.mask = tc.dropout(a, config.dropout_rate, rng, train=True)
        if train:
            cache.layers.append(lc)
    return a, cache


def backward(config: NetworkConfig, weights, cache: ForwardCache, grad_logits):
    """Gradients of the loss w.r.t. every trainable parameter.

    ``grad_logits`` is the gradient w.r.t. the pre-softmax outputs of the
    final layer (as returned by :func:`tensor_core.cross_entropy`). Returns a
    list of dicts keyed like the weight set (trainable entries only).
    """
    grads = [None] * len(config.layers)
    g = grad_logits
    for i in range(len(config.layers) - 1, -1, -1):
        layer, p, lc = config.layers[i], weights[i], cache.layers[i]
        gi = {}
        if layer.has_dropout:
            g = g * lc.mask
        if layer.activation == "elu":
            g = tc.elu_backward(g, lc.z, lc.y, config.elu_alpha)
        if layer.has_batchnorm:
            g, gi["gamma"], gi["beta"] = tc.batchnorm_backward(g, lc.bn, p["gamma"])
        gx, gi["weight"], gb = tc.conv2d_backward(g, lc.x, _kernel(layer, p), input_grad=i > 0)
        if layer.has_bias:
            gi["bias"] = gb
        grads[i] = gi
        g = gx
    return grads


def updated_running_stats(config: NetworkConfig, weights, cache: ForwardCache):
    """Weight set with batchnorm running averages advanced by one batch."""
    out = []
    for layer, p, lc in zip(config.layers, weights, cache.layers):
        if layer.has_batchnorm:
            p = dict(p)
            p["running_mean"], p["running_var"] = tc.update_running_stats(
                p["running_mean"], p["running_var"], lc.bn)
        out.append(p)
    return out


# -- weight file ------------------------------------------------------------

MAGIC = b"DCNW"
VERSION = 1
_ACT_CODE = {"none": 0, "elu": 1, "softmax": 2}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def _layer_flags(layer: LayerSpec):
    return (int(layer.has_bias) | int(layer.has_batchnorm) << 1 | int(layer.has_dropout) << 2
            | _ACT_CODE[layer.activation] << 3)


def _param_order(layer: LayerSpec):
    names = ["weight"]
    if layer.has_bias:
        names.append("bias")
    if layer.has_batchnorm:
        names += ["gamma", "beta", "running_mean", "running_var"]
    return names


def encode_weights(config: NetworkConfig, weights) -> bytes:
    check_weights(config, weights)
    buf = bytearray(MAGIC)
    buf += struct.pack("<BH", VERSION, len(config.layers))
    for layer in config.layers:
        buf += struct.pack("<BHHB", layer.kernel_size, layer.dilation, layer.out_channels,
                           _layer_flags(layer))
    for layer, p in zip(config.layers, weights):
        for name in _param_order(layer):
            arr = np.ascontiguousarray(p[name], dtype="<f4")
            buf += struct.pack("<B", arr.ndim)
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"truncated payload: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(data: bytes):
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise VersionMismatchError(f"weight file version {version}, this build reads {VERSION}")
    (n_layers,) = r.unpack("<H")
    headers = [r.unpack("<BHHB") for _ in range(n_layers)]
    layers = []
    try:
        for k, d, c, flags in headers:
            layers.append(LayerSpec(k, d, c, has_bias=bool(flags & 1), has_batchnorm=bool(flags & 2),
                                    has_dropout=bool(flags & 4),
                                    activation=_CODE_ACT.get((flags >> 3) & 3, "invalid")))
    except ShapeError as exc:
        raise FormatError(f"invalid layer header: {exc}") from None

    tensors = []
    for layer in layers:
        p = {}
        for name in _param_order(layer):
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I")
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
            p[name] = arr.astype(np.float32)
        tensors.append(p)
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} unexpected trailing bytes after checksum")
    if zlib.crc32(bytes(data[:-4])) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")

    in_channels = tensors[0]["weight"].shape[1] if tensors and tensors[0]["weight"].ndim == 4 else 1
    try:
        config = NetworkConfig(tuple(layers), in_channels=in_channels)
        check_weights(config, tensors)
    except ShapeError as exc:
        raise ShapeInconsistencyError(f"shape inconsistency: {exc}") from None
    return config, tensors


def save_weights(config: NetworkConfig, weights, path):
    data = encode_weights(config, weights)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise FormatError(f"cannot write weight file {path}: {exc}") from exc


def load_weights(path):
    """Returns ``(config, weights)``; weights are float32."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read weight file {path}: {exc}") from exc
    return decode_weights(data)
