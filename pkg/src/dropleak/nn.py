"""LeNet variant with an optional dropout defense, plus cross-entropy loss.

The network follows the geometry used by the reference gradient-leakage
experiments: three 5x5 sigmoid convolutions with 12 channels and a single
linear classifier. The defense inserts one dropout layer between the encoder's
last activation and the classifier.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .autodiff import Tape, Tensor, backward, conv2d, exp, logsumexp, reshape, sigmoid, take, transpose


@dataclass(frozen=True)
class Layer:
    kind: str  # conv2d | sigmoid | dropout | flatten | linear
    name: str = ""
    stride: int = 1
    pad: int = 0
    rate: float = 0.0


# Mask policies -------------------------------------------------------------

@dataclass(frozen=True)
class Resample:
    """Draw a fresh Bernoulli mask on every forward pass."""

    rng: object = None

    def generator(self):
        if isinstance(self.rng, np.random.Generator):
            return self.rng
        return np.random.default_rng(self.rng)


@dataclass(frozen=True)
class Fixed:
    """Use a caller-supplied mask (1 = kept, 0 = dropped)."""

    mask: np.ndarray


@dataclass(frozen=True)
class Expected:
    """Evaluation mode: inverted dropout reduces to the identity."""


def sample_mask(shape, rate, rng):
    """Bernoulli(1 - rate) mask of the given shape as float64 zeros and ones."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    return (rng.random(shape) >= rate).astype(np.float64)


def dropout(h, rate, policy):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    if rate == 0.0 or isinstance(policy, Expected):
        return h
    if isinstance(policy, Fixed):
        mask = np.asarray(policy.mask, dtype=np.float64)
        if mask.shape != h.shape:
            if mask.size != h.size:
                raise ValueError(f"mask shape {mask.shape} does not match dropout input {h.shape}")
            mask = mask.reshape(h.shape)
    elif isinstance(policy, Resample):
        mask = sample_mask(h.shape, rate, policy.generator())
    else:
        raise TypeError(f"unknown mask policy {policy!r}")
    return h * (mask * (1.0 / (1.0 - rate)))


# Model ---------------------------------------------------------------------

@dataclass
class Model:
    layers: list
    params: dict = field(default_factory=dict)
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    dropout_rate: float = 0.0

    @property
    def feature_shape(self):
        """Shape of one sample's encoder output (the dropout layer's input)."""
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.kind == "conv2d":
                wt = self.params[layer.name + ".weight"]
                c = wt.shape[0]
                k = wt.shape[2]
                h = _kernels.conv_out_size(h, k, layer.stride, layer.pad)
                w = _kernels.conv_out_size(w, k, layer.stride, layer.pad)
        return (c, h, w)

    def has_dropout(self):
        return any(layer.kind == "dropout" for layer in self.layers)

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def with_params(self, params):
        """Copy of this model with some parameters replaced."""
        merged = dict(self.params)
        for name, value in params.items():
            if name not in merged or merged[name].shape != np.shape(value):
                raise ValueError(f"parameter {name!r} missing or has wrong shape")
            merged[name] = np.array(value, dtype=np.float64)
        return Model(list(self.layers), merged, self.input_shape, self.num_classes, self.dropout_rate)


def build_lenet(num_classes=10, dropout_rate=0.0, seed=0, image_size=32, in_channels=3,
                init_scale=0.5):
    """Build the LeNet variant with weights drawn from U[-init_scale, init_scale].

    Layout: three conv(5x5, 12 channels) + sigmoid blocks with strides 2, 2, 1
    and padding 2, then dropout when ``dropout_rate > 0``, flatten and one
    linear layer. For 32x32 input the classifier sees 768 features.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    layers = []
    params = {}
    c, h = in_channels, image_size
    for idx, stride in enumerate((2, 2, 1), start=1):
        name = f"conv{idx}"
        params[name + ".weight"] = rng.uniform(-init_scale, init_scale, (12, c, 5, 5))
        params[name + ".bias"] = rng.uniform(-init_scale, init_scale, 12)
        layers += [Layer("conv2d", name, stride=stride, pad=2), Layer("sigmoid")]
        c, h = 12, _kernels.conv_out_size(h, 5, stride, 2)
        if h < 1:
            raise ValueError(f"image_size {image_size} too small for the encoder")
    if dropout_rate > 0:
        layers.append(Layer("dropout", rate=float(dropout_rate)))
    features = c * h * h
    params["fc.weight"] = rng.uniform(-init_scale, init_scale, (num_classes, features))
    params["fc.bias"] = rng.uniform(-init_scale, init_scale, num_classes)
    layers += [Layer("flatten"), Layer("linear", "fc")]
    return Model(layers, params, (in_channels, image_size, image_size), num_classes, float(dropout_rate))


def forward(model, x, mask_policy=None, params=None):
    """Logits of shape (N, num_classes).

    ``x`` is (C, H, W) or (N, C, H, W), as array or Tensor. ``params`` maps
    names to Tensors (e.g. tape leaves) and defaults to the model's arrays.
    """
    if mask_policy is None:
        mask_policy = Expected()
    if isinstance(mask_policy, Fixed) and not model.has_dropout():
        raise ValueError("fixed mask given to a model with no dropout layer")
    params = model.params if params is None else params
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim == 3:
        h = reshape(h, (1,) + h.shape)
    if h.shape[1:] != tuple(model.input_shape):
        raise ValueError(f"input shape {h.shape[1:]} does not match model input {model.input_shape}")
    for layer in model.layers:
        if layer.kind == "conv2d":
            h = conv2d(h, params[layer.name + ".weight"], params[layer.name + ".bias"],
                       stride=layer.stride, pad=layer.pad)
        elif layer.kind == "sigmoid":
            h = sigmoid(h)
        elif layer.kind == "dropout":
            h = dropout(h, layer.rate, mask_policy)
        elif layer.kind == "flatten":
            h = reshape(h, (h.shape[0], -1))
        elif layer.kind == "linear":
            h = h @ transpose(params[layer.name + ".weight"]) + params[layer.name + ".bias"]
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h


def cross_entropy(logits, label):
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is (K,) or (N, K); ``label`` an int or a length-N sequence.
    """
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    n, k = logits.shape
    labels = np.atleast_1d(np.asarray(label)).astype(np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k}): {labels}")
    picked = take(logits, np.arange(n) * k + labels)
    loss = logsumexp(logits, axis=1).sum() - picked.sum()
    return loss * (1.0 / n) if n > 1 else loss


def soft_cross_entropy(logits, target_logits):
    """Cross-entropy against ``softmax(target_logits)``; used for joint label search."""
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if target_logits.ndim == 1:
        target_logits = reshape(target_logits, (1, target_logits.shape[0]))
    log_probs = logits - logsumexp(logits, axis=1)
    target = softmax(target_logits)
    return -(target * log_probs).sum()


def softmax(logits, axis=-1):
    return exp(logits - logsumexp(logits, axis=axis))


def param_gradients(model, x, label, mask_policy=None, create_graph=False):
    """Per-parameter gradients of the cross-entropy loss, as numpy arrays."""
    with Tape() as tape:
        leaves = {name: tape.watch(p) for name, p in model.params.items()}
        loss = cross_entropy(forward(model, x, mask_policy, params=leaves), label)
        grads = backward(loss, list(leaves.values()), create_graph=create_graph)
    return {name: g.data for name, g in zip(leaves, grads)}


# Serialization --------------------------------------------------------------

MAGIC = b"GLKM"
FORMAT_VERSION = 1


def save_params(params, path):
    """Write parameters to the flat little-endian GLKM binary format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
        for name, value in params.items():
            value = np.asarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value).tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a GLKM parameter file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 8
    params = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims))
            if pos + 8 * count > len(blob):
                raise ValueError(f"{path}: truncated data for {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated parameter file") from exc
    return params
