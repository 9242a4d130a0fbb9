"""Small dense feedforward networks with hand-rolled backprop and SGD-momentum.

A network is a list of linear layers with ReLU after every layer except the
last, so a two-entry layer-size list is a single linear map (used for the
classifier heads). The trainable target model shares one extractor between two
heads; backward calls accumulate into the extractor's gradient buffers so both
loss terms contribute to a single SGD step.

Checkpoint format (used for both source and target models): magic b"PRDA",
format version u32, network count u32, per-network layer-size lists (u32
counts and entries), then for each network all layer parameters as
little-endian float64 (weights row-major, then biases), closed by a u64
checksum of all preceding bytes (first 8 bytes of their SHA-256).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import accesslog
from .core_math import softmax
from .errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidStateError,
    TrainingDivergedError,
    UsageError,
)

CHECKPOINT_MAGIC = b"PRDA"
CHECKPOINT_VERSION = 1


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations retained for backprop."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


@dataclass
class NetworkParams:
    """Weights, biases, and matching gradient / momentum buffers."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    grad_w: list[np.ndarray]
    grad_b: list[np.ndarray]
    vel_w: list[np.ndarray]
    vel_b: list[np.ndarray]
    cache: ForwardCache | None = None

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def init_network(layer_sizes, rng: np.random.Generator) -> NetworkParams:
    """Fresh network with uniform(-s, s) weights, s = sqrt(6 / (fan_in + fan_out))."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ConfigurationError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(
        layer_sizes=sizes,
        weights=weights,
        biases=biases,
        grad_w=[np.zeros_like(w) for w in weights],
        grad_b=[np.zeros_like(b) for b in biases],
        vel_w=[np.zeros_like(w) for w in weights],
        vel_b=[np.zeros_like(b) for b in biases],
    )


def copy_network(net: NetworkParams) -> NetworkParams:
    """Bitwise copy of weights and biases; gradient and momentum buffers start at zero."""
    return NetworkParams(
        layer_sizes=net.layer_sizes,
        weights=[w.copy() for w in net.weights],
        biases=[b.copy() for b in net.biases],
        grad_w=[np.zeros_like(w) for w in net.weights],
        grad_b=[np.zeros_like(b) for b in net.biases],
        vel_w=[np.zeros_like(w) for w in net.weights],
        vel_b=[np.zeros_like(b) for b in net.biases],
    )


def zero_grads(net: NetworkParams) -> None:
    for g in net.grad_w:
        g.fill(0.0)
    for g in net.grad_b:
        g.fill(0.0)


def net_forward(net: NetworkParams, x, train: bool = False) -> np.ndarray:
    """Run inputs through the network; with train=True, cache activations for backward."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise InvalidInputError(
            f"input dimension {X.shape[-1] if X.ndim else 0} does not match network input {net.input_dim}"
        )
    inputs, preacts = [], []
    a = X
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w + b
        preacts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    if train:
        net.cache = ForwardCache(inputs=inputs, preacts=preacts)
    return a[0] if single else a


def net_backward(net: NetworkParams, grad_out) -> np.ndarray:
    """Backprop grad_out (dL/d output) through the cached forward pass.

    Accumulates into the network's gradient buffers and returns dL/d input,
    so gradients can flow on into an upstream network.
    """
    if net.cache is None:
        raise UsageError("backward called without a cached forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    cache = net.cache
    if g.shape != cache.preacts[-1].shape:
        raise UsageError("gradient shape does not match the cached forward batch")
    dz = g  # final layer is linear
    da = dz
    for i in range(net.n_layers - 1, -1, -1):
        net.grad_w[i] += cache.inputs[i].T @ dz
        net.grad_b[i] += dz.sum(axis=0)
        da = dz @ net.weights[i].T
        if i > 0:
            dz = da * (cache.preacts[i - 1] > 0.0)
    return da


def sgd_step(net: NetworkParams, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v; grads cleared."""
    for g in (*net.grad_w, *net.grad_b):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient in SGD step")
    for params, grads, vels in (
        (net.weights, net.grad_w, net.vel_w),
        (net.biases, net.grad_b, net.vel_b),
    ):
        for p, g, v in zip(params, grads, vels):
            v *= momentum
            v += g + weight_decay * p
            p -= lr * v
            g.fill(0.0)
    for p in (*net.weights, *net.biases):
        if not np.all(np.isfinite(p)):
            raise TrainingDivergedError("non-finite parameters after SGD step")


@dataclass
class LrSchedule:
    """Polynomial decay lr(p) = lr0 * (1 + a*p)^(-b) over relative progress p in [0, 1]."""

    lr0: float
    a: float = 10.0
    b: float = 0.75

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")


def lr_at(schedule: LrSchedule, p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"relative progress {p} outside [0, 1]")
    return schedule.lr0 * (1.0 + schedule.a * p) ** (-schedule.b)


@dataclass
class ForwardResult:
    embedding: np.ndarray
    logits: np.ndarray
    prob: np.ndarray


def forward(extractor: NetworkParams, head: NetworkParams, x, train: bool = False) -> ForwardResult:
    """Embed x and classify it: returns (embedding, logits, softmax probabilities)."""
    emb = net_forward(extractor, x, train=train)
    logits = net_forward(head, emb, train=train)
    return ForwardResult(embedding=emb, logits=logits, prob=softmax(logits))


def _param_bytes(nets) -> bytes:
    chunks = []
    for net in nets:
        for w, b in zip(net.weights, net.biases):
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(chunks)


def param_digest(nets) -> str:
    """SHA-256 hex digest over all parameter bytes, in layer order."""
    return hashlib.sha256(_param_bytes(nets)).hexdigest()


@dataclass
class SourceModel:
    """Frozen pre-trained extractor + classifier; digest pins the loaded parameters."""

    extractor: NetworkParams
    classifier: NetworkParams
    digest: str = ""

    def __post_init__(self):
        if self.extractor.output_dim != self.classifier.input_dim:
            raise ConfigurationError(
                f"classifier input {self.classifier.input_dim} does not match "
                f"extractor output {self.extractor.output_dim}"
            )
        if not self.digest:
            self.digest = param_digest([self.extractor, self.classifier])

    def verify_digest(self) -> None:
        if param_digest([self.extractor, self.classifier]) != self.digest:
            raise InvalidStateError("frozen source model parameters changed after load")


@dataclass
class TargetModel:
    """Trainable extractor with two classifier heads sharing its embedding space."""

    extractor: NetworkParams
    head_s2t: NetworkParams
    head_t: NetworkParams

    def __post_init__(self):
        e = self.extractor.output_dim
        if self.head_s2t.input_dim != e or self.head_t.input_dim != e:
            raise ConfigurationError("both heads must consume the extractor's embedding dimension")
        if self.head_s2t.output_dim != self.head_t.output_dim:
            raise ConfigurationError("heads must share the class count")

    @property
    def n_classes(self) -> int:
        return self.head_t.output_dim


def init_target_from_source(src: SourceModel) -> TargetModel:
    """Bitwise-initialize the target model from the source; momentum starts at zero."""
    return TargetModel(
        extractor=copy_network(src.extractor),
        head_s2t=copy_network(src.classifier),
        head_t=copy_network(src.classifier),
    )


def backward_cross_entropy(model: TargetModel, labels, sample_weights, head: str, scale: float = 1.0) -> None:
    """Accumulate gradients of the batch-mean weighted cross-entropy for one head.

    Requires a train=True forward pass through the selected head (and the
    extractor) on the same batch. Gradients flow into the head and into the
    shared extractor; samples with weight 0 contribute exactly zero.
    """
    if head == "s2t":
        head_net = model.head_s2t
    elif head == "t":
        head_net = model.head_t
    else:
        raise UsageError(f"unknown head selector {head!r}; expected 's2t' or 't'")
    if head_net.cache is None or model.extractor.cache is None:
        raise UsageError("backward_cross_entropy requires cached forward activations")
    logits = head_net.cache.preacts[-1]
    batch = logits.shape[0]
    y = np.asarray(labels, dtype=np.int64)
    w = np.asarray(sample_weights, dtype=np.float64)
    if y.shape != (batch,) or w.shape != (batch,):
        raise UsageError("labels/weights do not match the cached forward batch")
    if np.any((w != 0.0) & (w != 1.0)):
        raise InvalidInputError("sample weights must be 0 or 1")
    dlogits = softmax(logits)
    dlogits[np.arange(batch), y] -= 1.0
    dlogits *= (w * (scale / batch))[:, None]
    d_embedding = net_backward(head_net, dlogits)
    net_backward(model.extractor, d_embedding)


def save_model(path, model: SourceModel | TargetModel) -> None:
    """Serialize a model checkpoint in the binary format described above."""
    if isinstance(model, SourceModel):
        nets = [model.extractor, model.classifier]
    elif isinstance(model, TargetModel):
        nets = [model.extractor, model.head_s2t, model.head_t]
    else:
        raise InvalidInputError(f"cannot serialize {type(model).__name__}")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(nets))
    for net in nets:
        out += struct.pack("<I", len(net.layer_sizes))
        out += struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)
    out += _param_bytes(nets)
    checksum = int.from_bytes(hashlib.sha256(bytes(out)).digest()[:8], "little")
    out += struct.pack("<Q", checksum)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_model(path) -> SourceModel | TargetModel:
    """Load a checkpoint; two networks mean a source model, three a target model."""
    accesslog.record_read(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 16:
        raise InvalidInputError(f"{path}: truncated checkpoint")
    payload, tail = raw[:-8], raw[-8:]
    (stored,) = struct.unpack("<Q", tail)
    expected = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
    if stored != expected:
        raise InvalidInputError(f"{path}: checkpoint checksum mismatch")
    if payload[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path}: bad magic bytes")
    off = 4
    version, n_nets = struct.unpack_from("<II", payload, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported format version {version}")
    all_sizes: list[tuple[int, ...]] = []
    for _ in range(n_nets):
        (n_sizes,) = struct.unpack_from("<I", payload, off)
        off += 4
        sizes = struct.unpack_from(f"<{n_sizes}I", payload, off)
        off += 4 * n_sizes
        all_sizes.append(tuple(sizes))
    nets = []
    for sizes in all_sizes:
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = (
                np.frombuffer(payload, dtype="<f8", count=fan_in * fan_out, offset=off)
                .reshape(fan_in, fan_out)
                .copy()
            )
            off += fan_in * fan_out * 8
            b = np.frombuffer(payload, dtype="<f8", count=fan_out, offset=off).copy()
            off += fan_out * 8
            weights.append(w)
            biases.append(b)
        nets.append(
            NetworkParams(
                layer_sizes=sizes,
                weights=weights,
                biases=biases,
                grad_w=[np.zeros_like(w) for w in weights],
                grad_b=[np.zeros_like(b) for b in biases],
                vel_w=[np.zeros_like(w) for w in weights],
                vel_b=[np.zeros_like(b) for b in biases],
            )
        )
    if off != len(payload):
        raise InvalidInputError(f"{path}: trailing bytes in checkpoint")
    if n_nets == 2:
        return SourceModel(extractor=nets[0], classifier=nets[1])
    if n_nets == 3:
        return TargetModel(extractor=nets[0], head_s2t=nets[1], head_t=nets[2])
    raise InvalidInputError(f"{path}: unexpected network count {n_nets}")
