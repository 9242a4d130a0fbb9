"""Synthetic covariate-shift datasets, CSV I/O, batching, and source pre-training.

Datasets are immutable once constructed. The role tag enforces label hygiene:
a "target-train" dataset physically cannot carry labels, so the adaptation
path has nothing to leak. Ground-truth labels for the target domain live in a
separate sidecar file (`<name>.labels.csv`) that only evaluation code reads.

Dataset file format: plain CSV with the one-line header
`# prda-dataset v1 I=<int> N_c=<int> labeled=<0|1>` followed by one row per
sample: id, I feature floats, optional label. Floats are written with repr()
so 64-bit round trips are lossless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import accesslog
from .errors import (
    ConfigurationError,
    DatasetParseError,
    InvalidInputError,
    PretrainAccuracyError,
)
from .network import SourceModel, backward_cross_entropy, forward, init_network, net_forward, sgd_step
from .seeding import substream

GENERATOR_FAMILIES = ("gaussian-mixture", "two-arcs")
ROLES = ("source", "target-train", "target-eval")


@dataclass(frozen=True)
class VectorDataset:
    """N samples of I features with stable ids and an access-control role tag."""

    features: np.ndarray
    ids: np.ndarray
    labels: np.ndarray | None
    role: str
    n_classes: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        if f.ndim != 2:
            raise InvalidInputError("features must be a 2-D matrix")
        if not np.all(np.isfinite(f)):
            raise InvalidInputError("features contain non-finite values")
        if self.ids.shape != (f.shape[0],):
            raise InvalidInputError("ids must align with feature rows")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidInputError("sample ids must be unique")
        if self.role not in ROLES:
            raise InvalidInputError(f"unknown dataset role {self.role!r}")
        if self.role == "target-train" and self.labels is not None:
            raise InvalidInputError("target-train datasets must not carry labels")
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", y)
            if y.shape != (f.shape[0],):
                raise InvalidInputError("labels must align with feature rows")
            if np.any(y < 0) or np.any(y >= self.n_classes):
                raise InvalidInputError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ShiftSpec:
    """Generator recipe for a (source, target) pair under covariate shift.

    The target domain is the base distribution pushed through a rotation
    (degrees, counterclockwise, about the origin), then a translation, then
    optional extra isotropic noise. Class priors are identical across domains.
    """

    family: str = "gaussian-mixture"
    n_classes: int = 4
    radius: float = 2.0
    spread: float = 0.45
    # offset keeps every shifted class mode inside its source decision wedge
    # for the default 35-degree rotation plus [0.5, 0] translation
    class_angle0_deg: float = 10.0
    class_means: tuple[tuple[float, float], ...] | None = None
    rotation_deg: float = 35.0
    translation: tuple[float, float] = (0.5, 0.0)
    noise_scale: float = 0.0
    n_source: int = 2000
    n_target: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.family not in GENERATOR_FAMILIES:
            raise ConfigurationError(f"unknown generator family {self.family!r}")
        if not 0.0 <= self.rotation_deg < 360.0:
            raise ConfigurationError("rotation must lie in [0, 360)")
        if self.spread <= 0.0:
            raise ConfigurationError("spread must be positive (zero-spread spec is degenerate)")
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.family == "two-arcs" and self.n_classes != 2:
            raise ConfigurationError("two-arcs generates exactly 2 classes")
        if min(self.n_source, self.n_target) < 10 * self.n_classes:
            raise ConfigurationError("sample counts must be at least 10 per class x n_classes")
        if self.class_means is not None and len(self.class_means) != self.n_classes:
            raise ConfigurationError("class_means must list one mean per class")


def blobs_rot35(seed: int = 0, **overrides) -> ShiftSpec:
    """Default benchmark: 4 Gaussian blobs rotated 35 degrees plus [0.5, 0]."""
    return replace(ShiftSpec(seed=seed), **overrides) if overrides else ShiftSpec(seed=seed)


def base_class_means(spec: ShiftSpec) -> np.ndarray:
    """Class means of the base (source) distribution, shape (n_classes, 2)."""
    if spec.class_means is not None:
        return np.asarray(spec.class_means, dtype=np.float64)
    angles = np.deg2rad(spec.class_angle0_deg) + 2.0 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def rotation_matrix(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def shifted_class_means(spec: ShiftSpec) -> np.ndarray:
    """Closed-form class means of the target distribution (gaussian-mixture only)."""
    r = rotation_matrix(spec.rotation_deg)
    return base_class_means(spec) @ r.T + np.asarray(spec.translation)


def _sample_base(spec: ShiftSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    if spec.family == "gaussian-mixture":
        means = base_class_means(spec)
        return means[labels] + spec.spread * rng.standard_normal((n, 2))
    # two-arcs: interleaving half circles, class 1 flipped and offset
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = spec.radius * np.stack([x, y], axis=1)
    return pts + spec.spread * rng.standard_normal((n, 2))


def generate_shifted_pair(spec: ShiftSpec) -> tuple[VectorDataset, VectorDataset, VectorDataset]:
    """Draw a labeled source set and an unlabeled target set plus its eval sidecar.

    Returns (source, target_train, target_eval); target_eval shares features
    and ids with target_train but carries the segregated ground-truth labels.
    """
    rng = substream(spec.seed, "data")
    ys = rng.integers(0, spec.n_classes, size=spec.n_source)
    yt = rng.integers(0, spec.n_classes, size=spec.n_target)
    xs = _sample_base(spec, ys, rng)
    xt = _sample_base(spec, yt, rng)
    r = rotation_matrix(spec.rotation_deg)
    xt = xt @ r.T + np.asarray(spec.translation)
    if spec.noise_scale > 0.0:
        xt = xt + spec.noise_scale * rng.standard_normal(xt.shape)
    source = VectorDataset(xs, np.arange(spec.n_source), ys, "source", spec.n_classes)
    target_train = VectorDataset(xt, np.arange(spec.n_target), None, "target-train", spec.n_classes)
    target_eval = VectorDataset(xt.copy(), np.arange(spec.n_target), yt, "target-eval", spec.n_classes)
    return source, target_train, target_eval


def batches(dataset: VectorDataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch permutation split into batches; the last batch may be short."""
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    perm = substream(seed, "shuffle", (epoch,)).permutation(len(dataset))
    return [perm[i : i + batch_size] for i in range(0, len(dataset), batch_size)]


def write_dataset(path, dataset: VectorDataset) -> None:
    labeled = int(dataset.labels is not None)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# prda-dataset v1 I={dataset.input_dim} N_c={dataset.n_classes} labeled={labeled}\n")
        for i in range(len(dataset)):
            row = [str(int(dataset.ids[i]))]
            row += [repr(float(v)) for v in dataset.features[i]]
            if labeled:
                row.append(str(int(dataset.labels[i])))
            f.write(",".join(row) + "\n")


def _parse_header(path, line: str, prefix: str, keys: tuple[str, ...]) -> dict[str, int]:
    parts = line.strip().split()
    if parts[: len(prefix.split())] != prefix.split():
        raise DatasetParseError(path, 1, f"expected header starting with {prefix!r}")
    fields = dict(p.split("=", 1) for p in parts[len(prefix.split()) :] if "=" in p)
    out = {}
    for key in keys:
        if key not in fields:
            raise DatasetParseError(path, 1, f"header missing {key}=")
        try:
            out[key] = int(fields[key])
        except ValueError:
            raise DatasetParseError(path, 1, f"header field {key} is not an integer") from None
    return out


def read_dataset(path, role: str) -> VectorDataset:
    """Parse a dataset CSV; malformed headers or rows raise with a line number."""
    accesslog.record_read(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    if not lines:
        raise DatasetParseError(path, 1, "empty file")
    header = _parse_header(path, lines[0], "# prda-dataset v1", ("I", "N_c", "labeled"))
    dim, n_classes, labeled = header["I"], header["N_c"], header["labeled"]
    if labeled not in (0, 1):
        raise DatasetParseError(path, 1, "labeled must be 0 or 1")
    want = 1 + dim + labeled
    ids, feats, labels = [], [], []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.strip().split(",")
        if len(cells) != want:
            raise DatasetParseError(path, line_no, f"expected {want} fields, got {len(cells)}")
        try:
            ids.append(int(cells[0]))
            feats.append([float(c) for c in cells[1 : 1 + dim]])
        except ValueError:
            raise DatasetParseError(path, line_no, "malformed id or feature value") from None
        if labeled:
            try:
                y = int(cells[-1])
            except ValueError:
                raise DatasetParseError(path, line_no, "malformed label") from None
            if not 0 <= y < n_classes:
                raise DatasetParseError(path, line_no, f"label {y} outside [0, {n_classes})")
            labels.append(y)
    if not ids:
        raise DatasetParseError(path, 2, "dataset has no rows")
    return VectorDataset(
        features=np.array(feats),
        ids=np.array(ids),
        labels=np.array(labels) if labeled else None,
        role=role,
        n_classes=n_classes,
    )


def write_labels(path, ids: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
    """Write the evaluation-only label sidecar (`<name>.labels.csv`)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# prda-labels v1 N_c={n_classes}\n")
        for i, y in zip(ids, labels):
            f.write(f"{int(i)},{int(y)}\n")


def read_labels(path) -> tuple[np.ndarray, np.ndarray, int]:
    accesslog.record_read(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    if not lines:
        raise DatasetParseError(path, 1, "empty file")
    header = _parse_header(path, lines[0], "# prda-labels v1", ("N_c",))
    n_classes = header["N_c"]
    ids, labels = [], []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.strip().split(",")
        if len(cells) != 2:
            raise DatasetParseError(path, line_no, f"expected 2 fields, got {len(cells)}")
        try:
            i, y = int(cells[0]), int(cells[1])
        except ValueError:
            raise DatasetParseError(path, line_no, "malformed id or label") from None
        if not 0 <= y < n_classes:
            raise DatasetParseError(path, line_no, f"label {y} outside [0, {n_classes})")
        ids.append(i)
        labels.append(y)
    return np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64), n_classes


def attach_labels(dataset: VectorDataset, ids: np.ndarray, labels: np.ndarray) -> VectorDataset:
    """Join sidecar labels onto a dataset by id, producing a target-eval dataset."""
    by_id = {int(i): int(y) for i, y in zip(ids, labels)}
    try:
        joined = np.array([by_id[int(i)] for i in dataset.ids], dtype=np.int64)
    except KeyError as e:
        raise InvalidInputError(f"label sidecar missing sample id {e.args[0]}") from None
    return VectorDataset(
        features=dataset.features,
        ids=dataset.ids,
        labels=joined,
        role="target-eval",
        n_classes=dataset.n_classes,
    )


@dataclass
class PretrainConfig:
    """Hyperparameters for manufacturing the frozen source model."""

    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 16
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    holdout_frac: float = 0.2
    accuracy_gate: float = 0.80
    seed: int = 0


def _accuracy(extractor, head, x: np.ndarray, y: np.ndarray) -> float:
    probs = forward(extractor, head, x).prob
    return float(np.mean(np.argmax(probs, axis=1) == y))


def pretrain_source(dataset: VectorDataset, config: PretrainConfig) -> SourceModel:
    """Train a fresh extractor + classifier on labeled source data with SGD.

    Raises PretrainAccuracyError when holdout accuracy misses the gate (the
    benchmark would be unusable); set accuracy_gate=0 to inspect weak models.
    """
    if dataset.labels is None:
        raise InvalidInputError("pretraining requires a labeled source dataset")
    n = len(dataset)
    perm = substream(config.seed, "split").permutation(n)
    n_hold = int(round(config.holdout_frac * n))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) == 0:
        raise ConfigurationError("holdout fraction leaves no training samples")

    rng = substream(config.seed, "init")
    sizes = (dataset.input_dim, *config.hidden, config.embed_dim)
    extractor = init_network(sizes, rng)
    classifier = init_network((config.embed_dim, dataset.n_classes), rng)
    # alias the classifier as a head so backward_cross_entropy can drive the pair
    shim = _HeadShim(extractor, classifier)

    x, y = dataset.features, dataset.labels
    for epoch in range(config.epochs):
        order = substream(config.seed, "shuffle", (epoch,)).permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            emb = net_forward(extractor, x[idx], train=True)
            net_forward(classifier, emb, train=True)
            backward_cross_entropy(shim, y[idx], np.ones(len(idx)), head="t")
            sgd_step(extractor, config.lr, config.momentum, config.weight_decay)
            sgd_step(classifier, config.lr, config.momentum, config.weight_decay)

    eval_idx = hold_idx if n_hold > 0 else train_idx
    accuracy = _accuracy(extractor, classifier, x[eval_idx], y[eval_idx])
    if accuracy < config.accuracy_gate:
        raise PretrainAccuracyError(accuracy, config.accuracy_gate)
    return SourceModel(extractor=extractor, classifier=classifier)


class _HeadShim:
    """Adapter so backward_cross_entropy can drive a bare extractor + classifier."""

    def __init__(self, extractor, classifier):
        self.extractor = extractor
        self.head_s2t = classifier
        self.head_t = classifier
