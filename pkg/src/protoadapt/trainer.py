"""The progressive self-training loop: dual losses under a ramped trade-off,
SGD with the polynomial-decay schedule, periodic prototype refreshes, and
metrics emission.

Both loss terms are batch means. The source-regularization term trains the
upper head against the cached frozen-source labels for every sample; the
self-learning term trains the lower head against prototype-derived labels,
masked by the binary confidence. Gradients from both heads accumulate into
the shared extractor inside a single step. Test-phase predictions always come
from the lower head.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .apm import dump_memory, maybe_refresh, update_memory
from .core_math import softmax
from .data import VectorDataset, batches
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .network import (
    LrSchedule,
    SourceModel,
    TargetModel,
    backward_cross_entropy,
    forward,
    init_target_from_source,
    lr_at,
    net_forward,
    save_model,
    sgd_step,
)
from .pseudo_label import dump_records, label_batch, source_pseudo_labels

_EVAL_CHUNK = 1024


@dataclass
class AdaptConfig:
    """All run hyperparameters for one adaptation."""

    max_iter: int = 3000
    batch_size: int = 32
    update_period: int = 100
    lr0: float = 1e-3
    lr_schedule_a: float = 10.0
    lr_schedule_b: float = 0.75
    lr_extractor_scale: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float | None = None  # None = dynamic sigmoid ramp; a float fixes it
    seed: int = 0
    input_dim: int = 2
    embed_dim: int = 16
    n_classes: int = 4
    log_interval: int = 50

    def __post_init__(self):
        if self.max_iter < 0:
            raise ConfigurationError("max_iter must be >= 0")
        if self.batch_size < 1 or self.update_period < 1 or self.log_interval < 1:
            raise ConfigurationError("batch_size, update_period, log_interval must be >= 1")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("static alpha must lie in [0, 1]")


@dataclass
class StepMetrics:
    """One logging record; accuracy fields stay None without diagnostic labels."""

    iter: int
    loss_source: float
    loss_self: float
    alpha: float
    confident_ratio: float
    pseudo_label_accuracy: float | None = None
    target_accuracy: float | None = None

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "iter": self.iter,
                "loss_source": self.loss_source,
                "loss_self": self.loss_self,
                "alpha": self.alpha,
                "confident_ratio": self.confident_ratio,
                "pseudo_label_accuracy": self.pseudo_label_accuracy,
                "target_accuracy": self.target_accuracy,
            }
        )


@dataclass
class AdaptResult:
    model: TargetModel
    metrics: list[StepMetrics]


def alpha_at(config: AdaptConfig, iteration: int) -> float:
    """Trade-off weight at a step: fixed in static mode, a sigmoid ramp otherwise.

    The dynamic ramp is 2*sigmoid(10*p) - 1 over relative progress p, rising
    from 0 toward ~0.9999 at the end of training.
    """
    if config.alpha is not None:
        return config.alpha
    p = iteration / config.max_iter if config.max_iter > 0 else 0.0
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def _ce_mean(prob: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Batch-mean cross-entropy; weight-0 samples contribute exact zeros."""
    n = prob.shape[0]
    picked = prob[np.arange(n), labels]
    if weights is None:
        return float(np.mean(-np.log(picked)))
    total = 0.0
    active = weights > 0.0
    if np.any(active):
        total = float(np.sum(-np.log(picked[active])))
    return total / n


def loss_source(model: TargetModel, x, source_labels) -> float:
    """Mean cross-entropy of the upper head against the cached source labels."""
    out = forward(model.extractor, model.head_s2t, np.asarray(x, dtype=np.float64))
    return _ce_mean(np.atleast_2d(out.prob), np.asarray(source_labels, dtype=np.int64))


def loss_self(model: TargetModel, x, records) -> float:
    """Confidence-masked mean cross-entropy of the lower head against pseudo-labels."""
    out = forward(model.extractor, model.head_t, np.asarray(x, dtype=np.float64))
    labels = np.array([r.target_label for r in records], dtype=np.int64)
    weights = np.array([r.confident for r in records], dtype=np.float64)
    return _ce_mean(np.atleast_2d(out.prob), labels, weights)


def total_loss(source_term: float, self_term: float, alpha: float) -> float:
    """Convex combination (1 - alpha) * source + alpha * self."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")
    return (1.0 - alpha) * source_term + alpha * self_term


def evaluate(model: TargetModel | SourceModel, dataset: VectorDataset) -> float:
    """Fraction of samples whose predicted class matches the ground truth.

    Target models predict with the lower head (the test-phase rule); source
    models with their own classifier. Argmax ties break to the lowest class.
    """
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise InvalidInputError("evaluation requires a labeled dataset")
    if isinstance(model, TargetModel):
        extractor, head = model.extractor, model.head_t
    else:
        extractor, head = model.extractor, model.classifier
    hits = 0
    for start in range(0, len(dataset), _EVAL_CHUNK):
        out = forward(extractor, head, dataset.features[start : start + _EVAL_CHUNK])
        hits += int(np.sum(np.argmax(out.prob, axis=1) == dataset.labels[start : start + _EVAL_CHUNK]))
    return hits / len(dataset)


class _Window:
    """Accumulates per-step statistics between metric emissions."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.loss_source_sum = 0.0
        self.loss_self_sum = 0.0
        self.steps = 0
        self.samples = 0
        self.confident = 0
        self.confident_correct = 0
        self.confident_labeled = 0

    def add(self, ls, lt, records, true_labels=None):
        self.loss_source_sum += ls
        self.loss_self_sum += lt
        self.steps += 1
        self.samples += len(records)
        for i, r in enumerate(records):
            if r.confident:
                self.confident += 1
                if true_labels is not None:
                    self.confident_labeled += 1
                    self.confident_correct += int(r.target_label == true_labels[i])


def adapt(
    src: SourceModel,
    dataset: VectorDataset,
    config: AdaptConfig,
    run_dir: str | Path | None = None,
    eval_dataset: VectorDataset | None = None,
    dump_labels_path: str | Path | None = None,
    dump_memory_path: str | Path | None = None,
) -> AdaptResult:
    """Adapt the frozen source model to an unlabeled target dataset.

    Writes `metrics.jsonl` into run_dir when given; eval_dataset (labels seen
    by diagnostics only, never by the loop's learning signal) switches on the
    accuracy fields in the metrics stream. On divergence the current model and
    the last 100 metric records are saved for inspection before raising.
    """
    _check_setup(src, dataset, config)
    target = init_target_from_source(src)
    metrics: list[StepMetrics] = []
    recent: deque[StepMetrics] = deque(maxlen=100)
    if config.max_iter == 0:
        _write_metrics(run_dir, metrics)
        return AdaptResult(model=target, metrics=metrics)

    features = dataset.features
    source_labels = source_pseudo_labels(src, dataset)  # frozen model: cache once
    label_by_position = None
    if eval_dataset is not None:
        by_id = {int(i): int(y) for i, y in zip(eval_dataset.ids, eval_dataset.labels)}
        label_by_position = np.array([by_id[int(i)] for i in dataset.ids], dtype=np.int64)

    memory = update_memory(target, dataset, iteration=0)
    if dump_memory_path is not None:
        dump_memory(memory, dump_memory_path)

    schedule = LrSchedule(lr0=config.lr0, a=config.lr_schedule_a, b=config.lr_schedule_b)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    window = _Window()
    epoch_batches: list[np.ndarray] = []

    try:
        for step in range(config.max_iter):
            epoch, slot = divmod(step, steps_per_epoch)
            if slot == 0:
                epoch_batches = batches(dataset, config.batch_size, config.seed, epoch)
            idx = epoch_batches[slot]
            x = features[idx]
            y_src = source_labels[idx]

            emb = net_forward(target.extractor, x, train=True)
            logits_s2t = net_forward(target.head_s2t, emb, train=True)
            logits_t = net_forward(target.head_t, emb, train=True)
            prob_s2t = softmax(logits_s2t)
            prob_t = softmax(logits_t)

            records = label_batch(target, y_src, memory, x, dataset.ids[idx], embeddings=emb)
            y_tgt = np.array([r.target_label for r in records], dtype=np.int64)
            w = np.array([r.confident for r in records], dtype=np.float64)

            alpha = alpha_at(config, step)
            ls = _ce_mean(prob_s2t, y_src)
            lt = _ce_mean(prob_t, y_tgt, w)
            if not math.isfinite(total_loss(ls, lt, alpha)):
                raise TrainingDivergedError(f"non-finite loss at step {step + 1}")

            backward_cross_entropy(target, y_src, np.ones(len(idx)), head="s2t", scale=1.0 - alpha)
            backward_cross_entropy(target, y_tgt, w, head="t", scale=alpha)

            lr = lr_at(schedule, step / config.max_iter)
            sgd_step(target.extractor, lr * config.lr_extractor_scale, config.momentum, config.weight_decay)
            sgd_step(target.head_s2t, lr, config.momentum, config.weight_decay)
            sgd_step(target.head_t, lr, config.momentum, config.weight_decay)

            true_labels = label_by_position[idx] if label_by_position is not None else None
            window.add(ls, lt, records, true_labels)
            if dump_labels_path is not None:
                dump_records(records, dump_labels_path, iteration=step + 1)

            iteration = step + 1
            refreshed = maybe_refresh(memory, target, dataset, iteration, config.update_period)
            did_refresh = refreshed is not memory
            memory = refreshed
            if did_refresh and dump_memory_path is not None:
                dump_memory(memory, dump_memory_path)

            if iteration % config.log_interval == 0 or did_refresh or iteration == config.max_iter:
                rec = StepMetrics(
                    iter=iteration,
                    loss_source=window.loss_source_sum / window.steps,
                    loss_self=window.loss_self_sum / window.steps,
                    alpha=alpha,
                    confident_ratio=window.confident / window.samples,
                    pseudo_label_accuracy=(
                        window.confident_correct / window.confident_labeled
                        if window.confident_labeled > 0
                        else None
                    ),
                    target_accuracy=(
                        evaluate(target, eval_dataset) if eval_dataset is not None else None
                    ),
                )
                metrics.append(rec)
                recent.append(rec)
                window.reset()
    except TrainingDivergedError:
        _write_divergence(run_dir, target, recent)
        raise

    src.verify_digest()  # the adapt loop must never have touched the frozen model
    _write_metrics(run_dir, metrics)
    return AdaptResult(model=target, metrics=metrics)


def _check_setup(src: SourceModel, dataset: VectorDataset, config: AdaptConfig) -> None:
    if dataset.role != "target-train":
        raise ConfigurationError("adaptation runs on a target-train dataset only")
    if len(dataset) == 0:
        raise ConfigurationError("target dataset is empty")
    if src.extractor.input_dim != dataset.input_dim:
        raise ConfigurationError(
            f"dataset dimension {dataset.input_dim} does not match the source model "
            f"input {src.extractor.input_dim}"
        )
    if config.input_dim != src.extractor.input_dim:
        raise ConfigurationError("config input_dim does not match the source model")
    if config.embed_dim != src.extractor.output_dim:
        raise ConfigurationError("config embed_dim does not match the source model")
    if config.n_classes != src.classifier.output_dim:
        raise ConfigurationError("config n_classes does not match the source model")
    if dataset.n_classes != src.classifier.output_dim:
        raise ConfigurationError("dataset class count does not match the source model")


def _write_metrics(run_dir, metrics: list[StepMetrics]) -> None:
    if run_dir is None:
        return
    path = Path(run_dir) / "metrics.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for rec in metrics:
            f.write(rec.to_json_line() + "\n")


def _write_divergence(run_dir, model: TargetModel, recent: deque) -> None:
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    save_model(run_dir / "diverged_model.bin", model)
    with open(run_dir / "diverged_metrics.jsonl", "w", encoding="utf-8") as f:
        for rec in recent:
            f.write(rec.to_json_line() + "\n")
