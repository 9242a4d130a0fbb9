"""Adaptive prototype memory: class-wise entropy sets, the adaptive threshold,
and periodically rebuilt per-class embedding prototypes.

The admission threshold is the largest per-class minimum entropy, so every
class that received at least one prediction is guaranteed to contribute at
least its own entropy minimizer as a prototype. A built memory is immutable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core_math import batch_normalized_entropy
from .data import VectorDataset
from .errors import InvalidInputError, InvalidStateError
from .network import TargetModel, forward

# full-dataset passes run in chunks to bound temporary memory
_CHUNK = 1024


@dataclass(frozen=True)
class ClassEntropySet:
    """Entropies of all samples the current model predicts as one class."""

    class_id: int
    sample_ids: np.ndarray
    entropies: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class PrototypeMemory:
    """Per-class prototype embeddings admitted under threshold eta."""

    prototypes: list[np.ndarray]  # per class, shape (k_c, E); k_c may be 0
    sample_ids: list[np.ndarray]
    entropies: list[np.ndarray]  # entropy of each prototype's sample at build time
    threshold: float
    built_at: int
    # derived caches for batched similarity lookups
    stacked: np.ndarray = field(init=False, repr=False, compare=False)
    stacked_norms: np.ndarray = field(init=False, repr=False, compare=False)
    class_slices: tuple[tuple[int, int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        slices, start = [], 0
        for p in self.prototypes:
            slices.append((start, start + len(p)))
            start += len(p)
        dim = self.prototypes[0].shape[1] if self.prototypes else 0
        stacked = np.vstack(self.prototypes) if start > 0 else np.empty((0, dim))
        object.__setattr__(self, "stacked", stacked)
        object.__setattr__(self, "stacked_norms", np.linalg.norm(stacked, axis=1))
        object.__setattr__(self, "class_slices", tuple(slices))

    @property
    def n_classes(self) -> int:
        return len(self.prototypes)

    def non_empty_classes(self) -> list[int]:
        return [c for c in range(self.n_classes) if len(self.prototypes[c]) > 0]


def _dataset_predictions(model: TargetModel, dataset: VectorDataset):
    """Embeddings, predicted classes, and entropies for every sample (eval mode)."""
    embs, preds, ents = [], [], []
    for start in range(0, len(dataset), _CHUNK):
        out = forward(model.extractor, model.head_t, dataset.features[start : start + _CHUNK])
        embs.append(out.embedding)
        preds.append(np.argmax(out.prob, axis=1))  # argmax ties break to the lowest class
        ents.append(batch_normalized_entropy(out.prob))
    return np.concatenate(embs), np.concatenate(preds), np.concatenate(ents)


def build_entropy_sets(model: TargetModel, dataset: VectorDataset) -> list[ClassEntropySet]:
    """Group every sample's normalized self-entropy under its predicted class."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot build entropy sets from an empty dataset")
    _, preds, ents = _dataset_predictions(model, dataset)
    sets = []
    for c in range(model.n_classes):
        mask = preds == c
        sets.append(
            ClassEntropySet(class_id=c, sample_ids=dataset.ids[mask], entropies=ents[mask])
        )
    return sets


def adaptive_threshold(sets: list[ClassEntropySet]) -> float:
    """The largest per-class minimum entropy over the non-empty classes."""
    minima = [float(np.min(s.entropies)) for s in sets if len(s) > 0]
    if not minima:
        raise InvalidStateError("all class entropy sets are empty")
    return max(minima)


def build_prototypes(
    model: TargetModel,
    dataset: VectorDataset,
    sets: list[ClassEntropySet],
    eta: float,
    built_at: int = 0,
) -> PrototypeMemory:
    """Store embeddings of every sample whose entropy is within the threshold.

    Verifies inline that every class with at least one predicted sample keeps
    at least one prototype, which the max-of-minima construction guarantees.
    """
    embeddings, _, _ = _dataset_predictions(model, dataset)
    pos_by_id = {int(i): p for p, i in enumerate(dataset.ids)}
    protos, ids, ents = [], [], []
    for s in sets:
        keep = s.entropies <= eta
        kept_ids = s.sample_ids[keep]
        rows = [pos_by_id[int(i)] for i in kept_ids]
        protos.append(embeddings[rows].copy() if rows else np.empty((0, embeddings.shape[1])))
        ids.append(kept_ids.copy())
        ents.append(s.entropies[keep].copy())
        if len(s) > 0 and len(kept_ids) == 0:
            raise InvalidStateError(
                f"class {s.class_id} has predictions but no prototype under eta={eta}"
            )
    return PrototypeMemory(
        prototypes=protos, sample_ids=ids, entropies=ents, threshold=eta, built_at=built_at
    )


def update_memory(model: TargetModel, dataset: VectorDataset, iteration: int) -> PrototypeMemory:
    """One full rebuild: entropy sets, adaptive threshold, prototype selection."""
    sets = build_entropy_sets(model, dataset)
    eta = adaptive_threshold(sets)
    return build_prototypes(model, dataset, sets, eta, built_at=iteration)


def maybe_refresh(
    memory: PrototypeMemory,
    model: TargetModel,
    dataset: VectorDataset,
    iteration: int,
    update_period: int,
) -> PrototypeMemory:
    """Rebuild exactly when iteration is a whole multiple of the update period."""
    if update_period < 1:
        raise InvalidInputError("update_period must be >= 1")
    if iteration % update_period == 0:
        return update_memory(model, dataset, iteration)
    return memory


def dump_memory(memory: PrototypeMemory, path) -> None:
    """Diagnostic dump, one JSON record per stored prototype."""
    with open(path, "a", encoding="utf-8") as f:
        for c in range(memory.n_classes):
            for i in range(len(memory.prototypes[c])):
                rec = {
                    "built_at": memory.built_at,
                    "class": c,
                    "sample_id": int(memory.sample_ids[c][i]),
                    "entropy": float(memory.entropies[c][i]),
                    "embedding": [float(v) for v in memory.prototypes[c][i]],
                }
                f.write(json.dumps(rec) + "\n")
