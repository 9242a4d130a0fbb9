"""Pseudo-label assignment from prototype similarity and the set-to-set
confidence filter.

Target-oriented labels come from the highest mean cosine similarity between a
sample's embedding and each class's prototype set. Confidence is binary: a
sample counts as reliable only when its farthest top-1 prototype is still
strictly closer than its nearest runner-up prototype. Between a singleton and
a finite set the two-sided sup-inf distance collapses to the farthest-point
distance, and the min-variant to the nearest-point distance; tests verify the
collapse against brute-force evaluation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .apm import PrototypeMemory
from .data import VectorDataset
from .errors import DegenerateInputError, InvalidInputError, InvalidStateError
from .network import SourceModel, TargetModel, forward, net_forward

_EVAL_CHUNK = 1024


@dataclass(frozen=True)
class PseudoLabelRecord:
    """Both pseudo-labels and the confidence verdict for one sample."""

    sample_id: int
    source_label: int
    target_label: int
    confident: int  # 0 or 1
    scores: np.ndarray  # per-class mean similarity; -inf for empty classes


def source_pseudo_label(src: SourceModel, x) -> int:
    """Class the frozen source model assigns to one sample."""
    out = forward(src.extractor, src.classifier, np.asarray(x, dtype=np.float64))
    return int(np.argmax(out.prob))


def source_pseudo_labels(src: SourceModel, dataset: VectorDataset) -> np.ndarray:
    """Source-oriented labels for a whole dataset, aligned with dataset order.

    The source model is frozen, so these are computed once per run and reused
    every epoch.
    """
    preds = []
    for start in range(0, len(dataset), _EVAL_CHUNK):
        out = forward(src.extractor, src.classifier, dataset.features[start : start + _EVAL_CHUNK])
        preds.append(np.argmax(out.prob, axis=1))
    return np.concatenate(preds)


def _cosines_to_set(f: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Cosine similarity of one embedding against each row of a prototype set."""
    fn = np.linalg.norm(f)
    if fn == 0.0:
        raise DegenerateInputError("query embedding has zero norm")
    norms = np.linalg.norm(protos, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("prototype with zero norm")
    return np.clip((protos @ f) / (norms * fn), -1.0, 1.0)


def class_similarity(f, memory: PrototypeMemory) -> np.ndarray:
    """Mean cosine similarity to each class's prototypes; empty classes score -inf."""
    q = np.asarray(f, dtype=np.float64)
    scores = np.full(memory.n_classes, -np.inf)
    non_empty = memory.non_empty_classes()
    if not non_empty:
        raise InvalidStateError("prototype memory has no non-empty class")
    for c in non_empty:
        scores[c] = float(np.mean(_cosines_to_set(q, memory.prototypes[c])))
    return scores


def target_pseudo_label(scores) -> int:
    """Index of the best similarity score; ties break to the lowest class."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.any(np.isfinite(s)):
        raise InvalidStateError("no class has a finite similarity score")
    return int(np.argmax(s))


def hausdorff_to_top1(f, protos) -> float:
    """Distance from a singleton query to the best-class set: the farthest prototype."""
    p = np.asarray(protos, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise InvalidInputError("prototype set must be a non-empty 2-D array")
    return float(np.max(1.0 - _cosines_to_set(np.asarray(f, dtype=np.float64), p)))


def modified_hausdorff_to_top2(f, protos) -> float:
    """Opposite corner case for the runner-up set: the nearest prototype."""
    p = np.asarray(protos, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise InvalidInputError("prototype set must be a non-empty 2-D array")
    return float(np.min(1.0 - _cosines_to_set(np.asarray(f, dtype=np.float64), p)))


def _top_two_classes(scores: np.ndarray) -> tuple[int, int | None]:
    finite = [c for c in range(len(scores)) if np.isfinite(scores[c])]
    ranked = sorted(finite, key=lambda c: (-scores[c], c))
    top1 = ranked[0]
    top2 = ranked[1] if len(ranked) > 1 else None
    return top1, top2


def confidence(f, memory: PrototypeMemory, scores) -> int:
    """1 when the whole best-class set sits strictly closer than the runner-up set.

    Degenerate memories (fewer than two non-empty classes) and exact ties both
    yield 0: filtering out is the safe behavior.
    """
    s = np.asarray(scores, dtype=np.float64)
    top1, top2 = _top_two_classes(s)
    if top2 is None:
        return 0
    d_best = hausdorff_to_top1(f, memory.prototypes[top1])
    d_second = modified_hausdorff_to_top2(f, memory.prototypes[top2])
    return int(d_best < d_second)


def label_batch(
    model: TargetModel,
    source_labels,
    memory: PrototypeMemory,
    x,
    ids,
    embeddings=None,
) -> list[PseudoLabelRecord]:
    """One record per sample, in input order.

    source_labels holds the cached frozen-source labels for this batch;
    embeddings computed with the live extractor may be passed in to avoid a
    second forward pass. Computes all samples against all prototypes in one
    pass; equivalence with the per-sample operations is covered by tests.
    """
    feats = np.asarray(x, dtype=np.float64)
    if embeddings is None:
        embeddings = net_forward(model.extractor, feats)
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    ys = np.asarray(source_labels, dtype=np.int64)
    if not (len(feats) == len(ys) == len(ids) == len(emb)):
        raise InvalidInputError("batch arrays are misaligned")
    non_empty = memory.non_empty_classes()
    if not non_empty:
        raise InvalidStateError("prototype memory has no non-empty class")
    emb_norms = np.linalg.norm(emb, axis=1)
    if np.any(emb_norms == 0.0):
        raise DegenerateInputError("query embedding has zero norm")
    if np.any(memory.stacked_norms == 0.0):
        raise DegenerateInputError("prototype with zero norm")

    sims = np.clip(
        (emb @ memory.stacked.T) / (emb_norms[:, None] * memory.stacked_norms[None, :]),
        -1.0,
        1.0,
    )
    n, n_classes = len(emb), memory.n_classes
    scores = np.full((n, n_classes), -np.inf)
    min_sim = np.zeros((n, n_classes))
    max_sim = np.zeros((n, n_classes))
    for c in non_empty:
        lo, hi = memory.class_slices[c]
        block = sims[:, lo:hi]
        scores[:, c] = block.mean(axis=1)
        min_sim[:, c] = block.min(axis=1)
        max_sim[:, c] = block.max(axis=1)

    # stable sort on negated scores ranks ties by the lowest class index
    order = np.argsort(-scores, axis=1, kind="stable")
    records = []
    for i in range(n):
        top1 = int(order[i, 0])
        w = 0
        if n_classes > 1:
            top2 = int(order[i, 1])
            if np.isfinite(scores[i, top2]):
                d_best = 1.0 - min_sim[i, top1]  # farthest top-1 prototype
                d_second = 1.0 - max_sim[i, top2]  # nearest runner-up prototype
                w = int(d_best < d_second)
        records.append(
            PseudoLabelRecord(
                sample_id=int(ids[i]),
                source_label=int(ys[i]),
                target_label=top1,
                confident=w,
                scores=scores[i].copy(),
            )
        )
    return records


def dump_records(records: list[PseudoLabelRecord], path, iteration: int) -> None:
    """Diagnostic dump: one JSON line per sample with its top-2 scores."""
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            top1, top2 = _top_two_classes(r.scores)
            rec = {
                "iter": iteration,
                "sample_id": r.sample_id,
                "source_label": r.source_label,
                "target_label": r.target_label,
                "confident": r.confident,
                "top1_score": float(r.scores[top1]),
                "top2_score": None if top2 is None else float(r.scores[top2]),
            }
            f.write(json.dumps(rec) + "\n")
