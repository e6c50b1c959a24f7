"""The prompt-analog classifier head.

A head is a small learnable parameterization over fixed per-class anchor
embeddings: M shared context vectors whose mean is added to every anchor
before renormalization. The learnable parameter count is M x D regardless
of the class count, mirroring shared-context prompt tuning. A frozen head
(M = 0) classifies with its anchors directly and plays the role of the
generalized zero-shot model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from promix import backend
from promix.embedspace import (
    NORM_TOLERANCE,
    EmbeddingSet,
    check_unit,
    read_embedding_file,
    unit_normalize,
    write_embedding_file,
)

DEFAULT_TAU = 0.01
CONTEXT_INIT_STD = 0.02


@dataclass(frozen=True)
class PromptHead:
    """Immutable head: anchors plus shared learnable context vectors."""

    context: np.ndarray
    anchors: np.ndarray
    class_names: tuple[str, ...]
    frozen: bool = False

    def __post_init__(self):
        context = np.ascontiguousarray(np.asarray(self.context, dtype=np.float64))
        anchors = np.ascontiguousarray(np.asarray(self.anchors, dtype=np.float64))
        if context.ndim != 2 or anchors.ndim != 2:
            raise ValueError("context and anchors must be 2-d arrays")
        if context.shape[0] > 0 and context.shape[1] != anchors.shape[1]:
            raise ValueError("context and anchor dimensions differ")
        if anchors.shape[0] != len(self.class_names):
            raise ValueError("one anchor per class name required")
        check_unit(anchors, NORM_TOLERANCE)
        if self.frozen and context.shape[0] != 0:
            raise ValueError("a frozen head must not carry context vectors")
        context.setflags(write=False)
        anchors.setflags(write=False)
        object.__setattr__(self, "context", context)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def context_len(self) -> int:
        return self.context.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    @property
    def num_classes(self) -> int:
        return self.anchors.shape[0]

    @classmethod
    def frozen_from(cls, anchors: np.ndarray, class_names: Sequence[str]) -> "PromptHead":
        a = np.asarray(anchors, dtype=np.float64)
        return cls(np.empty((0, a.shape[1])), a, tuple(class_names), frozen=True)

    @classmethod
    def with_random_context(
        cls,
        anchors: np.ndarray,
        class_names: Sequence[str],
        context_len: int,
        seed: int,
        init_std: float = CONTEXT_INIT_STD,
    ) -> "PromptHead":
        """Tunable head with small random context (near the frozen head)."""
        a = np.asarray(anchors, dtype=np.float64)
        rng = np.random.default_rng(seed)
        ctx = init_std * rng.standard_normal((context_len, a.shape[1]))
        return cls(ctx, a, tuple(class_names))

    def with_context(self, context: np.ndarray) -> "PromptHead":
        return PromptHead(context, self.anchors, self.class_names, frozen=False)

    def restrict(self, classes: Sequence[int]) -> "PromptHead":
        """Head over a class subset; context is shared with the original."""
        idx = np.asarray(list(classes), dtype=np.int64)
        return PromptHead(
            self.context,
            self.anchors[idx],
            tuple(self.class_names[i] for i in idx),
            frozen=self.frozen,
        )

    def effective_embeddings(self, anchors: np.ndarray | None = None) -> np.ndarray:
        """Unit-norm per-class embeddings: renormalize(anchor + mean(context)).

        ``anchors`` overrides the head's own anchor rows, which lets a
        tuned context be applied to surrogate classes (the out-class sets).
        """
        base = self.anchors if anchors is None else np.asarray(anchors, dtype=np.float64)
        if self.context_len == 0:
            return base
        return unit_normalize(base + self.context.mean(axis=0))


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-class probabilities produced at a given temperature."""

    probs: np.ndarray
    tau: float

    def __post_init__(self):
        probs = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if probs.ndim != 1 or np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def similarities(head: PromptHead, x: np.ndarray) -> np.ndarray:
    """Cosine similarities of one embedding against every class."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (head.dim,):
        raise ValueError(f"dimension mismatch: embedding {x.shape}, head dim {head.dim}")
    return head.effective_embeddings() @ x


def similarity_matrix(head: PromptHead, vectors: np.ndarray) -> np.ndarray:
    """(N, C) similarities of a batch of embeddings against every class."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[1] != head.dim:
        raise ValueError(
            f"dimension mismatch: batch dim {vectors.shape[1]}, head dim {head.dim}"
        )
    return vectors @ head.effective_embeddings().T


def predict(s: np.ndarray, tau: float = DEFAULT_TAU) -> PredictiveDistribution:
    """Temperature softmax of a similarity vector (max-subtracted)."""
    s = np.asarray(s, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite similarity")
    probs = backend.kernels.softmax_rows(s[None, :] / tau)[0]
    return PredictiveDistribution(probs, tau)


def predict_matrix(s: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Row-wise temperature softmax for a batch of similarity vectors."""
    s = np.asarray(s, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite similarity")
    return backend.kernels.softmax_rows(s / tau)


def expected_error(head: PromptHead, emb_set: EmbeddingSet, tau: float = DEFAULT_TAU) -> float:
    """Mean negative log-probability of the true class over a set."""
    if len(emb_set) == 0:
        raise ValueError("expected_error of an empty set")
    probs = predict_matrix(similarity_matrix(head, emb_set.vectors), tau)
    py = probs[np.arange(len(emb_set)), emb_set.labels]
    return float(np.mean(-np.log(np.maximum(py, 1e-300))))


def save_head(head: PromptHead, tau: float, path) -> None:
    """Write a head checkpoint: JSON manifest plus an EMB1 float block.

    The binary block stores the context rows (label 0) followed by the
    anchor rows (label 1). Values are float32 on disk.
    """
    path = Path(path)
    data_file = path.with_suffix(".emb")
    vectors = np.concatenate([head.context, head.anchors]) if head.context_len else head.anchors
    labels = np.concatenate(
        [
            np.zeros(head.context_len, dtype=np.int64),
            np.ones(head.num_classes, dtype=np.int64),
        ]
    )
    block = EmbeddingSet(vectors, labels, ("context", "anchor"))
    write_embedding_file(block, data_file)
    manifest = {
        "context_len": head.context_len,
        "dim": head.dim,
        "class_names": list(head.class_names),
        "tau": tau,
        "frozen": head.frozen,
        "data_file": data_file.name,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_head(path) -> tuple[PromptHead, float]:
    """Read a head checkpoint written by :func:`save_head`."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    block = read_embedding_file(path.parent / manifest["data_file"], check_norms=False)
    m = int(manifest["context_len"])
    context = block.vectors[:m]
    anchors = block.vectors[m:]
    if anchors.shape[0] != len(manifest["class_names"]):
        raise ValueError(f"{path}: anchor count does not match class list")
    head = PromptHead(
        context, anchors, tuple(manifest["class_names"]), frozen=bool(manifest["frozen"])
    )
    return head, float(manifest["tau"])
