"""Embedding data model, deterministic synthetic domains, and file I/O.

Embeddings stand in for frozen-encoder outputs: unit-norm float64 vectors
with integer class labels. Everything downstream operates on similarities
only, so a static embedding set carries all the information the rest of
the library needs.

On-disk format (``EMB1``, little-endian throughout)::

    magic   4 bytes  b"EMB1"
    dim     u32
    count   u32      number of samples
    classes u32      number of class names
    names   classes x (u16 length + UTF-8 bytes)
    samples count x (u32 label + dim x f32)

Values are stored as float32. ``read_embedding_file`` returns the stored
values verbatim (promoted to float64) so that read -> write reproduces a
file byte for byte; vectors whose norm deviates from 1 by more than
NORM_TOLERANCE are rejected. Use :meth:`EmbeddingSet.renormalized` when
strict unit norms are needed after ingesting external data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

UNIT_ATOL = 1e-9
NORM_TOLERANCE = 1e-6
MAGIC = b"EMB1"


class EmbeddingFileError(Exception):
    """Base class for embedding-file format errors."""


class BadMagicError(EmbeddingFileError):
    """File does not start with the EMB1 magic bytes."""


class BadHeaderError(EmbeddingFileError):
    """Header fields are inconsistent (zero dim, absurd counts, ...)."""


class TruncatedFileError(EmbeddingFileError):
    """File ends before the payload promised by the header."""


class NonFiniteError(EmbeddingFileError):
    """Payload contains NaN or infinite values."""


class NormError(EmbeddingFileError):
    """Stored vector norm deviates from 1 beyond NORM_TOLERANCE."""


def unit_normalize(v: np.ndarray) -> np.ndarray:
    """Scale vectors to unit Euclidean norm (rows of a 2-d array, or 1-d)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return v / n
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return v / norms


def check_unit(v: np.ndarray, atol: float = UNIT_ATOL) -> None:
    """Raise ValueError unless every row of ``v`` has norm 1 within atol."""
    norms = np.linalg.norm(np.atleast_2d(np.asarray(v, dtype=np.float64)), axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > atol:
        raise ValueError(f"embedding norm deviates from 1 by {worst:.3e} (> {atol:.0e})")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit-norm vectors (reduces to a dot product).

    Both inputs must have the same dimension and unit norm within
    NORM_TOLERANCE (the ingest tolerance; generated embeddings are far
    tighter than that).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    check_unit(a, NORM_TOLERANCE)
    check_unit(b, NORM_TOLERANCE)
    return float(a @ b)


class LabeledSample(NamedTuple):
    embedding: np.ndarray
    label: int


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered collection of labeled embeddings with a shared class list.

    ``vectors`` is an (N, D) float64 array; ``labels`` an (N,) int64 array
    indexing into ``class_names``. Instances are immutable; mutating
    methods return new sets.
    """

    vectors: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-d array")
        if labels.shape != (vectors.shape[0],):
            raise ValueError("labels must be one per sample")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError("label out of range of class_names")
        vectors.setflags(write=False)
        labels.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield LabeledSample(self.vectors[i], int(self.labels[i]))

    def subset(self, mask: np.ndarray) -> "EmbeddingSet":
        """Rows selected by a boolean mask or index array, order preserved."""
        return EmbeddingSet(self.vectors[mask], self.labels[mask], self.class_names)

    def with_labels_in(self, classes: Sequence[int]) -> "EmbeddingSet":
        """Samples whose label lies in ``classes`` (global labels kept)."""
        return self.subset(np.isin(self.labels, np.asarray(list(classes), dtype=np.int64)))

    def renormalized(self) -> "EmbeddingSet":
        """Copy with every vector scaled to exact unit norm (float64)."""
        return EmbeddingSet(unit_normalize(self.vectors), self.labels, self.class_names)

    def quantized(self) -> "EmbeddingSet":
        """Copy with vectors rounded to their float32 representation.

        The result is the in-memory image of what write/read produces, so
        write(s.quantized()) -> read is an exact identity.
        """
        return EmbeddingSet(
            self.vectors.astype(np.float32).astype(np.float64), self.labels, self.class_names
        )


@dataclass(frozen=True)
class DomainPartition:
    """Disjoint class subsets Y_0..Y_K with sub-domain masses.

    ``subsets[0]`` is the domain of the generalized (untuned) head; the
    remaining subsets each belong to one specialized head. Masses default
    to class-count proportions and can be recomputed empirically from a
    sample set.
    """

    subsets: tuple[np.ndarray, ...]
    masses: np.ndarray

    def __post_init__(self):
        subsets = tuple(
            np.ascontiguousarray(np.sort(np.asarray(s, dtype=np.int64))) for s in self.subsets
        )
        masses = np.ascontiguousarray(np.asarray(self.masses, dtype=np.float64))
        object.__setattr__(self, "subsets", subsets)
        object.__setattr__(self, "masses", masses)
        if masses.shape != (len(subsets),):
            raise ValueError("one mass per subset required")
        if np.any(masses < 0) or abs(float(masses.sum()) - 1.0) > 1e-12:
            raise ValueError("masses must be non-negative and sum to 1")
        all_classes = np.concatenate(subsets) if subsets else np.empty(0, dtype=np.int64)
        if len(np.unique(all_classes)) != len(all_classes):
            raise ValueError("subsets overlap")
        expected = np.arange(self.num_classes, dtype=np.int64)
        if not np.array_equal(np.sort(all_classes), expected):
            raise ValueError("subsets do not cover the class range exactly")
        for s in subsets:
            s.setflags(write=False)
        masses.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return int(sum(len(s) for s in self.subsets))

    @property
    def num_specialized(self) -> int:
        """K: the number of subsets owned by specialized heads."""
        return len(self.subsets) - 1

    def owner_of(self) -> np.ndarray:
        """Map class index -> owning subset index, as an int array."""
        owners = np.empty(self.num_classes, dtype=np.int64)
        for i, s in enumerate(self.subsets):
            owners[s] = i
        return owners

    def masses_from(self, labels: np.ndarray) -> np.ndarray:
        """Empirical sub-domain masses of a label array."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("empty label set")
        owners = self.owner_of()
        counts = np.bincount(owners[labels], minlength=len(self.subsets))
        return counts / labels.size


def _class_count_masses(subsets: Sequence[np.ndarray]) -> np.ndarray:
    sizes = np.array([len(s) for s in subsets], dtype=np.float64)
    return sizes / sizes.sum()


def partition_classes(
    class_count: int,
    kind: str = "base_new_even_split",
    seed: int = 0,
    base_size: int | None = None,
    way: int | None = None,
    sets: Sequence[Sequence[int]] | None = None,
) -> DomainPartition:
    """Build a class partition for one of the supported protocols.

    ``base_new_even_split``
        Seeded shuffle; the first ceil(n/2) classes form Y_1 (the tuning
        domain), the rest Y_0.
    ``session_schedule``
        Seeded shuffle; Y_1 holds ``base_size`` classes, then fixed-width
        ``way``-class sessions Y_2..Y_K. Y_0 is empty. The remainder after
        the base must divide evenly by ``way``.
    ``explicit``
        ``sets`` passed through (first entry is Y_0) after validation.
    """
    if class_count <= 0:
        raise ValueError("class_count must be positive")
    if kind == "base_new_even_split":
        rng = np.random.default_rng(seed)
        order = rng.permutation(class_count)
        half = (class_count + 1) // 2
        subsets = [order[half:], order[:half]]
    elif kind == "session_schedule":
        if base_size is None or way is None:
            raise ValueError("session_schedule requires base_size and way")
        rest = class_count - base_size
        if base_size <= 0 or way <= 0 or rest < 0 or rest % way != 0:
            raise ValueError(
                f"schedule {base_size}+k*{way} does not fit {class_count} classes"
            )
        rng = np.random.default_rng(seed)
        order = rng.permutation(class_count)
        subsets = [np.empty(0, dtype=np.int64), order[:base_size]]
        for start in range(base_size, class_count, way):
            subsets.append(order[start : start + way])
    elif kind == "explicit":
        if not sets:
            raise ValueError("explicit partition requires sets")
        subsets = [np.asarray(list(s), dtype=np.int64) for s in sets]
        merged = np.concatenate(subsets) if subsets else np.empty(0, dtype=np.int64)
        if len(np.unique(merged)) != len(merged):
            raise ValueError("explicit sets overlap")
        if not np.array_equal(np.sort(merged), np.arange(class_count, dtype=np.int64)):
            raise ValueError(f"explicit sets do not cover all {class_count} classes")
    else:
        raise ValueError(f"unknown partition kind: {kind!r}")
    return DomainPartition(tuple(subsets), _class_count_masses(subsets))


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the deterministic synthetic embedding domain.

    ``intra_noise`` spreads samples around their class prototype;
    ``proto_noise`` misaligns the generalized head's anchors from the true
    prototypes; ``confusion_pairs`` forces that many prototype pairs to a
    cosine of at least 0.9.
    """

    dim: int = 48
    num_classes: int = 32
    shots: int = 16
    test_per_class: int = 100
    intra_noise: float = 0.10
    proto_noise: float = 0.22
    confusion_pairs: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.dim, self.num_classes, self.shots, self.test_per_class) <= 0:
            raise ValueError("dim, num_classes, shots, test_per_class must be positive")
        if self.intra_noise < 0 or self.proto_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 <= self.confusion_pairs <= self.num_classes // 2:
            raise ValueError("confusion_pairs must be at most num_classes/2")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_classes": self.num_classes,
            "shots": self.shots,
            "test_per_class": self.test_per_class,
            "intra_noise": self.intra_noise,
            "proto_noise": self.proto_noise,
            "confusion_pairs": self.confusion_pairs,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SyntheticDomain:
    """Everything generate_synthetic produces for one seed."""

    train: EmbeddingSet
    test: EmbeddingSet
    generalized_prototypes: np.ndarray
    true_prototypes: np.ndarray
    config: SyntheticConfig = field(compare=False)


def _noisy_copies(rng: np.random.Generator, base: np.ndarray, count: int, sigma: float):
    """``count`` renormalized Gaussian perturbations of one unit vector."""
    if sigma == 0.0:
        return np.repeat(base[None, :], count, axis=0)
    return unit_normalize(base[None, :] + sigma * rng.standard_normal((count, base.size)))


def generate_synthetic(config: SyntheticConfig) -> SyntheticDomain:
    """Deterministically generate a labeled embedding domain.

    Class prototypes are uniform on the unit sphere except for the
    configured confusion pairs, whose second member is placed at a cosine
    drawn from [0.9, 0.975] of the first. Train/test samples are
    renormalized Gaussian perturbations of the true prototypes; the
    generalized anchors are perturbations controlled by ``proto_noise``.
    Identical seeds give bit-identical output.
    """
    rng = np.random.default_rng(config.seed)
    d, n = config.dim, config.num_classes

    protos = unit_normalize(rng.standard_normal((n, d)))
    for k in range(config.confusion_pairs):
        a, b = 2 * k, 2 * k + 1
        target = rng.uniform(0.9, 0.975)
        g = rng.standard_normal(d)
        g -= (g @ protos[a]) * protos[a]
        g = unit_normalize(g)
        protos[b] = target * protos[a] + np.sqrt(1.0 - target * target) * g
    protos.setflags(write=False)

    if config.proto_noise == 0.0:
        anchors = protos.copy()
    else:
        anchors = unit_normalize(
            protos + config.proto_noise * rng.standard_normal((n, d))
        )
    anchors.setflags(write=False)

    names = tuple(f"class_{i:03d}" for i in range(n))

    def draw_split(per_class: int) -> EmbeddingSet:
        vecs = np.concatenate(
            [_noisy_copies(rng, protos[c], per_class, config.intra_noise) for c in range(n)]
        )
        labels = np.repeat(np.arange(n, dtype=np.int64), per_class)
        return EmbeddingSet(vecs, labels, names)

    train = draw_split(config.shots)
    test = draw_split(config.test_per_class)
    return SyntheticDomain(train, test, anchors, protos, config)


def prototype_set(prototypes: np.ndarray, class_names: Sequence[str]) -> EmbeddingSet:
    """Wrap a (C, D) prototype array as a one-sample-per-class set."""
    protos = np.asarray(prototypes, dtype=np.float64)
    return EmbeddingSet(protos, np.arange(protos.shape[0], dtype=np.int64), tuple(class_names))


def write_embedding_file(emb_set: EmbeddingSet, path) -> None:
    """Serialize a set in the EMB1 layout (float32 payload)."""
    vectors32 = emb_set.vectors.astype("<f4")
    if not np.all(np.isfinite(vectors32)):
        raise NonFiniteError("set contains non-finite values")
    parts = [
        MAGIC,
        struct.pack("<III", emb_set.dim, len(emb_set), len(emb_set.class_names)),
    ]
    for name in emb_set.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"class name too long: {name!r}")
        parts.append(struct.pack("<H", len(raw)) + raw)
    for i in range(len(emb_set)):
        parts.append(struct.pack("<I", int(emb_set.labels[i])))
        parts.append(vectors32[i].tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_embedding_file(path, check_norms: bool = True) -> EmbeddingSet:
    """Parse an EMB1 file, validating format, finiteness, and norms.

    Stored float32 values are returned verbatim (as float64), so writing
    the result back yields a byte-identical file. ``check_norms=False``
    skips the unit-norm validation; head checkpoints use the same layout
    for context vectors, which are unconstrained.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an EMB1 file")
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: header truncated")
    dim, count, n_classes = struct.unpack_from("<III", data, 4)
    if dim == 0:
        raise BadHeaderError(f"{path}: zero dimension")
    offset = 16
    names = []
    for _ in range(n_classes):
        if offset + 2 > len(data):
            raise TruncatedFileError(f"{path}: class-name block truncated")
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + length > len(data):
            raise TruncatedFileError(f"{path}: class-name block truncated")
        names.append(data[offset : offset + length].decode("utf-8"))
        offset += length
    record = 4 + 4 * dim
    if offset + count * record != len(data):
        raise TruncatedFileError(
            f"{path}: expected {count} samples of {record} bytes after names"
        )
    labels = np.empty(count, dtype=np.int64)
    vectors = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        (label,) = struct.unpack_from("<I", data, offset)
        offset += 4
        row = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
        labels[i] = label
        vectors[i] = row
    if not np.all(np.isfinite(vectors)):
        raise NonFiniteError(f"{path}: non-finite embedding values")
    if count and check_norms:
        norms = np.linalg.norm(vectors, axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > NORM_TOLERANCE:
            raise NormError(
                f"{path}: vector norm off by {worst:.3e} (> {NORM_TOLERANCE:.0e})"
            )
    if np.any(labels >= max(n_classes, 1)) and count:
        raise BadHeaderError(f"{path}: sample label exceeds class count")
    return EmbeddingSet(vectors, labels, tuple(names))
