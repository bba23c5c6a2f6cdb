"""Dataset and knowledge ingestion.

Loads sample CSVs and the class/attribute description table, normalizes
features with train-split statistics, builds seen/unseen class splits,
draws per-class balanced batches, and generates a synthetic benchmark
whose attributes are linearly decodable by construction.

On-disk formats:
  - sample CSV: no header, each row ``f_1,...,f_d,label``
  - attribute CSV: header ``class,att_1,...,att_M``, binary cells
  - split JSON: ``{"group": "A"}`` or ``{"group": "...", "seen": [...], "unseen": [...]}``
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    """Malformed input file. Carries the offending 1-based row when known."""

    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SplitError(ValueError):
    """Seen/unseen split does not partition the configured class set."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AttributeMatrix:
    """Binary class/attribute table plus the seen/unseen partition.

    ``rows[i]`` is the attribute signature of ``class_ids[i]``. Rows must be
    pairwise distinct: exact signature matching downstream relies on unique
    rows. ``seen_mask[i]`` marks classes available at training time.
    """

    class_ids: tuple
    rows: np.ndarray
    seen_mask: np.ndarray
    attribute_names: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        mask = np.asarray(self.seen_mask, dtype=bool)
        if rows.ndim != 2:
            raise DataFormatError("attribute rows must form a 2-D table")
        if len(self.class_ids) != rows.shape[0] or mask.shape != (rows.shape[0],):
            raise DataFormatError("class ids, rows and seen mask disagree in length")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DataFormatError("duplicate class id")
        if not np.isin(rows, (0, 1)).all():
            raise DataFormatError("attribute entries must be 0 or 1")
        seen_rows = {tuple(r) for r in rows}
        if len(seen_rows) != rows.shape[0]:
            raise DataFormatError("duplicate attribute rows; signatures must be unique")
        if not mask.any():
            raise SplitError("at least one class must be seen")
        if len(self.attribute_names) != rows.shape[1]:
            raise DataFormatError("attribute name count does not match columns")
        object.__setattr__(self, "rows", _freeze(rows))
        object.__setattr__(self, "seen_mask", _freeze(mask))
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        object.__setattr__(
            self, "_index", {c: i for i, c in enumerate(self.class_ids)}
        )

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def n_attributes(self) -> int:
        return int(self.rows.shape[1])

    @property
    def seen_ids(self) -> tuple:
        return tuple(c for c, s in zip(self.class_ids, self.seen_mask) if s)

    @property
    def unseen_ids(self) -> tuple:
        return tuple(c for c, s in zip(self.class_ids, self.seen_mask) if not s)

    @property
    def seen_rows(self) -> np.ndarray:
        return self.rows[self.seen_mask]

    @property
    def unseen_rows(self) -> np.ndarray:
        return self.rows[~self.seen_mask]

    def index_of(self, class_id: int) -> int:
        try:
            return self._index[int(class_id)]
        except KeyError:
            raise KeyError(f"class {class_id} not in attribute matrix") from None

    def row(self, class_id: int) -> np.ndarray:
        return self.rows[self.index_of(class_id)]

    def with_split(self, seen_ids: Iterable[int], unseen_ids: Iterable[int]) -> "AttributeMatrix":
        """Return a copy with the seen/unseen partition applied."""
        seen = {int(c) for c in seen_ids}
        unseen = {int(c) for c in unseen_ids}
        if seen & unseen:
            raise SplitError(f"classes in both partitions: {sorted(seen & unseen)}")
        known = set(self.class_ids)
        if seen | unseen != known:
            missing = sorted(known - (seen | unseen))
            extra = sorted((seen | unseen) - known)
            raise SplitError(f"split does not cover class set (missing {missing}, unknown {extra})")
        mask = np.array([c in seen for c in self.class_ids], dtype=bool)
        return AttributeMatrix(self.class_ids, self.rows.copy(), mask, self.attribute_names)


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable sample table with labels and merged attribute rows."""

    samples: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    split_tag: str

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        attributes = np.asarray(self.attributes, dtype=np.int64)
        if samples.ndim != 2:
            raise DataFormatError("samples must be a 2-D array")
        n = samples.shape[0]
        if labels.shape != (n,) or attributes.shape[0] != n:
            raise DataFormatError("samples, labels and attributes disagree in length")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        object.__setattr__(self, "samples", _freeze(samples))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "attributes", _freeze(attributes))

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.samples.shape[1])


def build_dataset(
    samples: np.ndarray,
    labels: np.ndarray,
    matrix: AttributeMatrix,
    split_tag: str,
) -> LabeledDataset:
    """Merge attribute rows onto samples by label and validate the split rule."""
    labels = np.asarray(labels, dtype=np.int64)
    for lab in np.unique(labels):
        if int(lab) not in matrix.class_ids:
            raise DataFormatError(f"label {int(lab)} not present in attribute matrix")
    if split_tag == "train":
        seen = set(matrix.seen_ids)
        bad = sorted({int(l) for l in labels} - seen)
        if bad:
            raise DataFormatError(f"train split contains unseen classes {bad}")
    attrs = np.stack([matrix.row(int(l)) for l in labels]) if len(labels) else np.zeros(
        (0, matrix.n_attributes), dtype=np.int64
    )
    return LabeledDataset(samples, labels, attrs, split_tag)


# ---------------------------------------------------------------------------
# CSV loading


def load_attribute_matrix(path: str) -> AttributeMatrix:
    """Read the class/attribute CSV. All classes start out marked seen;
    apply the real partition afterwards with :meth:`AttributeMatrix.with_split`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("attribute file is empty") from None
        if len(header) < 2:
            raise DataFormatError("header must name a class column and at least one attribute", row=1)
        names = tuple(h.strip() for h in header[1:])
        class_ids, rows = [], []
        for rownum, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} cells, found {len(cells)}", row=rownum
                )
            try:
                class_ids.append(int(cells[0]))
            except ValueError:
                raise DataFormatError(f"class id {cells[0]!r} is not an integer", row=rownum) from None
            vals = []
            for cell in cells[1:]:
                cell = cell.strip()
                if cell not in ("0", "1"):
                    raise DataFormatError(f"attribute cell {cell!r} is not 0/1", row=rownum)
                vals.append(int(cell))
            rows.append(vals)
    if not rows:
        raise DataFormatError("attribute file has no data rows")
    seen = set()
    for i, r in enumerate(rows):
        key = tuple(r)
        if key in seen:
            raise DataFormatError("duplicate attribute row", row=i + 2)
        seen.add(key)
    mask = np.ones(len(rows), dtype=bool)
    return AttributeMatrix(tuple(class_ids), np.array(rows), mask, names)


def save_attribute_matrix(path: str, matrix: AttributeMatrix) -> None:
    """Write the class/attribute CSV in the loader's format. The seen/unseen
    partition is not part of the file; ship it separately."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", *matrix.attribute_names])
        for cid in matrix.class_ids:
            writer.writerow([int(cid), *[int(v) for v in matrix.row(cid)]])


def load_dataset_csv(
    path: str,
    matrix: AttributeMatrix,
    split_tag: str = "train",
    preprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    allow_empty: bool = False,
) -> LabeledDataset:
    """Read a headerless sample CSV (``f_1,...,f_d,label`` per row)."""
    samples, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for rownum, cells in enumerate(csv.reader(fh), start=1):
            if not cells:
                continue
            if width is None:
                width = len(cells)
                if width < 2:
                    raise DataFormatError("rows need at least one feature and a label", row=rownum)
            elif len(cells) != width:
                raise DataFormatError(f"expected {width} cells, found {len(cells)}", row=rownum)
            try:
                feats = [float(c) for c in cells[:-1]]
            except ValueError:
                raise DataFormatError("non-numeric feature cell", row=rownum) from None
            try:
                lab = int(cells[-1])
            except ValueError:
                raise DataFormatError(f"label {cells[-1]!r} is not an integer", row=rownum) from None
            if lab not in matrix.class_ids:
                raise DataFormatError(f"label {lab} not present in attribute matrix", row=rownum)
            samples.append(feats)
            labels.append(lab)
    if not samples:
        if allow_empty:
            return build_dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64),
                                 matrix, split_tag)
        raise DataFormatError("dataset file has no data rows")
    X = np.array(samples, dtype=np.float64)
    if preprocess is not None:
        X = preprocess(X)
    return build_dataset(X, np.array(labels), matrix, split_tag)


def save_dataset_csv(path: str, dataset: LabeledDataset) -> None:
    """Write a dataset back out; float cells use shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, lab in zip(dataset.samples, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(lab)])


def denoise(samples: np.ndarray) -> np.ndarray:
    """Signal-denoising hook. Currently the identity; kept as the seam where
    a real filter would slot in front of normalization."""
    return samples


def matrix_fingerprint(matrix: AttributeMatrix) -> str:
    """Stable hash of the attribute table and its partition. Checkpoints embed
    this so a model is never resumed against a different knowledge base."""
    payload = {
        "class_ids": list(matrix.class_ids),
        "rows": matrix.rows.tolist(),
        "seen": matrix.seen_mask.tolist(),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class ZScoreStats:
    """Per-feature location/scale, fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be matching 1-D arrays")
        if not (std > 0).all():
            raise ValueError("std must be strictly positive after flooring")
        object.__setattr__(self, "mean", _freeze(mean))
        object.__setattr__(self, "std", _freeze(std))


def zscore_fit(train: LabeledDataset) -> ZScoreStats:
    """Population (1/N) statistics; constant features floored to STD_FLOOR."""
    mean = train.samples.mean(axis=0)
    std = train.samples.std(axis=0)  # ddof=0
    return ZScoreStats(mean, np.maximum(std, STD_FLOOR))


def zscore_apply(stats: ZScoreStats, dataset: LabeledDataset) -> LabeledDataset:
    if stats.mean.shape[0] != dataset.n_features:
        raise ValueError("stats dimensionality does not match dataset")
    scaled = (dataset.samples - stats.mean) / stats.std
    return LabeledDataset(scaled, dataset.labels, dataset.attributes, dataset.split_tag)


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    name: str
    seen: tuple
    unseen: tuple


# Benchmark seen/unseen groups; target (unseen) classes per group.
_GROUP_UNSEEN = {
    "A": (1, 7, 15),
    "B": (2, 10, 13),
    "C": (3, 6, 14),
    "D": (1, 6, 10),
    "E": (4, 8, 11),
}

BUILTIN_SPLITS = {
    name: SplitSpec(
        name,
        tuple(c for c in range(1, 16) if c not in unseen),
        unseen,
    )
    for name, unseen in _GROUP_UNSEEN.items()
}


def make_split(group, full_class_set: Iterable[int]):
    """Resolve a group name or explicit SplitSpec against the class set.

    Returns (seen_ids, unseen_ids) as sorted tuples."""
    if isinstance(group, str):
        try:
            spec = BUILTIN_SPLITS[group.upper()]
        except KeyError:
            raise SplitError(f"unknown split group {group!r}") from None
    elif isinstance(group, SplitSpec):
        spec = group
    else:
        raise TypeError("group must be a name or a SplitSpec")
    seen = {int(c) for c in spec.seen}
    unseen = {int(c) for c in spec.unseen}
    full = {int(c) for c in full_class_set}
    if seen & unseen:
        raise SplitError(f"classes in both partitions: {sorted(seen & unseen)}")
    if seen | unseen != full:
        missing = sorted(full - (seen | unseen))
        extra = sorted((seen | unseen) - full)
        raise SplitError(f"split does not cover class set (missing {missing}, unknown {extra})")
    if not seen:
        raise SplitError("at least one class must be seen")
    return tuple(sorted(seen)), tuple(sorted(unseen))


def load_split_json(path: str) -> SplitSpec:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"split file is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise DataFormatError("split file must hold a JSON object")
    name = payload.get("group", "custom")
    if "seen" in payload or "unseen" in payload:
        if not ("seen" in payload and "unseen" in payload):
            raise DataFormatError("custom split needs both 'seen' and 'unseen' lists")
        return SplitSpec(str(name), tuple(payload["seen"]), tuple(payload["unseen"]))
    if isinstance(name, str) and name.upper() in BUILTIN_SPLITS:
        return BUILTIN_SPLITS[name.upper()]
    raise DataFormatError(f"unknown split group {name!r} and no explicit lists")


# ---------------------------------------------------------------------------
# Batching


class Batch(NamedTuple):
    samples: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray


def sample_balanced_batch(
    train: LabeledDataset, matrix: AttributeMatrix, batch_per_class: int, rng: np.random.Generator
) -> Batch:
    """Draw batch_per_class samples from every seen class (block-ordered by
    ascending class id). Classes smaller than the quota are drawn with
    replacement so the batch shape stays fixed."""
    if batch_per_class < 1:
        raise ValueError("batch_per_class must be >= 1")
    xs, ys, zs = [], [], []
    for class_id in sorted(matrix.seen_ids):
        idx = np.flatnonzero(train.labels == class_id)
        if idx.size == 0:
            raise ValueError(f"seen class {class_id} has no training samples")
        pick = rng.choice(idx, size=batch_per_class, replace=idx.size < batch_per_class)
        xs.append(train.samples[pick])
        ys.append(train.labels[pick])
        zs.append(train.attributes[pick])
    return Batch(np.concatenate(xs), np.concatenate(ys), np.concatenate(zs))


# ---------------------------------------------------------------------------
# Synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale benchmark: class prototypes are a fixed linear map of the
    attribute rows, so every attribute is linearly decodable from samples."""

    n_classes: int = 6
    n_attributes: int = 5
    n_features: int = 20
    train_per_class: int = 200
    test_per_class: int = 100
    noise_scale: float = 0.1
    n_unseen: int = 2
    prototype_scale: float = 1.0


def _random_attribute_rows(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Distinct binary rows; every column varies within the seen block so each
    attribute value has donors in the training data."""
    L, M = spec.n_classes, spec.n_attributes
    p = L - spec.n_unseen
    for _ in range(10_000):
        rows = rng.integers(0, 2, size=(L, M))
        if len({tuple(r) for r in rows}) != L:
            continue
        seen_block = rows[:p]
        if ((seen_block.min(axis=0) == 0) & (seen_block.max(axis=0) == 1)).all():
            return rows
    raise RuntimeError("could not draw a usable attribute table; enlarge the class set")


def synth_generate(spec: SyntheticSpec, seed: int):
    """Build (AttributeMatrix, train, test) from a SyntheticSpec, deterministically.

    Seen classes are ids 1..p, unseen ids p+1..L. Train holds seen classes
    only; test holds every class."""
    if spec.n_unseen >= spec.n_classes:
        raise ValueError("need at least one seen class")
    if spec.n_attributes > spec.n_features:
        warnings.warn("more attributes than features; decodability not guaranteed")
    rng = np.random.default_rng(seed)
    rows = _random_attribute_rows(spec, rng)
    L = spec.n_classes
    p = L - spec.n_unseen
    class_ids = tuple(range(1, L + 1))
    names = tuple(f"att_{k + 1}" for k in range(spec.n_attributes))
    mask = np.array([i < p for i in range(L)])
    matrix = AttributeMatrix(class_ids, rows, mask, names)

    W = rng.normal(scale=spec.prototype_scale, size=(spec.n_features, spec.n_attributes))
    prototypes = rows @ W.T  # row c: mu_c = W @ a_c

    def draw(per_class: int, ids: Sequence[int], tag: str) -> LabeledDataset:
        xs, ys = [], []
        for cid in ids:
            mu = prototypes[matrix.index_of(cid)]
            noise = rng.normal(scale=spec.noise_scale, size=(per_class, spec.n_features))
            xs.append(mu + noise)
            ys.extend([cid] * per_class)
        return build_dataset(np.concatenate(xs), np.array(ys), matrix, tag)

    train = draw(spec.train_per_class, matrix.seen_ids, "train")
    test = draw(spec.test_per_class, class_ids, "test")
    return matrix, train, test
