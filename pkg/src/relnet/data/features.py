"""Zero-shot feature tables: per-item feature vectors plus per-class attributes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from relnet.data.images import DataError

SPLIT_VALUES = ("seen", "unseen")


@dataclass
class FeatureTable:
    """Item features with class labels, class attribute vectors and a seen/unseen partition.

    ``class_ids`` fixes the row order of ``attributes``.
    """

    rows: np.ndarray
    labels: list
    class_ids: list
    attributes: np.ndarray
    seen: frozenset
    unseen: frozenset

    def __post_init__(self):
        if self.rows.ndim != 2 or len(self.rows) == 0:
            raise DataError("feature table has no rows")
        if len(self.labels) != len(self.rows):
            raise DataError(f"{len(self.labels)} labels for {len(self.rows)} feature rows")
        if self.attributes.shape[0] != len(self.class_ids):
            raise DataError("attribute matrix does not match the class list")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DataError("duplicate class ids in attribute table")
        known = set(self.class_ids)
        missing = sorted(set(self.labels) - known)
        if missing:
            raise DataError(f"no attribute row for class {missing[0]!r}")
        if self.seen & self.unseen:
            raise DataError(f"classes both seen and unseen: {sorted(self.seen & self.unseen)[:5]}")
        if (self.seen | self.unseen) != known:
            gap = sorted(known - (self.seen | self.unseen)) or sorted((self.seen | self.unseen) - known)
            raise DataError(f"seen/unseen split does not cover the attribute classes exactly: {gap[:5]}")
        self._index = {c: i for i, c in enumerate(self.class_ids)}

    @property
    def feature_dim(self) -> int:
        return self.rows.shape[1]

    @property
    def attribute_dim(self) -> int:
        return self.attributes.shape[1]

    def ordered(self, which: str) -> list:
        """Class ids of one side of the split (``seen``, ``unseen`` or ``all``), in table order."""
        pool = {"seen": self.seen, "unseen": self.unseen, "all": self.seen | self.unseen}[which]
        return [c for c in self.class_ids if c in pool]

    def attributes_for(self, class_ids) -> np.ndarray:
        return self.attributes[[self._index[c] for c in class_ids]]

    def rows_for(self, class_ids) -> tuple[np.ndarray, list]:
        wanted = set(class_ids)
        idx = [i for i, c in enumerate(self.labels) if c in wanted]
        return self.rows[idx], [self.labels[i] for i in idx]


def _parse_float(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def _read_csv(path, kind: str) -> list[list[str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{kind} file {path} not found")
    with open(path, newline="") as fh:
        rows = [[f.strip() for f in r] for r in csv.reader(fh) if any(f.strip() for f in r)]
    return rows


def _numeric_rows(path, kind: str) -> tuple[list[str], np.ndarray]:
    rows = _read_csv(path, kind)
    # class ids may be names, so a header is recognised by its value columns
    if rows and any(_parse_float(f) is None for f in rows[0][1:]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{kind} file {path} is empty")
    width = len(rows[0])
    if width < 2:
        raise DataError(f"{kind} file {path}: expected a class id followed by values")
    ids, values = [], []
    for lineno, r in enumerate(rows, 1):
        if len(r) != width:
            raise DataError(f"{kind} file {path}: row {lineno} has {len(r) - 1} values, expected {width - 1}")
        nums = [_parse_float(f) for f in r[1:]]
        if any(v is None for v in nums):
            raise DataError(f"{kind} file {path}: non-numeric value in row {lineno}")
        ids.append(r[0])
        values.append(nums)
    return ids, np.asarray(values, dtype=np.float64)


def load_feature_table(features_path, attributes_path, split_path) -> FeatureTable:
    """Load and validate the three CSV files of a zero-shot benchmark.

    features: ``class_id, f1, ..., fD`` per item; attributes:
    ``class_id, a1, ..., aA`` per class; split: ``class_id, seen|unseen``.
    A leading header row is skipped when its value columns are not numeric.
    """
    labels, feats = _numeric_rows(features_path, "features")
    class_ids, attrs = _numeric_rows(attributes_path, "attributes")
    seen_twice = sorted({c for c in class_ids if class_ids.count(c) > 1})
    if seen_twice:
        raise DataError(f"duplicate attribute rows for class {seen_twice[0]!r}")
    split_rows = _read_csv(split_path, "split")
    if split_rows and split_rows[0][1:2] and split_rows[0][1] not in SPLIT_VALUES:
        split_rows = split_rows[1:]
    seen, unseen = set(), set()
    known = set(class_ids)
    for lineno, r in enumerate(split_rows, 1):
        if len(r) != 2 or r[1] not in SPLIT_VALUES:
            raise DataError(f"split file {split_path}: row {lineno} must be 'class_id,seen|unseen'")
        if r[0] not in known:
            raise DataError(f"split file {split_path} names unknown class {r[0]!r}")
        if r[0] in seen or r[0] in unseen:
            raise DataError(f"split file {split_path} lists class {r[0]!r} twice")
        (seen if r[1] == "seen" else unseen).add(r[0])
    missing = sorted(set(labels) - known)
    if missing:
        raise DataError(f"features reference class {missing[0]!r} which has no attribute row")
    return FeatureTable(feats.astype(np.float32), labels, class_ids, attrs.astype(np.float32),
                        frozenset(seen), frozenset(unseen))


def write_feature_table(table: FeatureTable, features_path, attributes_path, split_path) -> None:
    """Write the CSV triple read by :func:`load_feature_table` (no headers)."""
    with open(features_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for label, row in zip(table.labels, table.rows):
            w.writerow([label, *(repr(float(v)) for v in row)])
    with open(attributes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for cid, row in zip(table.class_ids, table.attributes):
            w.writerow([cid, *(repr(float(v)) for v in row)])
    with open(split_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for cid in table.class_ids:
            w.writerow([cid, "seen" if cid in table.seen else "unseen"])


def make_synthetic_zsl(n_seen: int = 40, n_unseen: int = 10, dim: int = 32, train_per_class: int = 60,
                       test_per_class: int = 20, item_noise: float = 0.1, attribute_noise: float = 0.05,
                       seed: int = 0) -> tuple[FeatureTable, FeatureTable]:
    """Synthetic zero-shot benchmark with class centroids as the hidden link.

    Class centroids are uniform in ``[0, 1]^dim``; a class's attribute vector
    is its centroid plus Gaussian noise and its items are non-negative noisy
    copies of the centroid.  Returns ``(train, test)``: train holds items of
    seen classes only, test holds fresh items of every class.
    """
    rng = np.random.default_rng(seed)
    n = n_seen + n_unseen
    ids = [f"class{i:03d}" for i in range(n)]
    centroids = rng.uniform(0.0, 1.0, size=(n, dim))
    attributes = (centroids + rng.normal(0.0, attribute_noise, size=(n, dim))).astype(np.float32)
    seen = frozenset(ids[:n_seen])
    unseen = frozenset(ids[n_seen:])

    def items(class_idx, count):
        rows = np.concatenate([np.maximum(centroids[c] + rng.normal(0.0, item_noise, size=(count, dim)), 0.0)
                               for c in class_idx])
        labels = [ids[c] for c in class_idx for _ in range(count)]
        return rows.astype(np.float32), labels

    train_rows, train_labels = items(range(n_seen), train_per_class)
    test_rows, test_labels = items(range(n), test_per_class)
    train = FeatureTable(train_rows, train_labels, ids, attributes, seen, unseen)
    test = FeatureTable(test_rows, test_labels, ids, attributes, seen, unseen)
    return train, test
