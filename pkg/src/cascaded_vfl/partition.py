"""Vertically partitioned datasets.

Every client holds a disjoint slice of the feature columns for all samples;
the labels stay with the server.  Sample order is shared by all parties.
"""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError


@dataclass(frozen=True, eq=False)
class VerticalDataset:
    client_shards: tuple[np.ndarray, ...]
    labels: np.ndarray
    num_classes: int
    split_spec: tuple[tuple[int, int], ...]
    # column order applied before splitting; None for the identity
    column_order: np.ndarray | None = None

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def num_clients(self) -> int:
        return len(self.client_shards)

    @property
    def feature_sizes(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.split_spec)

    def shard(self, client_id: int) -> np.ndarray:
        return self.client_shards[client_id]

    def rows(self, client_id: int, sample_ids) -> np.ndarray:
        return self.client_shards[client_id][sample_ids]

    def reassemble(self) -> np.ndarray:
        """Concatenate the shards back into the original feature matrix."""
        joined = np.concatenate(self.client_shards, axis=1)
        if self.column_order is None:
            return joined
        out = np.empty_like(joined)
        out[:, self.column_order] = joined
        return out


def feature_ranges(num_features: int, num_clients: int) -> list[tuple[int, int]]:
    """Contiguous ranges; the first ``D mod M`` clients get one extra column."""
    if num_clients < 1:
        raise InputError(f"need at least one client, got {num_clients}")
    if num_features < num_clients:
        raise InputError(f"cannot split {num_features} features among {num_clients} clients")
    base, extra = divmod(num_features, num_clients)
    ranges, start = [], 0
    for m in range(num_clients):
        size = base + (1 if m < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


def split_features(
    features: np.ndarray,
    labels: np.ndarray,
    num_clients: int,
    num_classes: int | None = None,
    shuffle_rng: np.random.Generator | None = None,
) -> VerticalDataset:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2:
        raise InputError(f"features must be a matrix, got shape {features.shape}")
    n, d = features.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    ranges = feature_ranges(d, num_clients)
    order = None
    if shuffle_rng is not None:
        order = shuffle_rng.permutation(d)
        features = features[:, order]
    shards = tuple(np.ascontiguousarray(features[:, a:b]) for a, b in ranges)
    for s in shards:
        s.setflags(write=False)
    labels.setflags(write=False)
    return VerticalDataset(shards, labels, int(num_classes), tuple(ranges), order)


def make_synthetic(
    n: int, num_features: int, num_classes: int, separation: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs with unit covariance around ``separation * e_c``.

    The class directions ``e_c`` are random unit vectors, mutually orthogonal
    whenever ``num_classes <= num_features``.
    """
    if min(n, num_features, num_classes) < 1:
        raise InputError("n, num_features and num_classes must all be >= 1")
    raw = rng.standard_normal((num_features, num_classes))
    if num_classes <= num_features:
        q, r = np.linalg.qr(raw)
        directions = (q * np.sign(np.diag(r))).T
    else:
        directions = (raw / np.linalg.norm(raw, axis=0)).T
    labels = rng.permutation(np.arange(n) % num_classes)
    features = separation * directions[labels] + rng.standard_normal((n, num_features))
    return features, labels


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def load_csv_dataset(path, has_header: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Read ``label,f_0,...,f_{D-1}`` rows (plain or gzipped).

    Pixel data (integral values in [0, 255] with a maximum above 1) is scaled
    to [0, 1]; anything else is returned unchanged.
    """
    path = Path(path)
    labels, rows = [], []
    width = None
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ParseError("need a label and at least one feature", row=lineno)
            elif len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", row=lineno)
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise ParseError(f"label {row[0]!r} is not an integer", row=lineno) from None
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), row=lineno) from None
    if not rows:
        raise InputError(f"{path} contains no data rows")
    features = np.array(rows, dtype=np.float64)
    top = features.max()
    if 1.0 < top <= 255.0 and features.min() >= 0.0 and np.all(features == np.round(features)):
        features /= 255.0
    return features, np.array(labels, dtype=np.int64)
