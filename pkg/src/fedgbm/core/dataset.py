"""In-memory dataset: ids, a float32 feature matrix and optional labels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedgbm.errors import DataError


@dataclass
class Dataset:
    ids: list[bytes]
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ids = [x.encode() if isinstance(x, str) else bytes(x) for x in self.ids]
        X = np.asarray(self.features, dtype=np.float32)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] != len(self.ids):
            raise DataError(f"feature matrix shape {X.shape} does not match {len(self.ids)} ids")
        # column-major: split search and binning walk one feature at a time
        self.features = np.asfortranarray(X)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (len(self.ids),):
                raise DataError("labels must have one entry per id")
            if not np.isin(y, (0, 1)).all():
                raise DataError("labels must be 0 or 1")
            self.labels = y.astype(np.int8)
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate ids")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(X.shape[1])]
        if len(self.feature_names) != X.shape[1]:
            raise DataError("feature_names length does not match the column count")

    @property
    def n_samples(self) -> int:
        return len(self.ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n_samples

    def column(self, j: int) -> np.ndarray:
        return self.features[:, j]

    def subset(self, rows, name: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset([self.ids[i] for i in rows], self.features[rows],
                       None if self.labels is None else self.labels[rows],
                       self.name if name is None else name, list(self.feature_names))

    def select_columns(self, cols, name: str | None = None, keep_labels: bool = True) -> "Dataset":
        cols = list(cols)
        return Dataset(list(self.ids), self.features[:, cols],
                       self.labels if keep_labels else None,
                       self.name if name is None else name, [self.feature_names[c] for c in cols])

    def align(self, ids) -> "Dataset":
        """Rows reordered to follow ``ids`` (all of which must be present)."""
        index = {x: i for i, x in enumerate(self.ids)}
        try:
            rows = [index[x] for x in ids]
        except KeyError as exc:
            raise DataError(f"id {exc.args[0]!r} not present in {self.name or 'dataset'}") from None
        return self.subset(rows)


def hstack(a: Dataset, b: Dataset, name: str = "joined") -> Dataset:
    """Join two views with identical id order; labels come from ``a``."""
    if a.ids != b.ids:
        raise DataError("views are not aligned on ids")
    return Dataset(list(a.ids), np.hstack([a.features, b.features]), a.labels, name,
                   list(a.feature_names) + list(b.feature_names))
