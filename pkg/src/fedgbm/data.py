"""Table loading, vertical partitioning and train/test splits.

Supported inputs are CSV with a header row and LIBSVM text, either optionally
gzip-compressed. Partitioned files are written as CSV with an ``id`` column,
a ``label`` column on A's side, and the feature columns.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fedgbm.core.dataset import Dataset
from fedgbm.errors import ConfigError, DataError

MISSING = {"", "na", "nan", "?", "null"}
FORMATS = ("csv", "libsvm")


def _open_text(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def guess_format(path) -> str:
    name = Path(path).name.lower().removesuffix(".gz")
    if name.endswith(".csv"):
        return "csv"
    if name.endswith((".libsvm", ".svm", ".txt")) or "." not in name:
        return "libsvm"
    raise DataError(f"cannot tell the format of {path}; pass it explicitly")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _to_float(tok: str, row: int, col: str) -> float:
    if tok.strip().lower() in MISSING:
        return math.nan
    try:
        return float(tok)
    except ValueError:
        raise DataError(f"row {row}: non-numeric value {tok!r} in column {col!r}") from None


def _parse_label(tok: str, row: int) -> int:
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"row {row}: label {tok!r} is not numeric") from None
    if v == 1.0:
        return 1
    if v in (0.0, -1.0):
        return 0
    raise DataError(f"row {row}: label {tok!r} is not binary")


def load_csv(path, id_column: str | None = "id", label_column: str | None = "label",
             name: str | None = None) -> Dataset:
    """Read a CSV table. Missing id column means ids are row numbers."""
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        id_at = header.index(id_column) if id_column in header else None
        label_at = header.index(label_column) if label_column in header else None
        feat_at = [i for i in range(len(header)) if i not in (id_at, label_at)]
        ids, rows, labels = [], [], []
        for r, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"row {r}: expected {len(header)} fields, found {len(rec)}")
            ids.append(rec[id_at].strip() if id_at is not None else str(len(ids)))
            if label_at is not None:
                labels.append(_parse_label(rec[label_at], r))
            rows.append([_to_float(rec[i], r, header[i]) for i in feat_at])
    X = np.array(rows, dtype=np.float32).reshape(len(rows), len(feat_at))
    return Dataset(ids, X, np.array(labels, dtype=np.int8) if label_at is not None else None,
                   name or Path(path).stem, [header[i] for i in feat_at])


def load_libsvm(path, n_features: int | None = None, name: str | None = None) -> Dataset:
    """Read ``label idx:val ...`` rows; indices are 1-based, absent entries are 0."""
    labels, entries = [], []
    width = 0
    with _open_text(path) as fh:
        for r, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            labels.append(_parse_label(toks[0], r))
            row = []
            for tok in toks[1:]:
                idx, sep, val = tok.partition(":")
                if not sep or not idx.isdigit() or int(idx) < 1:
                    raise DataError(f"row {r}: malformed entry {tok!r}")
                row.append((int(idx) - 1, _to_float(val, r, idx)))
                width = max(width, int(idx))
            entries.append(row)
    if n_features is not None:
        if width > n_features:
            raise DataError(f"feature index {width} exceeds the declared {n_features}")
        width = n_features
    X = np.zeros((len(entries), width), dtype=np.float32)
    for i, row in enumerate(entries):
        for j, v in row:
            X[i, j] = v
    return Dataset([str(i) for i in range(len(entries))], X, np.array(labels, dtype=np.int8),
                   name or Path(path).name.split(".")[0], [f"f{j + 1}" for j in range(width)])


def load_table(path, format: str | None = None, **kw) -> Dataset:
    fmt = format or guess_format(path)
    if fmt == "csv":
        return load_csv(path, **kw)
    if fmt == "libsvm":
        return load_libsvm(path, **kw)
    raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def write_csv(ds: Dataset, path) -> Path:
    """Write ``id[,label],features``; float32 values survive the round trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_label = ds.labels is not None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + (["label"] if has_label else []) + list(ds.feature_names))
        for i, rid in enumerate(ds.ids):
            vals = ["" if math.isnan(v) else f"{v:.9g}" for v in ds.features[i].tolist()]
            w.writerow([rid.decode()] + ([int(ds.labels[i])] if has_label else []) + vals)
    return path


def salted_ids(n: int, salt: bytes) -> list[str]:
    """Row numbers rendered as 16-byte salted tokens (hex)."""
    return [hashlib.sha256(salt + i.to_bytes(8, "big")).digest()[:16].hex() for i in range(n)]


@dataclass
class PartitionSpec:
    """How to cut one table into A's and B's views.

    ``a_features``/``b_features`` are counts or explicit column-name lists;
    ``None`` for one side means "all remaining columns".
    """
    a_features: int | list | None = None
    b_features: int | list | None = None
    seed: int = 0
    id_column: str | None = None
    label_column: str = "label"
    drop_rate: float = 0.0

    def resolve(self, names: list[str]) -> tuple[list[int], list[int]]:
        """Column indices for A and B, each in source order."""
        n = len(names)
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate must lie in [0, 1)")
        a, b = self.a_features, self.b_features
        if isinstance(a, (list, tuple)) or isinstance(b, (list, tuple)):
            pos = {c: i for i, c in enumerate(names)}

            def pick(cols):
                try:
                    return [pos[c] for c in cols]
                except KeyError as exc:
                    raise ConfigError(f"unknown column {exc.args[0]!r}") from None
            ia = pick(a) if isinstance(a, (list, tuple)) else None
            ib = pick(b) if isinstance(b, (list, tuple)) else None
            if ia is None:
                ia = [i for i in range(n) if i not in set(ib)]
            if ib is None:
                ib = [i for i in range(n) if i not in set(ia)]
        else:
            if a is None and b is None:
                a = n // 2
            na = a if a is not None else n - b
            nb = b if b is not None else n - na
            if na < 0 or nb < 0:
                raise ConfigError("feature counts must be non-negative")
            if na + nb != n:
                raise ConfigError(f"feature counts {na}+{nb} do not cover {n} columns")
            perm = np.random.default_rng(self.seed).permutation(n)
            ia, ib = sorted(perm[:na].tolist()), sorted(perm[na:].tolist())
        if set(ia) & set(ib):
            raise ConfigError("A and B feature lists overlap")
        if len(set(ia)) != len(ia) or len(set(ib)) != len(ib):
            raise ConfigError("duplicate columns in a feature list")
        if set(ia) | set(ib) != set(range(n)):
            raise ConfigError("feature lists must cover every feature column")
        return sorted(ia), sorted(ib)


def vertical_partition(ds: Dataset, spec: PartitionSpec) -> tuple[Dataset, Dataset]:
    """Split columns between A (with labels) and B (without).

    Without an id column the row numbers become salted tokens derived from the
    seed. A positive ``drop_rate`` removes an independent random id subset from
    each side so the two id sets differ.
    """
    if ds.labels is None:
        raise DataError("the source table has no labels")
    ia, ib = spec.resolve(ds.feature_names)
    rng = np.random.default_rng(spec.seed)
    ids = ds.ids
    if spec.id_column is None:
        salt = hashlib.sha256(b"fedgbm-ids" + str(spec.seed).encode()).digest()
        ids = [t.encode() for t in salted_ids(ds.n_samples, salt)]
    full = Dataset(ids, ds.features, ds.labels, ds.name, list(ds.feature_names))

    def keep_rows():
        if spec.drop_rate <= 0:
            return np.arange(full.n_samples)
        keep = rng.random(full.n_samples) >= spec.drop_rate
        return np.flatnonzero(keep)

    ra, rb = keep_rows(), keep_rows()
    a = full.select_columns(ia, name=f"{ds.name}-A").subset(ra)
    b = full.select_columns(ib, name=f"{ds.name}-B", keep_labels=False).subset(rb)
    return a, b


def train_test_split(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split, stratified by label when labels exist.

    The training size is ``round(ratio * n)``; per-class quotas are allotted
    by largest remainder so class ratios hold to within one sample.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError("ratio must lie in (0, 1)")
    n = ds.n_samples
    rng = np.random.default_rng(seed)
    n_train = int(round(ratio * n))
    groups = [np.arange(n)] if ds.labels is None else [
        np.flatnonzero(ds.labels == c) for c in (0, 1)]
    exact = [ratio * len(gr) for gr in groups]
    quota = [int(math.floor(e)) for e in exact]
    for i in sorted(range(len(groups)), key=lambda i: quota[i] - exact[i])[:n_train - sum(quota)]:
        quota[i] += 1
    train_rows = []
    for gr, q in zip(groups, quota):
        train_rows.append(rng.permutation(gr)[:q])
    tr = np.sort(np.concatenate(train_rows))
    mask = np.zeros(n, dtype=bool)
    mask[tr] = True
    return ds.subset(tr, f"{ds.name}-train"), ds.subset(np.flatnonzero(~mask), f"{ds.name}-test")


def test_path(path) -> Path:
    """``a.csv`` -> ``a.test.csv``: where a partition's held-out rows go."""
    p = Path(path)
    return p.with_name(p.stem + ".test" + p.suffix)


@dataclass
class PartitionManifest:
    source: str
    source_sha256: str
    format: str
    spec: dict
    test_ratio: float
    split_seed: int
    outputs: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": "partition", **asdict(self)}


def partition_files(source, out_a, out_b, spec: PartitionSpec, format: str | None = None,
                    test_ratio: float = 0.2, split_seed: int | None = None,
                    manifest_path=None) -> PartitionManifest:
    """Load, split train/test, partition and write all files plus a manifest."""
    fmt = format or guess_format(source)
    ds = load_table(source, fmt)
    a, b = vertical_partition(ds, spec)
    split_seed = spec.seed if split_seed is None else split_seed
    outputs = {}
    if test_ratio > 0:
        # split on A's labelled rows; B follows A's id assignment
        a_tr, a_te = train_test_split(a, 1.0 - test_ratio, split_seed)
        test_ids = set(a_te.ids)
        in_test = np.array([x in test_ids for x in b.ids], dtype=bool)
        b_tr, b_te = b.subset(np.flatnonzero(~in_test)), b.subset(np.flatnonzero(in_test))
        pairs = [(a_tr, out_a), (a_te, test_path(out_a)), (b_tr, out_b), (b_te, test_path(out_b))]
    else:
        pairs = [(a, out_a), (b, out_b)]
    for d, p in pairs:
        write_csv(d, p)
        outputs[str(p)] = {"rows": d.n_samples, "columns": d.n_features,
                           "sha256": file_digest(p)}
    man = PartitionManifest(str(source), file_digest(source), fmt, asdict(spec), test_ratio,
                            split_seed, outputs)
    if manifest_path:
        Path(manifest_path).parent.mkdir(parents=True, exist_ok=True)
        Path(manifest_path).write_text(json.dumps(man.to_json(), indent=1) + "\n")
    return man


def make_synthetic(n: int, n_features: int = 20, seed: int = 0, noise: float = 0.5,
                   name: str = "synthetic") -> Dataset:
    """Gaussian features with a label driven by a few columns from each half."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, n_features)).astype(np.float32)
    w = np.zeros(n_features)
    half = n_features // 2
    w[: min(3, half)] = (1.0, -0.7, 0.5)[: min(3, half)]
    w[half: half + min(3, n_features - half)] = (0.9, 0.6, -0.8)[: min(3, n_features - half)]
    z = X.astype(np.float64) @ w + noise * rng.normal(size=n)
    y = (z > 0).astype(np.int8)
    salt = hashlib.sha256(b"fedgbm-synthetic" + str(seed).encode()).digest()
    return Dataset(salted_ids(n, salt), X, y, name)
