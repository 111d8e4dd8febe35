"""Feature discretisation and plaintext histograms.

Each feature gets strictly increasing edges ``e_0 < ... < e_{E-1}``. Value
bins are ``0..E`` with ``bin(x) = #{j : e_j < x}``, so ``bin(x) <= j`` exactly
when ``x <= e_j``. Missing values take the extra bin ``E + 1``, which every
split routes right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedgbm.errors import ConfigError

DEFAULT_BINS = 64
MAX_BINS = 254


def fit_bin_edges(values, max_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Midpoints between distinct values when there are few, else quantiles."""
    if not 2 <= max_bins <= MAX_BINS:
        raise ConfigError(f"bins must be in [2, {MAX_BINS}]")
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    uniq = np.unique(v)
    if uniq.size <= 1:
        return np.zeros(0)
    if uniq.size <= max_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    q = np.unique(np.quantile(v, np.linspace(0.0, 1.0, max_bins + 1)[1:-1]))
    return q[q < uniq[-1]]


def check_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or np.isnan(e).any() or (e.size > 1 and not (np.diff(e) > 0).all()):
        raise ConfigError("bin edges must be strictly increasing")
    if e.size + 2 > MAX_BINS + 1:
        raise ConfigError("too many bins")
    return e


def apply_bins(values, edges) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = np.searchsorted(edges, v, side="left").astype(np.uint8)
    out[np.isnan(v)] = len(edges) + 1
    return out


class BinMapper:
    """Per-feature edges plus the binned training matrix."""

    def __init__(self, edges: list[np.ndarray]):
        self.edges = [check_edges(e) for e in edges]
        self.n_bins = np.array([len(e) + 2 for e in self.edges], dtype=np.int32)
        self.n_candidates = np.array([len(e) for e in self.edges], dtype=np.int64)

    @classmethod
    def fit(cls, X, max_bins: int = DEFAULT_BINS) -> "BinMapper":
        X = np.asarray(X)
        return cls([fit_bin_edges(X[:, j], max_bins) for j in range(X.shape[1])])

    @property
    def n_features(self) -> int:
        return len(self.edges)

    @property
    def max_bins(self) -> int:
        return int(self.n_bins.max()) if self.edges else 1

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X)
        out = np.empty((X.shape[0], X.shape[1]), dtype=np.uint8)
        for j, e in enumerate(self.edges):
            out[:, j] = apply_bins(X[:, j], e)
        return np.ascontiguousarray(out)

    def threshold(self, feature: int, cand: int) -> float:
        return float(self.edges[feature][cand])

    def candidate_offsets(self) -> np.ndarray:
        """Start of each feature's block in the flattened candidate list."""
        return np.concatenate([[0], np.cumsum(self.n_candidates)])

    def to_json(self) -> list[list[float]]:
        return [e.tolist() for e in self.edges]

    @classmethod
    def from_json(cls, obj) -> "BinMapper":
        return cls([np.asarray(e, dtype=np.float64) for e in obj])


@dataclass
class Histogram:
    G: np.ndarray
    H: np.ndarray
    count: np.ndarray


def build_histogram(column, bin_edges, sample_indices, g, h) -> Histogram:
    """Per-bin gradient, hessian and count sums of one feature.

    The last bin holds missing values.
    """
    edges = check_edges(bin_edges)
    idx = np.asarray(sample_indices, dtype=np.int64)
    bins = apply_bins(np.asarray(column)[idx], edges)
    nb = len(edges) + 2
    g = np.asarray(g, dtype=np.float64)[idx]
    h = np.asarray(h, dtype=np.float64)[idx]
    return Histogram(np.bincount(bins, weights=g, minlength=nb),
                     np.bincount(bins, weights=h, minlength=nb),
                     np.bincount(bins, minlength=nb))
