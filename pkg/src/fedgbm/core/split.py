"""Split scoring.

Gradients and hessians enter the learner as int64 fixed-point values with
``SCALE_BITS`` fractional bits, so every histogram sum is exact and the same
split is found whether the sums were accumulated in plaintext or decrypted
from homomorphic aggregates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALE_BITS = 40
SCALE = float(1 << SCALE_BITS)


def quantize(x) -> np.ndarray:
    return np.rint(np.asarray(x, dtype=np.float64) * SCALE).astype(np.int64)


@dataclass
class SplitCandidate:
    owner: str
    feature_index: int
    threshold: float | None
    gain: float
    left_count: int
    right_count: int
    candidate_id: int = -1  # position in the owner's flattened candidate list
    bin: int = -1


def _gain(GL, HL, GR, HR, G, H, lam):
    return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam))


def split_gains(GL, HL, G, H, lam: float = 1.0):
    """Second-order gain for left sums ``GL, HL`` out of node totals ``G, H``."""
    GL = np.asarray(GL, dtype=np.float64)
    HL = np.asarray(HL, dtype=np.float64)
    return _gain(GL, HL, G - GL, H - HL, G, H, lam)


def raw_split_gains(GLr, HLr, Gr: int, Hr: int, lam: float):
    """:func:`split_gains` on fixed-point sums; right sides are exact integers."""
    GLr = np.asarray(GLr, dtype=np.int64)
    HLr = np.asarray(HLr, dtype=np.int64)
    return _gain(GLr / SCALE, HLr / SCALE, (Gr - GLr) / SCALE, (Hr - HLr) / SCALE,
                 Gr / SCALE, Hr / SCALE, lam)


def gini_reduction(CL, PL, C: int, P: int):
    """Count-weighted Gini impurity decrease; ``P`` counts positive labels."""
    CL = np.asarray(CL, dtype=np.float64)
    PL = np.asarray(PL, dtype=np.float64)

    def impurity(n, p):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, 2.0 * p * (n - p) / np.where(n > 0, n, 1.0), 0.0)

    return impurity(float(C), float(P)) - impurity(CL, PL) - impurity(C - CL, P - PL)


def pick_best(gains, left_counts, total: int, min_leaf: int) -> int | None:
    """First index of the maximal admissible gain, or ``None`` if none is positive."""
    gains = np.asarray(gains, dtype=np.float64)
    if gains.size == 0:
        return None
    cl = np.asarray(left_counts, dtype=np.int64)
    ok = (cl >= min_leaf) & (total - cl >= min_leaf)
    masked = np.where(ok, gains, -np.inf)
    i = int(np.argmax(masked))
    if not masked[i] > 0:
        return None
    return i


def leaf_weight(Gr: int, Hr: int, lam: float) -> float:
    return -(Gr / SCALE) / (Hr / SCALE + lam)


def best_split_from_histogram(bins, lam: float = 1.0, min_leaf: int = 20, edges=None,
                              owner: str = "A") -> SplitCandidate | None:
    """Best split over one or more per-feature histograms.

    ``bins`` is a :class:`~fedgbm.core.binning.Histogram` (or a list of them,
    one per feature) whose last bin holds missing values. Candidate ``j``
    sends value bins ``0..j`` left. Ties go to the lower feature, then the
    lower threshold. ``edges`` (per feature) turns bin boundaries into
    thresholds; without it the threshold is the boundary index.
    """
    hists = bins if isinstance(bins, (list, tuple)) else [bins]
    best = None
    for f, hist in enumerate(hists):
        G = np.asarray(hist.G, dtype=np.float64)
        H = np.asarray(hist.H, dtype=np.float64)
        C = np.asarray(hist.count, dtype=np.int64)
        n_cand = len(G) - 2
        if n_cand <= 0:
            continue
        GL = np.cumsum(G[:-1])[:n_cand]
        HL = np.cumsum(H[:-1])[:n_cand]
        CL = np.cumsum(C[:-1])[:n_cand]
        gains = split_gains(GL, HL, G.sum(), H.sum(), lam)
        total = int(C.sum())
        j = pick_best(gains, CL, total, min_leaf)
        if j is None:
            continue
        if best is None or gains[j] > best.gain:
            thr = float(edges[f][j]) if edges is not None else float(j)
            best = SplitCandidate(owner, f, thr, float(gains[j]), int(CL[j]), total - int(CL[j]), j, j)
    return best
