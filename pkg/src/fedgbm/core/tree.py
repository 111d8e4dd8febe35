"""Trees and leaf-wise growth.

Node ids use heap numbering: the root is 0 and node ``i`` has children
``2i + 1`` (left, ``x <= threshold``) and ``2i + 2`` (right, including
missing values). Topology can therefore be stored without child pointers.

The grower is independent of where split candidates come from. A
:class:`SplitSearch` evaluates leaves and applies the chosen split; the
plaintext :class:`LocalSearch` serves centralized training and party A's own
features, and the federated protocol supplies a search that also consults
party B.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedgbm import kernels
from fedgbm.core.binning import BinMapper
from fedgbm.core.split import (SplitCandidate, gini_reduction, leaf_weight,
                               pick_best, raw_split_gains)
from fedgbm.errors import ModelError

OWNERS = ("A", "B")


def left_child(i: int) -> int:
    return 2 * i + 1


def right_child(i: int) -> int:
    return 2 * i + 2


@dataclass
class TreeNode:
    node_id: int
    kind: str  # "internal" or "leaf"
    owner: str | None = None
    feature_index: int | None = None
    threshold: float | None = None
    leaf_weight: float | None = None

    @property
    def children(self) -> tuple[int, int] | None:
        if self.kind != "internal":
            return None
        return left_child(self.node_id), right_child(self.node_id)


@dataclass
class Tree:
    tree_id: int
    nodes: dict[int, TreeNode] = field(default_factory=dict)

    @property
    def internal(self) -> list[TreeNode]:
        return [self.nodes[i] for i in sorted(self.nodes) if self.nodes[i].kind == "internal"]

    @property
    def leaves(self) -> list[TreeNode]:
        return [self.nodes[i] for i in sorted(self.nodes) if self.nodes[i].kind == "leaf"]

    @property
    def n_internal(self) -> int:
        return len(self.internal)

    def depth(self) -> int:
        def d(i):
            n = self.nodes[i]
            return 0 if n.kind == "leaf" else 1 + max(d(c) for c in n.children)
        return d(0) if self.nodes else 0

    def topology(self) -> list[tuple[int, str]]:
        return [(n.node_id, n.owner) for n in self.internal]

    def validate(self) -> None:
        if 0 not in self.nodes:
            raise ModelError(f"tree {self.tree_id} has no root")
        for n in self.nodes.values():
            if n.kind == "internal":
                for c in n.children:
                    if c not in self.nodes:
                        raise ModelError(f"tree {self.tree_id}: node {n.node_id} lacks child {c}")
            elif n.leaf_weight is not None and not np.isfinite(n.leaf_weight):
                raise ModelError(f"tree {self.tree_id}: non-finite leaf weight")

    def apply(self, views: dict) -> np.ndarray:
        """Leaf id per sample. ``views`` maps owner to its ``(n, m)`` feature matrix.

        Children always have larger ids than their parent, so one ascending
        pass over internal nodes routes every sample to its leaf.
        """
        n = len(next(iter(views.values())))
        at = np.zeros(n, dtype=np.int64)
        for node in self.internal:
            mask = at == node.node_id
            if not mask.any():
                continue
            x = np.asarray(views[node.owner][mask, node.feature_index], dtype=np.float64)
            at[mask] = np.where(x <= node.threshold, left_child(node.node_id), right_child(node.node_id))
        return at

    def leaf_values(self, leaf_ids) -> np.ndarray:
        lookup = {n.node_id: n.leaf_weight for n in self.leaves}
        return np.array([lookup[int(i)] for i in leaf_ids], dtype=np.float64)

    def predict(self, views: dict) -> np.ndarray:
        return self.leaf_values(self.apply(views))


# -- growth ---------------------------------------------------------------------

@dataclass
class GrowParams:
    t: int = 4
    lam: float = 1.0
    min_leaf: int = 20
    scorer: str = "gain"  # "gain" (second order) or "gini" (label counts)


@dataclass
class Leaf:
    node_id: int
    rows: np.ndarray
    Gr: int
    Hr: int
    best: SplitCandidate | None = None
    evaluated: bool = False

    @property
    def count(self) -> int:
        return int(self.rows.size)


@dataclass
class EvalJob:
    """Children of the last split (or the root) awaiting split search.

    ``small`` always holds the smaller child (ties: left); its statistics are
    computed directly and the sibling's are derived from the parent.
    """
    round: int
    parent: Leaf | None
    small: Leaf
    large: Leaf | None
    eval_small: bool
    eval_large: bool


class SplitSearch:
    def begin_tree(self, tree_id: int, rows, g_raw, h_raw) -> None:
        pass

    def evaluate(self, job: EvalJob) -> None:
        """Set ``best`` on the leaves flagged for evaluation."""
        raise NotImplementedError

    def commit(self, round_: int, leaf: Leaf | None, split: SplitCandidate | None) -> np.ndarray | None:
        """Apply ``split`` to ``leaf``; return the left mask over ``leaf.rows``."""
        raise NotImplementedError

    def end_tree(self, tree) -> None:
        pass


def grow_tree_leafwise(rows, g_raw, h_raw, search: SplitSearch, params: GrowParams,
                       tree_id: int = 0) -> tuple[Tree, dict[int, np.ndarray]]:
    """Grow up to ``params.t`` splits, always splitting the best frontier leaf.

    ``g_raw``/``h_raw`` are fixed-point int64 arrays indexed by sample;
    ``rows`` are the sorted sample positions in scope. Returns the tree and
    the rows that reached each leaf.
    """
    rows = np.asarray(rows, dtype=np.int64)
    search.begin_tree(tree_id, rows, g_raw, h_raw)
    tree = Tree(tree_id)

    def make_leaf(node_id, r):
        return Leaf(node_id, r, int(g_raw[r].sum()), int(h_raw[r].sum()))

    root = make_leaf(0, rows)
    frontier = {0: root}
    need = 2 * params.min_leaf
    job = EvalJob(0, None, root, None, root.count >= need, False)
    for r in range(params.t):
        job.round = r
        search.evaluate(job)
        for lf in (job.small, job.large):
            if lf is not None:
                lf.evaluated = True
        pick = None
        for nid in sorted(frontier):
            lf = frontier[nid]
            if lf.best is not None and (pick is None or lf.best.gain > pick.best.gain):
                pick = lf
        if pick is None:
            search.commit(r, None, None)
            break
        split = pick.best
        mask = search.commit(r, pick, split)
        if mask is None or mask.shape != pick.rows.shape:
            raise ModelError("split search returned a malformed partition")
        tree.nodes[pick.node_id] = TreeNode(pick.node_id, "internal", split.owner,
                                            split.feature_index, split.threshold)
        del frontier[pick.node_id]
        left = make_leaf(left_child(pick.node_id), pick.rows[mask])
        right = make_leaf(right_child(pick.node_id), pick.rows[~mask])
        frontier[left.node_id] = left
        frontier[right.node_id] = right
        small, large = (left, right) if left.count <= right.count else (right, left)
        job = EvalJob(r + 1, pick, small, large, small.count >= need, large.count >= need)
    leaf_rows = {}
    for nid, lf in frontier.items():
        tree.nodes[nid] = TreeNode(nid, "leaf", leaf_weight=leaf_weight(lf.Gr, lf.Hr, params.lam))
        leaf_rows[nid] = lf.rows
    search.end_tree(tree)
    return tree, leaf_rows


class CandidateTable:
    """Flattened ``(feature, boundary)`` candidates of a binned feature block."""

    def __init__(self, mapper: BinMapper):
        self.mapper = mapper
        nc = mapper.n_candidates
        self.feat = np.repeat(np.arange(len(nc)), nc)
        self.bin = np.concatenate([np.arange(k) for k in nc]) if len(nc) else np.zeros(0, dtype=np.int64)
        self.size = int(nc.sum())

    def cumulative(self, hist: np.ndarray) -> np.ndarray:
        """Left sums per candidate from a ``(features, bins)`` histogram."""
        return np.cumsum(hist, axis=1)[self.feat, self.bin]


class LocalSearch(SplitSearch):
    """Plaintext split search over a binned feature block.

    ``owners``/``local_index`` label every column, which lets one block hold
    the joined features of both parties (A columns first, so equal gains
    favour A exactly as in the federated comparison).
    """

    def __init__(self, binned, mapper: BinMapper, params: GrowParams, owners=None,
                 local_index=None, labels=None):
        self.binned = np.ascontiguousarray(binned, dtype=np.uint8)
        self.mapper = mapper
        self.params = params
        m = binned.shape[1]
        self.owners = list(owners) if owners is not None else ["A"] * m
        self.local_index = list(local_index) if local_index is not None else list(range(m))
        self.table = CandidateTable(mapper)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self._zeros = None if labels is None else np.zeros(len(labels), dtype=np.int64)
        self.hist: dict[int, tuple] = {}

    def begin_tree(self, tree_id, rows, g_raw, h_raw):
        self.g = np.ascontiguousarray(g_raw, dtype=np.int64)
        self.h = np.ascontiguousarray(h_raw, dtype=np.int64)
        self.hist = {}

    def _direct(self, rows):
        G, H, C = kernels.histograms(self.binned, rows, self.g, self.h, self.mapper.max_bins)
        P = None
        if self.params.scorer == "gini":
            P = kernels.histograms(self.binned, rows, self.labels, self._zeros, self.mapper.max_bins)[0]
        return G, H, C, P

    def node_histogram(self, job: EvalJob):
        """Histograms for the job's leaves, the larger one by subtraction."""
        small = self._direct(job.small.rows)
        self.hist[job.small.node_id] = small
        if job.large is not None:
            parent = self.hist.get(job.parent.node_id)
            if parent is None:
                parent = self._direct(job.parent.rows)
            self.hist[job.large.node_id] = tuple(
                None if p is None else p - s for p, s in zip(parent, small))

    def candidates(self, leaf: Leaf):
        """Per-candidate (score, left count) for ``leaf``."""
        G, H, C, P = self.hist[leaf.node_id]
        CL = self.table.cumulative(C)
        if self.params.scorer == "gini":
            PL = self.table.cumulative(P)
            pos = int(P[0].sum()) if P.size else 0
            return gini_reduction(CL, PL, leaf.count, pos), CL
        GL = self.table.cumulative(G)
        HL = self.table.cumulative(H)
        return raw_split_gains(GL, HL, leaf.Gr, leaf.Hr, self.params.lam), CL

    def best_for(self, leaf: Leaf) -> SplitCandidate | None:
        if self.table.size == 0:
            return None
        scores, CL = self.candidates(leaf)
        i = pick_best(scores, CL, leaf.count, self.params.min_leaf)
        if i is None:
            return None
        f = int(self.table.feat[i])
        j = int(self.table.bin[i])
        return SplitCandidate(self.owners[f], self.local_index[f], self.mapper.threshold(f, j),
                              float(scores[i]), int(CL[i]), leaf.count - int(CL[i]), i, j)

    def evaluate(self, job: EvalJob) -> None:
        if not (job.eval_small or job.eval_large):
            return
        self.node_histogram(job)
        if job.eval_small:
            job.small.best = self.best_for(job.small)
        if job.eval_large:
            job.large.best = self.best_for(job.large)

    def left_mask(self, leaf: Leaf, split: SplitCandidate) -> np.ndarray:
        f = int(self.table.feat[split.candidate_id])
        return self.binned[leaf.rows, f] <= split.bin

    def commit(self, round_, leaf, split):
        if leaf is None:
            return None
        return self.left_mask(leaf, split)
