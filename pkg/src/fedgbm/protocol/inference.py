"""Compiled execution flow and secure inference.

A walks every tree itself. Whenever samples reach a B-owned node it asks B
which way they go; B compares its own plaintext feature against its private
threshold and answers with one bit per sample. Requests are batched over all
pending ``(tree, node)`` pairs, so the number of round trips is bounded by
the tree depth. Each inference task uses a fresh key pair at A, and B seals
its answers to that key.

``INFER_ROUTE_REQ`` meta: ``{"task_pk", "queries": [[universe, tree, node, enc, count]]}``
with one section per query holding sample positions (``u32`` list or a bitmap
over the universe, whichever is smaller).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from nacl.exceptions import CryptoError
from nacl.public import PrivateKey as BoxKey
from nacl.public import PublicKey as BoxPublicKey
from nacl.public import SealedBox
from scipy.special import expit

from fedgbm.core.boosting import Ensemble
from fedgbm.core.model import BModelPart, topology_hash, topology_of
from fedgbm.core.tree import left_child, right_child
from fedgbm.errors import ModelError, PredictionError, ProtocolError, SecurityAbort
from fedgbm.protocol.frames import MsgType, pack_bits, pack_u32, unpack_bits, unpack_u32


@dataclass
class ExecutionFlow:
    """Owner-partitioned tables of an ensemble.

    ``a_table`` and ``leaves`` live at A; ``b_table`` (thresholds of B nodes)
    only exists on B's side or in oracle tests, A holds just ``b_nodes``.
    """
    base_score: float
    tree_ids: list[int]
    alphas: dict[int, float]
    routing: dict[tuple[int, int], tuple[str, int, int]]
    a_table: dict[tuple[int, int], tuple[int, float]]
    b_nodes: list[tuple[int, int]]
    leaves: dict[tuple[int, int], float]
    topology_hash: str
    b_table: dict[tuple[int, int], tuple[int, float]] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        def keyed(d):
            return [[k[0], k[1], v] for k, v in sorted(d.items())]
        obj = {
            "base_score": self.base_score, "tree_ids": self.tree_ids,
            "alphas": [[t, self.alphas[t]] for t in self.tree_ids],
            "routing": keyed(self.routing), "a_table": keyed(self.a_table),
            "b_nodes": [list(k) for k in self.b_nodes], "leaves": keyed(self.leaves),
            "b_table": keyed(self.b_table), "topology_hash": self.topology_hash,
        }
        return json.dumps(obj, separators=(",", ":")).encode()

    def depth(self, tree_id: int) -> int:
        def d(node):
            r = self.routing.get((tree_id, node))
            return 0 if r is None else 1 + max(d(r[1]), d(r[2]))
        return d(0)


def compile_execution_flow(ensemble: Ensemble, b_part=None) -> ExecutionFlow:
    """Build A's execution flow; ``b_part`` is B's model part or its topology hash."""
    th = topology_hash(topology_of(ensemble.trees))
    b_table = {}
    if b_part is not None:
        other = b_part.topology_hash if isinstance(b_part, BModelPart) else str(b_part)
        if other != th:
            raise ModelError("model parts cover different topologies")
        if isinstance(b_part, BModelPart):
            b_table = dict(sorted(b_part.splits.items()))
    routing, a_table, leaves, b_nodes = {}, {}, {}, []
    for tree in ensemble.trees:
        for nid in sorted(tree.nodes):
            n = tree.nodes[nid]
            key = (tree.tree_id, nid)
            if n.kind == "leaf":
                leaves[key] = n.leaf_weight
                continue
            routing[key] = (n.owner, left_child(nid), right_child(nid))
            if n.owner == "A":
                a_table[key] = (n.feature_index, n.threshold)
            else:
                b_nodes.append(key)
                if b_part is not None and isinstance(b_part, BModelPart) and key not in b_table:
                    raise ModelError(f"B model part lacks node {key}")
    return ExecutionFlow(ensemble.base_score, [t.tree_id for t in ensemble.trees],
                         {t.tree_id: a for t, a in zip(ensemble.trees, ensemble.alphas)},
                         routing, a_table, b_nodes, leaves, th, b_table)


def _encode_positions(pos: np.ndarray, universe_size: int) -> tuple[str, bytes]:
    if len(pos) * 32 <= universe_size:
        return "u32", pack_u32(pos)
    mask = np.zeros(universe_size, dtype=bool)
    mask[pos] = True
    return "bits", pack_bits(mask)


def _decode_positions(enc: str, data: bytes, universe_size: int) -> np.ndarray:
    if enc == "u32":
        pos = unpack_u32(data)
    elif enc == "bits":
        mask = unpack_bits(data)
        if mask.size != universe_size:
            raise ProtocolError("position bitmap does not cover the universe")
        pos = np.flatnonzero(mask)
    else:
        raise ProtocolError(f"unknown position encoding {enc!r}")
    if pos.size and (pos.max() >= universe_size or pos.min() < 0):
        raise ProtocolError("sample position outside the universe")
    return pos


class RouteTask:
    """One inference task at A: a key pair and a round-trip counter."""

    def __init__(self, channel):
        self.channel = channel
        self.key = BoxKey.generate()
        self.round_trips = 0

    def ask(self, queries) -> list[np.ndarray]:
        """``queries``: list of (universe, universe_size, tree, node, positions)."""
        meta_q, sections = [], {}
        for i, (u, size, tree, node, pos) in enumerate(queries):
            enc, data = _encode_positions(np.asarray(pos, dtype=np.int64), size)
            meta_q.append([u, tree, node, enc, len(pos)])
            sections[f"q{i}"] = data
        self.channel.send_message(MsgType.INFER_ROUTE_REQ,
                                  {"task_pk": bytes(self.key.public_key).hex(), "queries": meta_q},
                                  **sections)
        _, sec = self.channel.recv_message(MsgType.INFER_ROUTE_RESP)
        self.round_trips += 1
        try:
            plain = SealedBox(self.key).decrypt(sec["box"])
        except (CryptoError, KeyError):
            raise SecurityAbort("route reply failed authentication") from None
        out, off = [], 0
        for (_, _, _, _, pos) in queries:
            nbytes = 4 + (len(pos) + 7) // 8
            out.append(unpack_bits(plain[off:off + nbytes]))
            off += nbytes
        if off != len(plain):
            raise ProtocolError("route reply length mismatch")
        return out


def route(channel, flow: ExecutionFlow, tree_ids, universes: dict) -> dict:
    """Leaf ids per universe and tree.

    ``universes`` maps a name to ``(size, positions, a_features)`` where
    ``a_features`` rows align with ``positions``. Returns
    ``{name: {tree_id: leaf ids}}``.
    """
    at = {u: {t: np.zeros(len(p), dtype=np.int64) for t in tree_ids}
          for u, (_, p, _) in universes.items()}
    task = None
    while True:
        pending = []
        for u, (size, pos, XA) in universes.items():
            for t in tree_ids:
                cur = at[u][t]
                # resolve A-owned nodes until every sample sits at a leaf or a B node
                while True:
                    moved = False
                    for node in np.unique(cur):
                        r = flow.routing.get((t, int(node)))
                        if r is None or r[0] != "A":
                            continue
                        f, thr = flow.a_table[(t, int(node))]
                        m = cur == node
                        x = np.asarray(XA[m, f], dtype=np.float64)
                        cur[m] = np.where(x <= thr, r[1], r[2])
                        moved = True
                    if not moved:
                        break
                for node in np.unique(cur):
                    r = flow.routing.get((t, int(node)))
                    if r is not None and r[0] == "B":
                        idx = np.flatnonzero(cur == node)
                        pending.append((u, size, t, int(node), pos[idx], idx))
        if not pending:
            return at
        if channel is None:
            raise PredictionError("model routes through party B but no channel is available")
        task = task or RouteTask(channel)
        answers = task.ask([q[:5] for q in pending])
        for (u, _, t, node, _, idx), left in zip(pending, answers):
            if left.size != idx.size:
                raise ProtocolError("route reply size mismatch")
            at[u][t][idx] = np.where(left, left_child(node), right_child(node))


def score_leaves(flow: ExecutionFlow, leaves_by_tree, n: int) -> np.ndarray:
    s = np.full(n, flow.base_score, dtype=np.float64)
    for t in flow.tree_ids:
        ids = leaves_by_tree[t]
        s += flow.alphas[t] * np.array([flow.leaves[(t, int(i))] for i in ids], dtype=np.float64)
    return s


def secure_raw_scores(channel, flow: ExecutionFlow, positions, a_features, universe: str = "test",
                      universe_size: int | None = None) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    size = int(universe_size if universe_size is not None else (positions.max() + 1 if positions.size else 0))
    at = route(channel, flow, flow.tree_ids, {universe: (size, positions, a_features)})
    return score_leaves(flow, at[universe], len(positions))


def secure_inference(channel, flow: ExecutionFlow, positions, a_features, universe: str = "test",
                     universe_size: int | None = None) -> np.ndarray:
    """Probabilities for samples at ``positions`` of a universe both parties hold."""
    return expit(secure_raw_scores(channel, flow, positions, a_features, universe, universe_size))


def local_flow_predict(flow: ExecutionFlow, views: dict) -> np.ndarray:
    """Evaluate a flow holding both tables (oracle use only)."""
    if flow.b_nodes and not flow.b_table:
        raise PredictionError("flow has no B table")
    n = len(next(iter(views.values())))
    out = {}
    for t in flow.tree_ids:
        cur = np.zeros(n, dtype=np.int64)
        for (tt, node) in sorted(flow.routing):
            if tt != t:
                continue
            owner, lc, rc = flow.routing[(tt, node)]
            f, thr = (flow.a_table if owner == "A" else flow.b_table)[(tt, node)]
            m = cur == node
            x = np.asarray(views[owner][m, f], dtype=np.float64)
            cur[m] = np.where(x <= thr, lc, rc)
        out[t] = cur
    return expit(score_leaves(flow, out, n))


class RouteServer:
    """B's answering side: its splits and per-universe raw features."""

    def __init__(self, splits: dict, universes: dict):
        self.splits = splits
        self.universes = universes

    def handle(self, meta, sec, channel) -> None:
        try:
            task_pk = BoxPublicKey(bytes.fromhex(meta["task_pk"]))
        except (KeyError, ValueError, TypeError):
            raise ProtocolError("route request without a valid task key") from None
        parts = []
        for i, q in enumerate(meta.get("queries", [])):
            u, tree, node, enc, count = q
            X = self.universes.get(u)
            if X is None:
                raise ProtocolError(f"unknown universe {u!r}")
            split = self.splits.get((int(tree), int(node)))
            if split is None:
                raise ProtocolError(f"no B split at tree {tree} node {node}")
            pos = _decode_positions(enc, sec.get(f"q{i}", b""), len(X))
            if len(pos) != count:
                raise ProtocolError("query count mismatch")
            f, thr = split
            x = np.asarray(X[pos, f], dtype=np.float64)
            parts.append(pack_bits(x <= thr))
        box = SealedBox(task_pk).encrypt(b"".join(parts))
        channel.send_message(MsgType.INFER_ROUTE_RESP, {}, box=box)


def fallback_predict(a_only: Ensemble | None, a_features) -> np.ndarray:
    """Local prediction for samples B does not hold."""
    if a_only is None:
        raise PredictionError("no A-only fallback model; retrain to produce one")
    X = np.asarray(a_features)
    return expit(a_only.raw_score({"A": X}, len(X)))


def flow_digest(flow: ExecutionFlow) -> str:
    return hashlib.sha256(flow.to_bytes()).hexdigest()
