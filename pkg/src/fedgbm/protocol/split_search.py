"""Federated split search: one exchange per growth round.

Every round is exactly four frames::

    A -> B  ENC_GRADIENTS     children of the last split (membership of the
                              smaller one); round 0 carries Enc(g), Enc(h)
    B -> A  SPLIT_CANDIDATES  per-candidate left aggregates for the smaller child
    A -> B  SPLIT_WINNER      which leaf splits and who owns the split
    B -> A  PARTITION         left bit-vector if B won, otherwise an empty ack

Candidates are B's ``(feature, boundary)`` pairs flattened in feature-major
order; A never sees B's thresholds. The larger child's aggregates are the
parent's minus the smaller child's, done by A on decrypted integers.

Strategy ``phe-aggregate`` aggregates encrypted fixed-point gradients.
Strategy ``psi-cardinality`` instead has A learn, per candidate, how many
leaf samples go left and how many of those are positives, through blinded
set matching; candidates are scored by Gini reduction.
"""
from __future__ import annotations

import numpy as np

from fedgbm import kernels, psi
from fedgbm.core.split import SplitCandidate, gini_reduction, pick_best, raw_split_gains
from fedgbm.core.tree import EvalJob, Leaf, LocalSearch, SplitSearch
from fedgbm.errors import ProtocolError
from fedgbm.phe import decode_signed
from fedgbm.protocol.frames import (MsgType, ints_to_rows, pack_bits, pack_ciphertexts,
                                    pack_u32, rows_to_ints, unpack_bits, unpack_ciphertexts,
                                    unpack_u32)


class FederatedSearchA(SplitSearch):
    """Party A's split search: own features locally, B's through the channel."""

    def __init__(self, channel, local: LocalSearch, backend, strategy: str,
                 labels=None, ids=None):
        self.channel = channel
        self.local = local
        self.backend = backend
        self.strategy = strategy
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.ids = ids
        self.params = local.params

    def begin_tree(self, tree_id, rows, g_raw, h_raw):
        self.local.begin_tree(tree_id, rows, g_raw, h_raw)
        self.tree_id = tree_id
        self.rows = np.asarray(rows, dtype=np.int64)
        self.g = g_raw
        self.h = h_raw
        self.bstats: dict[int, tuple] = {}
        self.psi_key = psi.new_key()

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, job: EvalJob) -> None:
        self.local.evaluate(job)
        want = job.eval_small or job.eval_large
        meta = {"tree": self.tree_id, "round": job.round, "small": job.small.node_id,
                "large": None if job.large is None else job.large.node_id,
                "parent": None if job.parent is None else job.parent.node_id, "eval": want}
        sections = {}
        if job.round == 0 and self.strategy == "phe-aggregate":
            n = self.backend.n
            w = self.backend.ct_width
            sections["g"] = pack_ciphertexts(
                self.backend.encrypt_many([int(v) % n for v in self.g[self.rows]]), w)
            sections["h"] = pack_ciphertexts(
                self.backend.encrypt_many([int(v) % n for v in self.h[self.rows]]), w)
        if job.round > 0:
            sections["members"] = pack_u32(job.small.rows)
        if want and self.strategy == "psi-cardinality":
            pos = job.small.rows[self.labels[job.small.rows] == 1]
            sections["positives"] = psi.blind(self.psi_key, [self.ids[r] for r in pos]).to_bytes()
        self.channel.send_message(MsgType.ENC_GRADIENTS, meta, **sections)
        rmeta, rsec = self.channel.recv_message(MsgType.SPLIT_CANDIDATES)
        if rmeta.get("tree") != self.tree_id or rmeta.get("round") != job.round:
            raise ProtocolError("SPLIT_CANDIDATES for the wrong round")
        if not want:
            return
        small = self._read_stats(rmeta, rsec)
        self.bstats[job.small.node_id] = small
        if job.large is not None:
            parent = self.bstats.get(job.parent.node_id)
            if parent is None or len(parent[0]) != len(small[0]):
                raise ProtocolError("missing parent aggregates for sibling subtraction")
            self.bstats[job.large.node_id] = tuple(p - s for p, s in zip(parent, small))
        for leaf, flag in ((job.small, job.eval_small), (job.large, job.eval_large)):
            if flag:
                b = self._best_remote(leaf)
                if b is not None and (leaf.best is None or b.gain > leaf.best.gain):
                    leaf.best = b

    def _read_stats(self, meta, sec):
        k = int(meta["n_candidates"])
        if self.strategy == "phe-aggregate":
            cl = unpack_u32(sec["cl"])
            gl = unpack_ciphertexts(sec["gl"])
            hl = unpack_ciphertexts(sec["hl"])
            if not (len(cl) == len(gl) == len(hl) == k):
                raise ProtocolError("candidate sections disagree in length")
            n = self.backend.n
            G = np.array(decode_signed(self.backend.decrypt_many(rows_to_ints(gl)), n), dtype=np.int64)
            H = np.array(decode_signed(self.backend.decrypt_many(rows_to_ints(hl)), n), dtype=np.int64)
            return G, H, cl
        pts = psi.split_points(sec["points"])
        doubled = set(psi.split_points(sec["double"]))
        is_pos = np.array([p in doubled for p in psi.double_blind(self.psi_key, pts).points], dtype=bool)
        masks = unpack_bits(sec["masks"]).reshape(k, len(pts)) if k else np.zeros((0, len(pts)), bool)
        return masks.sum(axis=1).astype(np.int64), (masks & is_pos).sum(axis=1).astype(np.int64)

    def _best_remote(self, leaf: Leaf) -> SplitCandidate | None:
        stats = self.bstats[leaf.node_id]
        if self.strategy == "phe-aggregate":
            GL, HL, CL = stats
            scores = raw_split_gains(GL, HL, leaf.Gr, leaf.Hr, self.params.lam)
        else:
            CL, PL = stats
            scores = gini_reduction(CL, PL, leaf.count, int(self.labels[leaf.rows].sum()))
        i = pick_best(scores, CL, leaf.count, self.params.min_leaf)
        if i is None:
            return None
        return SplitCandidate("B", -1, None, float(scores[i]), int(CL[i]), leaf.count - int(CL[i]), i)

    # -- commit ----------------------------------------------------------------

    def commit(self, round_, leaf, split):
        winner = "none" if split is None else split.owner
        meta = {"tree": self.tree_id, "round": round_, "winner": winner}
        if split is not None:
            meta.update(leaf=leaf.node_id, candidate=split.candidate_id if winner == "B" else None)
        self.channel.send_message(MsgType.SPLIT_WINNER, meta)
        _, sec = self.channel.recv_message(MsgType.PARTITION)
        if winner == "none":
            return None
        if winner == "A":
            return self.local.left_mask(leaf, split)
        mask = unpack_bits(sec.get("left", b""))
        if mask.shape != leaf.rows.shape:
            raise ProtocolError("partition size does not match the leaf")
        return mask


class BTreeBuilder:
    """Party B's side of the split rounds for one session."""

    def __init__(self, binned, mapper, strategy: str, backend=None, ids=None):
        self.binned = np.ascontiguousarray(binned, dtype=np.uint8)
        self.mapper = mapper
        self.strategy = strategy
        self.backend = backend
        self.ids = ids
        n_bins = mapper.n_bins
        self.n_bins = n_bins
        # most populated bin per feature; its sum is recovered by subtraction
        self.default_bin = np.array(
            [np.bincount(self.binned[:, f], minlength=int(n_bins[f])).argmax()
             for f in range(self.binned.shape[1])], dtype=np.int32)
        self.feat = np.repeat(np.arange(mapper.n_features), mapper.n_candidates)
        self.bin = np.concatenate([np.arange(k) for k in mapper.n_candidates]) \
            if mapper.n_features else np.zeros(0, dtype=np.int64)
        self.batch = None
        self.tree_id = None

    def set_batch(self, rows) -> None:
        self.batch = np.asarray(rows, dtype=np.int64)

    def on_enc_gradients(self, meta, sec, channel) -> None:
        r = meta["round"]
        if r == 0:
            self.tree_id = meta["tree"]
            self.members = {0: self.batch}
            self.splits: dict[int, tuple[int, float]] = {}
            self.topology: list[tuple[int, str]] = []
            if self.strategy == "phe-aggregate":
                width = self.backend.ct_width
                self.cts_g = np.zeros((len(self.binned), width), dtype=np.uint8)
                self.cts_h = np.zeros((len(self.binned), width), dtype=np.uint8)
                g = unpack_ciphertexts(sec["g"])
                h = unpack_ciphertexts(sec["h"])
                if g.shape != (len(self.batch), width) or h.shape != g.shape:
                    raise ProtocolError("gradient ciphertexts do not match the batch")
                self.cts_g[self.batch] = g
                self.cts_h[self.batch] = h
        else:
            if meta["tree"] != self.tree_id:
                raise ProtocolError("ENC_GRADIENTS for an unknown tree")
            parent = self.members.get(meta["parent"])
            small = unpack_u32(sec["members"])
            if parent is None or not np.isin(small, parent).all():
                raise ProtocolError("child membership is not a subset of its parent")
            self.members[meta["small"]] = small
            self.members[meta["large"]] = np.setdiff1d(parent, small, assume_unique=True)
        reply = {"tree": self.tree_id, "round": r, "n_candidates": 0}
        sections = {}
        if meta.get("eval"):
            rows = self.members[meta["small"]]
            reply["n_candidates"] = len(self.feat)
            if self.strategy == "phe-aggregate":
                sections = self._phe_candidates(rows)
            else:
                sections = self._psi_candidates(rows, sec.get("positives", b""))
        channel.send_message(MsgType.SPLIT_CANDIDATES, reply, **sections)

    def _cumulate(self, sums) -> list[int]:
        be = self.backend
        out = []
        for f in range(self.mapper.n_features):
            acc = be.identity
            for j in range(int(self.mapper.n_candidates[f])):
                acc = be.add(acc, int.from_bytes(sums[f, j].tobytes(), "big"))
                out.append(acc)
        return out

    def _phe_candidates(self, rows) -> dict:
        be = self.backend
        w = be.ct_width
        args = (self.binned, rows, self.n_bins, self.default_bin, be.ct_modulus, be.additive)
        gs = kernels.cipher_bin_sums(self.cts_g, *args)
        hs = kernels.cipher_bin_sums(self.cts_h, *args)
        counts = np.stack([np.bincount(self.binned[rows, f], minlength=self.mapper.max_bins)
                           for f in range(self.mapper.n_features)]) if len(self.feat) else None
        cl = np.cumsum(counts, axis=1)[self.feat, self.bin] if counts is not None else []
        return {
            "gl": pack_ciphertexts(ints_to_rows(self._cumulate(gs), w).tobytes(), w),
            "hl": pack_ciphertexts(ints_to_rows(self._cumulate(hs), w).tobytes(), w),
            "cl": pack_u32(cl),
        }

    def _psi_candidates(self, rows, positives: bytes) -> dict:
        key = psi.new_key()
        mine = psi.blind(key, [self.ids[r] for r in rows])
        doubled = psi.double_blind(key, psi.split_points(positives)).points
        perm = np.random.default_rng().permutation(len(doubled))
        ordered = rows[mine.order]
        masks = self.binned[ordered][:, self.feat].T <= self.bin[:, None]
        return {"points": mine.to_bytes(), "double": b"".join(doubled[i] for i in perm),
                "masks": pack_bits(masks.ravel())}

    def on_split_winner(self, meta, channel) -> bool:
        """Handle the decision; returns True when the tree is finished."""
        if meta["tree"] != self.tree_id:
            raise ProtocolError("SPLIT_WINNER for an unknown tree")
        winner = meta["winner"]
        reply = {"tree": self.tree_id, "round": meta["round"]}
        if winner == "none":
            channel.send_message(MsgType.PARTITION, reply)
            return True
        leaf = int(meta["leaf"])
        if leaf not in self.members:
            raise ProtocolError("split of an unknown leaf")
        self.topology.append((leaf, winner))
        if winner == "B":
            cid = int(meta["candidate"])
            if not 0 <= cid < len(self.feat):
                raise ProtocolError("candidate id out of range")
            f, j = int(self.feat[cid]), int(self.bin[cid])
            self.splits[leaf] = (f, self.mapper.threshold(f, j))
            left = self.binned[self.members[leaf], f] <= j
            channel.send_message(MsgType.PARTITION, reply, left=pack_bits(left))
        elif winner == "A":
            channel.send_message(MsgType.PARTITION, reply)
        else:
            raise ProtocolError(f"unknown winner {winner!r}")
        return False
