"""Two-party training and prediction sessions.

Party A (labels, first feature view) drives; party B (second view) serves.

Training::

    handshake -> PSI(train ids) -> PSI(test ids)
    A: base score and base tree on its own columns (no traffic)
    for k in 1..K:
        A -> B  BATCH_ANNOUNCE  k and the batch bitmap over the intersection
        t split rounds (see split_search)
        A refreshes scores: batch rows from the grown partition, all other
        training rows and the test intersection by secure routing of the new tree
    A -> B  BATCH_ANNOUNCE  {"done": true}

Both parties checkpoint every ``CHECKPOINT_EVERY`` iterations.
"""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from fedgbm import psi
from fedgbm.core.binning import BinMapper
from fedgbm.core.boosting import (Ensemble, IterationLog, TrainConfig, compute_gradients,
                                  init_base_score, sample_batch, train_centralized,
                                  update_ensemble)
from fedgbm.core.model import (BModelPart, ensemble_from_json, ensemble_to_json, read_json,
                               write_json_atomic)
from fedgbm.core.split import quantize
from fedgbm.core.tree import LocalSearch, grow_tree_leafwise
from fedgbm.errors import DataError, ProtocolError, TransportError
from fedgbm.metrics import MetricsRecord
from fedgbm.phe import NullBackend, PaillierBackend
from fedgbm.protocol.channel import LoopbackChannel
from fedgbm.protocol.frames import MsgType, decode_message, pack_bits, unpack_bits
from fedgbm.protocol.handshake import SessionRegistry, config_hash, handshake_a, handshake_b
from fedgbm.protocol.inference import (RouteServer, score_leaves, compile_execution_flow,
                                       fallback_predict, route)
from fedgbm.protocol.split_search import BTreeBuilder, FederatedSearchA

log = logging.getLogger(__name__)

CHECKPOINT_EVERY = 10
CHECKPOINT_FORMAT = "fedgbm-checkpoint-v1"


@dataclass
class PartyAResult:
    ensemble: Ensemble
    records: list[MetricsRecord]
    fallback: Ensemble | None
    intersection: list[bytes]
    test_intersection: list[bytes]
    train_scores: np.ndarray
    test_scores: np.ndarray | None
    iteration_seconds: list[float] = field(default_factory=list)
    session_id: str = ""


@dataclass
class PartyBResult:
    part: BModelPart
    intersection: list[bytes]
    session_id: str = ""


def _ckpt_path(directory, role):
    return Path(directory) / f"checkpoint_{role.lower()}.json"


def load_checkpoint(directory, role):
    p = _ckpt_path(directory, role)
    if not p.exists():
        return None
    obj = read_json(p)
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("role") != role:
        raise DataError(f"{p} is not a {role} checkpoint")
    return obj


# -- party A ----------------------------------------------------------------------

def train_party_a(channel, train, config: TrainConfig, backend, test=None, checkpoint_dir=None,
                  resume: bool = False, train_fallback: bool = True,
                  session_id: str | None = None) -> PartyAResult:
    """Run party A's side of a training session over ``channel``.

    ``train``/``test`` hold A's ids, features and labels; ``backend`` carries
    A's key pair (or the null cipher).
    """
    if train.labels is None:
        raise DataError("party A needs labels")
    ckpt = load_checkpoint(checkpoint_dir, "A") if (resume and checkpoint_dir) else None
    digest = config_hash(config, backend.name)
    if ckpt is not None and ckpt["digest"] != digest:
        raise DataError("checkpoint was written under a different configuration")
    k0 = int(ckpt["iteration"]) if ckpt else 0
    session = handshake_a(channel, digest, "train", backend.public_key, k0, session_id)

    inter = psi.psi_session("A", train.ids, channel, domain="train")
    if not inter:
        raise DataError("the parties share no training ids")
    test_inter = psi.psi_session("A", test.ids if test is not None else [], channel, domain="test")
    tr = train.align(inter)
    te = test.align(test_inter) if test is not None and test_inter else None
    n = tr.n_samples
    y = tr.labels.astype(np.int64)
    params = config.grow_params

    mapper = BinMapper.fit(tr.features, config.bins)
    binned = mapper.transform(tr.features)
    local = LocalSearch(binned, mapper, params, labels=y)
    search = FederatedSearchA(channel, local, backend, config.strategy, labels=y, ids=inter)
    XA = tr.features
    XA_test = te.features if te is not None else np.zeros((0, tr.n_features), dtype=np.float32)
    n_test = len(XA_test)
    rng = np.random.default_rng(config.seed)
    iteration_log = IterationLog(y, te.labels if te is not None else None, channel.counter)
    offset_sent = offset_recv = 0

    if ckpt is None:
        base = init_base_score(y)
        ens = Ensemble(base, config.learning_rate)
        scores = np.full(n, base)
        test_scores = np.full(n_test, base)
        if config.base_tree:
            g, h, _ = compute_gradients(y, scores)
            tree0, _ = grow_tree_leafwise(np.arange(n), quantize(g), quantize(h), local, params, 0)
            a0 = config.alpha(0)
            ens = update_ensemble(ens, tree0, a0)
            ens.has_base_tree = True
            scores += a0 * tree0.predict({"A": XA})
            test_scores += a0 * tree0.predict({"A": XA_test})
    else:
        ens = ensemble_from_json(ckpt["model"], "A")
        scores = np.asarray(ckpt["scores"], dtype=np.float64)
        test_scores = np.asarray(ckpt["test_scores"], dtype=np.float64)
        if scores.shape != (n,) or test_scores.shape != (n_test,):
            raise DataError("checkpoint does not match the aligned data")
        rng.bit_generator.state = ckpt["rng_state"]
        iteration_log.records = [MetricsRecord(**r) for r in ckpt["records"]]
        if iteration_log.records:
            offset_sent = iteration_log.records[-1].bytes_sent
            offset_recv = iteration_log.records[-1].bytes_recv

    seconds = []
    for k in range(k0 + 1, config.iterations + 1):
        t0 = time.perf_counter()
        batch = sample_batch(rng, n, config.batch_fraction)
        in_batch = np.zeros(n, dtype=bool)
        in_batch[batch] = True
        channel.send_message(MsgType.BATCH_ANNOUNCE, {"k": k, "size": int(batch.size)},
                             batch=pack_bits(in_batch))
        g, h, eps = compute_gradients(y, scores)
        tree, leaf_rows = grow_tree_leafwise(batch, quantize(g), quantize(h), search, params, k)
        a = config.alpha(k)
        ens = update_ensemble(ens, tree, a)

        weights = {nd.node_id: nd.leaf_weight for nd in tree.leaves}
        delta = np.zeros(n)
        for nid, rows in leaf_rows.items():
            delta[rows] = weights[nid]
        rest = np.flatnonzero(~in_batch)
        flow = compile_execution_flow(Ensemble(ens.base_score, ens.learning_rate, [tree], [a]))
        universes = {}
        if rest.size:
            universes["train"] = (n, rest, XA[rest])
        if n_test:
            universes["test"] = (n_test, np.arange(n_test), XA_test)
        if universes:
            at = route(channel, flow, [k], universes)
            if rest.size:
                delta[rest] = tree.leaf_values(at["train"][k])
            if n_test:
                test_scores += a * tree.leaf_values(at["test"][k])
        scores += a * delta
        seconds.append(time.perf_counter() - t0)

        iteration_log.add(k, scores, test_scores if n_test else None, eps[batch].mean())
        rec = iteration_log.records[-1]
        rec.bytes_sent += offset_sent
        rec.bytes_recv += offset_recv
        log.info("iteration %d train_auc=%s test_auc=%s", k, rec.train_auc, rec.test_auc)
        if checkpoint_dir and k % CHECKPOINT_EVERY == 0:
            write_json_atomic(_ckpt_path(checkpoint_dir, "A"), {
                "format": CHECKPOINT_FORMAT, "role": "A", "iteration": k, "digest": digest,
                "model": ensemble_to_json(ens, "A", tr.feature_names),
                "rng_state": rng.bit_generator.state,
                "scores": scores.tolist(), "test_scores": test_scores.tolist(),
                "records": [r.__dict__ for r in iteration_log.records],
            })
    channel.send_message(MsgType.BATCH_ANNOUNCE, {"k": config.iterations, "done": True})

    fallback = None
    if train_fallback:
        fallback, _, _ = train_centralized(train, config)
    return PartyAResult(ens, iteration_log.records, fallback, inter, test_inter, scores,
                        test_scores if n_test else None, seconds, session.session_id)


# -- party B ----------------------------------------------------------------------

def serve_party_b(channel, train, config: TrainConfig, cipher: str, test=None,
                  registry: SessionRegistry | None = None, checkpoint_dir=None) -> PartyBResult:
    """Serve one training session for party A; returns B's model part."""
    digest = config_hash(config, cipher)
    session = handshake_b(channel, digest, registry, expect_mode="train")
    if cipher == "paillier":
        if session.public_key is None:
            channel.abort("PROTOCOL", "no public key")
            raise ProtocolError("party A did not send a public key")
        backend = PaillierBackend(session.public_key)
    else:
        backend = NullBackend()

    inter = psi.psi_session("B", train.ids, channel, domain="train")
    test_inter = psi.psi_session("B", test.ids if test is not None else [], channel, domain="test")
    if not inter:
        raise DataError("the parties share no training ids")
    tr = train.align(inter)
    te = test.align(test_inter) if test is not None and test_inter else None
    mapper = BinMapper.fit(tr.features, config.bins)
    builder = BTreeBuilder(mapper.transform(tr.features), mapper, config.strategy, backend, inter)
    part = BModelPart(feature_names=list(tr.feature_names))

    if session.resume_from:
        ckpt = load_checkpoint(checkpoint_dir, "B") if checkpoint_dir else None
        if ckpt is None or ckpt["iteration"] < session.resume_from or ckpt["digest"] != digest:
            channel.abort("PROTOCOL", f"no B checkpoint covering iteration {session.resume_from}")
            raise ProtocolError(f"cannot resume from iteration {session.resume_from}")
        full = BModelPart.from_json(ckpt["model"])
        # B may be ahead of A's last checkpoint; keep trees up to A's
        part.topology = [tp for tp in full.topology if tp[0] <= session.resume_from]
        part.splits = {k: v for k, v in full.splits.items() if k[0] <= session.resume_from}

    universes = {"train": tr.features}
    if te is not None:
        universes["test"] = te.features
    router = RouteServer(part.splits, universes)
    expected = (MsgType.BATCH_ANNOUNCE, MsgType.ENC_GRADIENTS, MsgType.SPLIT_WINNER,
                MsgType.INFER_ROUTE_REQ)
    k = session.resume_from
    while True:
        frame = channel.recv(expected)
        meta, sec = decode_message(frame.payload)
        mt = frame.msg_type
        if mt == MsgType.BATCH_ANNOUNCE:
            if meta.get("done"):
                break
            k = int(meta["k"])
            mask = unpack_bits(sec["batch"])
            if mask.size != len(inter):
                raise ProtocolError("batch bitmap does not cover the intersection")
            builder.set_batch(np.flatnonzero(mask))
        elif mt == MsgType.ENC_GRADIENTS:
            builder.on_enc_gradients(meta, sec, channel)
        elif mt == MsgType.SPLIT_WINNER:
            done = builder.on_split_winner(meta, channel)
            if done or meta["round"] == config.t - 1:
                tid = builder.tree_id
                part.topology.append([tid, [[nid, o] for nid, o in sorted(builder.topology)]])
                for nid, split in builder.splits.items():
                    part.splits[(tid, nid)] = split
                if checkpoint_dir and tid % CHECKPOINT_EVERY == 0:
                    write_json_atomic(_ckpt_path(checkpoint_dir, "B"), {
                        "format": CHECKPOINT_FORMAT, "role": "B", "iteration": tid,
                        "digest": digest, "model": part.to_json()})
        else:
            router.handle(meta, sec, channel)
    return PartyBResult(part, inter, session.session_id)


# -- prediction session --------------------------------------------------------------

def predict_party_a(channel, ensemble: Ensemble, data, fallback: Ensemble | None,
                    topology_digest: str, session_id: str | None = None):
    """Predict every row of A's ``data``: shared ids through B, the rest locally."""
    handshake_a(channel, topology_digest, "infer", None, 0, session_id)
    shared = psi.psi_session("A", data.ids, channel, domain="infer")
    flow = compile_execution_flow(ensemble, topology_digest)
    index = {x: i for i, x in enumerate(data.ids)}
    rows = np.array([index[x] for x in shared], dtype=np.int64)
    probs = np.full(data.n_samples, np.nan)
    if rows.size:
        at = route(channel, flow, flow.tree_ids,
                   {"infer": (len(shared), np.arange(len(shared)), data.features[rows])})
        probs[rows] = expit(score_leaves(flow, at["infer"], rows.size))
    channel.send_message(MsgType.INFER_ROUTE_REQ, {"done": True})
    others = np.setdiff1d(np.arange(data.n_samples), rows)
    if others.size:
        probs[others] = fallback_predict(fallback, data.features[others])
    return probs, shared


def serve_predictions_b(channel, part: BModelPart, data, registry: SessionRegistry | None = None):
    handshake_b(channel, part.topology_hash, registry, expect_mode="infer")
    shared = psi.psi_session("B", data.ids, channel, domain="infer")
    X = data.align(shared).features if shared else np.zeros((0, data.n_features), np.float32)
    router = RouteServer(part.splits, {"infer": X})
    while True:
        meta, sec = channel.recv_message(MsgType.INFER_ROUTE_REQ)
        if meta.get("done"):
            return shared
        router.handle(meta, sec, channel)


# -- in-process runner ----------------------------------------------------------------

def run_in_process(train_a, train_b, config: TrainConfig, backend, test_a=None, test_b=None,
                   transcript_dir=None, checkpoint_dir=None, resume=False, registry=None,
                   fail_after_b: int | None = None, train_fallback: bool = True, timeout=600):
    """Both parties on two threads over a loopback channel.

    Returns ``(a_result, b_result, channel_a, channel_b)``; the first party
    error is re-raised after both threads stop.
    """
    ta = tb = None
    if transcript_dir:
        ta = Path(transcript_dir) / "party_a.transcript"
        tb = Path(transcript_dir) / "party_b.transcript"
    ch_a, ch_b = LoopbackChannel.pair(ta, tb, timeout=timeout)
    ch_b.fail_after = fail_after_b
    ckpt_a = ckpt_b = None
    if checkpoint_dir:
        ckpt_a = Path(checkpoint_dir) / "a"
        ckpt_b = Path(checkpoint_dir) / "b"
    out: dict = {}

    def party_b():
        try:
            out["b"] = serve_party_b(ch_b, train_b, config, backend.name, test_b,
                                     registry or SessionRegistry(), ckpt_b)
        except BaseException as exc:  # surfaced to the caller below
            out["b_err"] = exc
        finally:
            ch_b.close()

    th = threading.Thread(target=party_b, name="party-b", daemon=True)
    th.start()
    try:
        out["a"] = train_party_a(ch_a, train_a, config, backend, test_a, ckpt_a, resume,
                                 train_fallback)
    except BaseException as exc:
        out["a_err"] = exc
    finally:
        ch_a.close()
        th.join()
    errors = [e for e in (out.get("a_err"), out.get("b_err")) if e is not None]
    if errors:
        # a dropped channel on one side is usually the echo of the other side's failure
        primary = [e for e in errors if not isinstance(e, TransportError)]
        raise (primary or errors)[0]
    return out["a"], out["b"], ch_a, ch_b
