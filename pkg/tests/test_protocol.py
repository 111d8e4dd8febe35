import threading

import numpy as np
import pytest

from fedgbm.core.binning import BinMapper
from fedgbm.core.boosting import TrainConfig
from fedgbm.core.dataset import Dataset
from fedgbm.core.model import merge_model
from fedgbm.errors import ConfigMismatchError, ProtocolError, SecurityAbort, TransportError
from fedgbm.experiments import Views, federated, oracle_report
from fedgbm.phe import PaillierBackend, decode_signed
from fedgbm.protocol.channel import LoopbackChannel, read_transcript
from fedgbm.protocol.frames import (MsgType, ints_to_rows, pack_ciphertexts, rows_to_ints,
                                    unpack_ciphertexts, unpack_u32)
from fedgbm.protocol.handshake import SessionRegistry, config_hash, handshake_a, handshake_b
from fedgbm.protocol.split_search import BTreeBuilder
from fedgbm.protocol.training import CHECKPOINT_EVERY


def both(fa, fb):
    """Run two callables on a loopback pair; return results or exceptions."""
    ca, cb = LoopbackChannel.pair(timeout=10)
    out = {}

    def run(name, fn, ch):
        try:
            out[name] = fn(ch)
        except Exception as exc:
            out[name] = exc
            ch.close()

    th = threading.Thread(target=run, args=("b", fb, cb))
    th.start()
    run("a", fa, ca)
    th.join()
    return out["a"], out["b"]


# -- handshake -------------------------------------------------------------------

def test_handshake_agrees():
    d = config_hash(TrainConfig(), "null")
    a, b = both(lambda c: handshake_a(c, d), lambda c: handshake_b(c, d, SessionRegistry()))
    assert a.session_id == b.session_id and len(a.session_id) == 32
    assert b.mode == "train"


def test_handshake_config_mismatch():
    da = config_hash(TrainConfig(t=4), "null")
    db = config_hash(TrainConfig(t=8), "null")
    a, b = both(lambda c: handshake_a(c, da), lambda c: handshake_b(c, db))
    assert isinstance(a, ConfigMismatchError) and isinstance(b, ConfigMismatchError)


def test_config_hash_covers_cipher():
    assert config_hash(TrainConfig(), "null") != config_hash(TrainConfig(), "paillier")


def test_replayed_session_id_rejected(tmp_path):
    d = config_hash(TrainConfig(), "null")
    reg = SessionRegistry(tmp_path / "sessions.json")
    sid = "ab" * 16
    both(lambda c: handshake_a(c, d, session_id=sid), lambda c: handshake_b(c, d, reg))
    # a fresh registry loaded from disk still remembers the id
    a, b = both(lambda c: handshake_a(c, d, session_id=sid),
                lambda c: handshake_b(c, d, SessionRegistry(tmp_path / "sessions.json")))
    assert isinstance(b, SecurityAbort) and isinstance(a, SecurityAbort)


def test_version_mismatch_aborts():
    d = config_hash(TrainConfig(), "null")

    def old_a(c):
        c.send_message(MsgType.HELLO, {"version": 99, "session_id": "0" * 32, "mode": "train"})
        return c.recv()

    a, b = both(old_a, lambda c: handshake_b(c, d))
    assert isinstance(a, ProtocolError) and isinstance(b, ProtocolError)


def test_mode_checked():
    d = config_hash(TrainConfig(), "null")
    a, b = both(lambda c: handshake_a(c, d, "infer"), lambda c: handshake_b(c, d, expect_mode="train"))
    assert isinstance(b, ProtocolError)


# -- training sessions ------------------------------------------------------------

def test_only_b_separates_gives_b_split(null_backend):
    ids = [f"u{i}" for i in range(4)]
    a = Dataset(ids, np.zeros((4, 1)), np.array([0, 0, 1, 1]))
    b = Dataset(ids, np.array([[0.0], [0.0], [1.0], [1.0]]))
    cfg = TrainConfig(iterations=1, t=1, min_leaf=1)
    a_res, b_res, _, _ = federated(Views(a, b), cfg, null_backend)
    tree = a_res.ensemble.trees[-1]
    assert tree.nodes[0].owner == "B" and tree.nodes[0].threshold is None
    assert b_res.part.splits == {(1, 0): (0, 0.5)}
    assert a_res.train_scores[2] > a_res.train_scores[0]


def test_null_cipher_matches_centralized(small_views, null_backend):
    rep = oracle_report(small_views, TrainConfig(iterations=10, t=4, min_leaf=5), null_backend)
    assert rep["match"], rep


def test_paillier_matches_centralized(small_views, paillier512):
    rep = oracle_report(small_views, TrainConfig(iterations=3, t=3, min_leaf=5), paillier512)
    assert rep["match"], rep


def test_cardinality_strategy_matches_centralized(small_views, null_backend):
    cfg = TrainConfig(iterations=3, t=3, min_leaf=5, strategy="psi-cardinality")
    rep = oracle_report(small_views, cfg, null_backend)
    assert rep["match"], rep


def test_four_frames_per_round(small_views, null_backend, tmp_path):
    cfg = TrainConfig(iterations=4, t=4, min_leaf=5)
    a_res, _, ch_a, _ = federated(small_views, cfg, null_backend, transcript_dir=tmp_path)
    for k in range(1, cfg.iterations + 1):
        tree = a_res.ensemble.trees[k]
        rounds = tree.n_internal + (1 if tree.n_internal < cfg.t else 0)
        sent = ch_a.counter.frame_counts(k, "sent")
        recv = ch_a.counter.frame_counts(k, "recv")
        assert sent["ENC_GRADIENTS"] == sent["SPLIT_WINNER"] == rounds
        assert recv["SPLIT_CANDIDATES"] == recv["PARTITION"] == rounds
    # frames of one round always come in the same order
    seq = [f.msg_type for d, f in read_transcript(tmp_path / "party_a.transcript")
           if f.msg_type in (MsgType.ENC_GRADIENTS, MsgType.SPLIT_CANDIDATES,
                             MsgType.SPLIT_WINNER, MsgType.PARTITION)]
    cycle = [MsgType.ENC_GRADIENTS, MsgType.SPLIT_CANDIDATES, MsgType.SPLIT_WINNER, MsgType.PARTITION]
    assert seq == cycle * (len(seq) // 4)


def test_message_sequence_independent_of_cipher(small_views, null_backend, paillier512, tmp_path):
    cfg = TrainConfig(iterations=2, t=3, min_leaf=5)
    seqs = []
    for name, be in (("null", null_backend), ("paillier", paillier512)):
        federated(small_views, cfg, be, transcript_dir=tmp_path / name, train_fallback=False)
        seqs.append([(d, f.msg_type) for d, f in read_transcript(tmp_path / name / "party_a.transcript")])
    assert seqs[0] == seqs[1]


def test_payload_grows_with_batch_fraction(small_views, paillier512):
    per_iter = []
    for b in (0.1, 0.5, 1.0):
        cfg = TrainConfig(iterations=2, t=3, min_leaf=5, batch_fraction=b)
        _, _, ch_a, _ = federated(small_views, cfg, paillier512, train_fallback=False)
        counts = ch_a.counter.per_iteration("sent")
        per_iter.append(np.mean([counts[k] for k in (1, 2)]))
    assert per_iter[0] < per_iter[1] < per_iter[2]


def test_resume_after_drop_equals_uninterrupted(small_views, null_backend, tmp_path):
    cfg = TrainConfig(iterations=CHECKPOINT_EVERY + 3, t=3, min_leaf=5, batch_fraction=0.5, seed=4)
    full_a, full_b, _, ch_b = federated(small_views, cfg, null_backend, train_fallback=False)
    # drop B's connection during iteration CHECKPOINT_EVERY + 2
    frames = sum(sum(ch_b.counter.frame_counts(k, "sent").values())
                 for k in range(CHECKPOINT_EVERY + 2))
    with pytest.raises(TransportError):
        federated(small_views, cfg, null_backend, checkpoint_dir=tmp_path, fail_after_b=frames + 3,
                  train_fallback=False)
    assert (tmp_path / "a" / "checkpoint_a.json").exists()
    a_res, b_res, _, _ = federated(small_views, cfg, null_backend, checkpoint_dir=tmp_path,
                                   resume=True, train_fallback=False)
    np.testing.assert_array_equal(a_res.train_scores, full_a.train_scores)
    np.testing.assert_array_equal(a_res.test_scores, full_a.test_scores)
    assert b_res.part.splits == full_b.part.splits
    assert b_res.part.topology_hash == full_b.part.topology_hash
    assert [r.k for r in a_res.records] == list(range(1, cfg.iterations + 1))
    merged = merge_model(a_res.ensemble, b_res.part)
    assert len(merged.trees) == cfg.iterations + 1


def test_fallback_model_trained(small_views, null_backend):
    a_res, _, _, _ = federated(small_views, TrainConfig(iterations=2, t=2, min_leaf=5), null_backend)
    fb = a_res.fallback
    assert fb is not None
    assert all(n.owner == "A" for t in fb.trees for n in t.internal)


def test_no_shared_ids_is_data_error(null_backend):
    from fedgbm.errors import DataError
    a = Dataset(["x1", "x2"], np.zeros((2, 1)), np.array([0, 1]))
    b = Dataset(["y1", "y2"], np.zeros((2, 1)))
    with pytest.raises(DataError):
        federated(Views(a, b), TrainConfig(iterations=1), null_backend)


# -- B's aggregation ----------------------------------------------------------------

class FakeChannel:
    def __init__(self):
        self.sent = []

    def send_message(self, mt, meta, **sections):
        self.sent.append((mt, meta, sections))


def test_b_aggregates_decrypt_to_subset_sums(paillier512):
    rng = np.random.default_rng(0)
    n, m = 300, 5
    X = rng.normal(size=(n, m))
    mapper = BinMapper.fit(X, 21)
    binned = mapper.transform(X)
    assert int(mapper.n_candidates.sum()) == 100
    pub = PaillierBackend(paillier512.public_key)
    builder = BTreeBuilder(binned, mapper, "phe-aggregate", pub)
    batch = np.sort(rng.choice(n, 200, replace=False))
    builder.set_batch(batch)
    g = rng.integers(-2 ** 40, 2 ** 40, n)
    h = rng.integers(0, 2 ** 38, n)
    w = paillier512.ct_width
    N = paillier512.n
    sec = {"g": pack_ciphertexts(paillier512.encrypt_many([int(v) % N for v in g[batch]]), w),
           "h": pack_ciphertexts(paillier512.encrypt_many([int(v) % N for v in h[batch]]), w)}
    ch = FakeChannel()
    builder.on_enc_gradients({"tree": 1, "round": 0, "small": 0, "large": None, "parent": None,
                              "eval": True}, sec, ch)
    mt, meta, out = ch.sent[0]
    assert mt == MsgType.SPLIT_CANDIDATES and meta["n_candidates"] == 100
    GL = decode_signed(paillier512.decrypt_many(rows_to_ints(unpack_ciphertexts(out["gl"]))), N)
    HL = decode_signed(paillier512.decrypt_many(rows_to_ints(unpack_ciphertexts(out["hl"]))), N)
    CL = unpack_u32(out["cl"])
    i = 0
    for f in range(m):
        for j in range(int(mapper.n_candidates[f])):
            left = batch[binned[batch, f] <= j]
            assert GL[i] == int(g[left].sum())
            assert HL[i] == int(h[left].sum())
            assert CL[i] == left.size
            i += 1


def test_b_rejects_foreign_membership(null_backend):
    X = np.arange(10.0).reshape(-1, 1)
    mapper = BinMapper.fit(X, 4)
    builder = BTreeBuilder(mapper.transform(X), mapper, "phe-aggregate", null_backend)
    builder.set_batch(np.arange(5))
    w = null_backend.ct_width
    zeros = pack_ciphertexts(ints_to_rows([0] * 5, w).tobytes(), w)
    ch = FakeChannel()
    builder.on_enc_gradients({"tree": 1, "round": 0, "small": 0, "eval": False},
                             {"g": zeros, "h": zeros}, ch)
    from fedgbm.protocol.frames import pack_u32
    with pytest.raises(ProtocolError):
        builder.on_enc_gradients({"tree": 1, "round": 1, "small": 1, "large": 2, "parent": 0,
                                  "eval": False}, {"members": pack_u32([7])}, ch)
    with pytest.raises(ProtocolError):
        builder.on_split_winner({"tree": 1, "round": 0, "winner": "B", "leaf": 0,
                                 "candidate": 99}, ch)
