"""Wire-level leak checks: planted values must never appear in a transcript."""
import numpy as np
import pytest
from oracles import contains_any, float_needles
from scipy.special import expit

from fedgbm.core.boosting import TrainConfig
from fedgbm.core.dataset import Dataset
from fedgbm.core.split import quantize
from fedgbm.data import make_synthetic
from fedgbm.experiments import Views, federated, make_views

CANARY_OFFSET = 7777.0123


@pytest.fixture(scope="module")
def canary_views():
    v = make_views(make_synthetic(500, 12, 11), 6, 11)
    b = v.b_train
    X = b.features.copy()
    X[:, 0] += CANARY_OFFSET
    planted = Dataset(b.ids, X, None, b.name, b.feature_names)
    return Views(v.a_train, planted, v.a_test, v.b_test)


def f4_pairs(column):
    """Adjacent float32 values as 8-byte windows, so chance hits are negligible."""
    col = np.asarray(column, dtype=np.float32)
    out = set()
    for dt in ("<f4", ">f4"):
        raw = col.astype(dt).tobytes()
        out.update(raw[i:i + 8] for i in range(0, len(raw) - 7, 4))
    return out


def gradient_needles(views, backend, n):
    """Low 6 bytes of every first-iteration gradient residue, plus raw int64 forms."""
    cfg0 = TrainConfig(iterations=0, t=3, min_leaf=5)
    a0, _, _, _ = federated(views, cfg0, backend, train_fallback=False)
    y = views.a_train.align(a0.intersection).labels.astype(float)
    g_raw = quantize(expit(a0.train_scores) - y)
    out = set()
    for v in g_raw.tolist():
        if abs(v) < 2 ** 20:
            continue
        out.add((v % n).to_bytes((n.bit_length() + 7) // 8, "big")[-6:])
        out.add(int(v).to_bytes(8, "big", signed=True))
        out.add(int(v).to_bytes(8, "little", signed=True))
    return out, y


def run_with_transcripts(views, backend, tmp_path):
    cfg = TrainConfig(iterations=3, t=3, min_leaf=5)
    a_res, b_res, _, _ = federated(views, cfg, backend, transcript_dir=tmp_path, train_fallback=False)
    blob = (tmp_path / "party_a.transcript").read_bytes()
    return a_res, b_res, blob


def test_paillier_transcript_has_no_canaries(canary_views, paillier512, tmp_path):
    grads, y = gradient_needles(canary_views, paillier512, paillier512.n)
    a_res, b_res, blob = run_with_transcripts(canary_views, paillier512, tmp_path)
    assert any(f == 0 for f, _ in b_res.part.splits.values()), "canary column never used"

    b = canary_views.b_train
    feature_needles = set()
    for f in range(b.n_features):
        feature_needles |= f4_pairs(b.features[:, f])
        feature_needles |= f4_pairs(b.align(a_res.intersection).features[:, f])
    canary = b.features[:, 0].astype(np.float64)
    feature_needles |= {nd for nd in float_needles(canary) if len(nd) >= 8}
    assert not contains_any(blob, feature_needles)

    thresholds = [thr for _, thr in b_res.part.splits.values()]
    thr_needles = {nd for nd in float_needles(thresholds) if len(nd) >= 8}
    assert not contains_any(blob, thr_needles)

    assert not contains_any(blob, grads)
    assert np.packbits(y.astype(bool)).tobytes() not in blob


def test_null_cipher_positive_control(canary_views, null_backend, tmp_path):
    # without encryption the gradient residues are on the wire, so the scan works
    grads, _ = gradient_needles(canary_views, null_backend, null_backend.n)
    _, _, blob = run_with_transcripts(canary_views, null_backend, tmp_path)
    assert len(contains_any(blob, grads)) > len(grads) // 4
