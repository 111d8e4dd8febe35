"""Evaluation metrics, run logs and payload accounting."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from fedgbm.errors import MetricError
from fedgbm.protocol.frames import MsgType, decode_message

RUNLOG_SCHEMA = "fedgbm-runlog-v1"
CSV_COLUMNS = ("k", "train_auc", "test_auc", "train_f1", "test_f1", "mean_eps",
               "bytes_sent", "bytes_recv", "wall_ms")
SENT, RECV = "sent", "recv"


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise MetricError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1(labels, scores, threshold: float = 0.5) -> float:
    y = np.asarray(labels).astype(bool)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def logloss(labels, probs, eps: float = 1e-12) -> float:
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def safe_auc(labels, scores) -> float | None:
    try:
        return auc(labels, scores)
    except MetricError:
        return None


# -- run logs -----------------------------------------------------------------

@dataclass
class MetricsRecord:
    k: int
    train_auc: float | None
    test_auc: float | None
    train_f1: float | None
    test_f1: float | None
    mean_eps: float
    bytes_sent: int
    bytes_recv: int
    wall_ms: int

    def __post_init__(self):
        for name in ("train_auc", "test_auc", "train_f1", "test_f1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        if self.bytes_sent < 0 or self.bytes_recv < 0:
            raise MetricError("byte counters must be non-negative")


def _csv_cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def emit_run_log(records, path) -> tuple[Path, Path]:
    """Write ``<path>`` as JSON lines and ``<path minus suffix>.csv`` next to it."""
    path = Path(path)
    if path.suffix != ".jsonl":
        path = path.with_suffix(".jsonl")
    prev = None
    for r in records:
        if prev is not None and (r.k < prev.k or r.bytes_sent < prev.bytes_sent
                                 or r.bytes_recv < prev.bytes_recv):
            raise MetricError("records must be ordered with cumulative byte counters")
        prev = r
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"schema": RUNLOG_SCHEMA, **asdict(r)}) for r in records]
    path.write_text("".join(line + "\n" for line in lines))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_csv_cell(getattr(r, c)) for c in CSV_COLUMNS])
    csv_path = path.with_suffix(".csv")
    csv_path.write_text(buf.getvalue())
    return path, csv_path


def load_run_log(path) -> list[MetricsRecord]:
    names = {f.name for f in fields(MetricsRecord)}
    out = []
    for line in Path(path).read_text().splitlines():
        obj = json.loads(line)
        if obj.pop("schema", None) != RUNLOG_SCHEMA:
            raise MetricError(f"unexpected run-log schema in {path}")
        out.append(MetricsRecord(**{k: v for k, v in obj.items() if k in names}))
    return out


def mean_sd(values) -> tuple[float, float]:
    v = [float(x) for x in values if x is not None and not math.isnan(x)]
    if not v:
        return float("nan"), float("nan")
    return float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


# -- payload accounting ---------------------------------------------------------

class PayloadCounter:
    """Frame bytes keyed by ``(direction, msg_type, iteration)``.

    Iteration 0 covers setup traffic (handshake, PSI, base model). The
    iteration advances when a BATCH_ANNOUNCE frame carrying ``k`` passes in
    either direction, so both parties attribute bytes identically. Counts are
    whole application frames (header plus payload).
    """

    def __init__(self):
        self.iteration = 0
        self.tallies: dict[tuple[str, int, int], int] = defaultdict(int)
        self.frames: dict[tuple[str, int, int], int] = defaultdict(int)

    def record(self, direction: str, frame) -> None:
        if frame.msg_type == MsgType.BATCH_ANNOUNCE:
            meta, _ = decode_message(frame.payload)
            self.iteration = int(meta["k"])
        key = (direction, int(frame.msg_type), self.iteration)
        self.tallies[key] += len(frame)
        self.frames[key] += 1

    def total(self, direction: str) -> int:
        return sum(v for (d, _, _), v in self.tallies.items() if d == direction)

    @property
    def bytes_sent(self) -> int:
        return self.total(SENT)

    @property
    def bytes_received(self) -> int:
        return self.total(RECV)

    def per_iteration(self, direction: str | None = None) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for (d, _, it), v in self.tallies.items():
            if direction is None or d == direction:
                out[it] += v
        return dict(sorted(out.items()))

    def by_type(self, direction: str, iteration: int | None = None) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for (d, mt, it), v in self.tallies.items():
            if d == direction and (iteration is None or it == iteration):
                out[MsgType(mt).name] += v
        return dict(out)

    def frame_counts(self, iteration: int, direction: str | None = None) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for (d, mt, it), v in self.frames.items():
            if it == iteration and (direction is None or d == direction):
                out[MsgType(mt).name] += v
        return dict(out)
