"""Experiment harness shared by the CLI, the benchmark and the acceptance tests."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from fedgbm.core.boosting import TrainConfig, train_centralized
from fedgbm.core.dataset import Dataset, hstack
from fedgbm.core.model import merge_model
from fedgbm.data import PartitionSpec, train_test_split, vertical_partition
from fedgbm.metrics import auc, f1, mean_sd
from fedgbm.protocol.training import run_in_process


@dataclass
class Views:
    """Both parties' train and test views of one experiment."""
    a_train: Dataset
    b_train: Dataset
    a_test: Dataset | None = None
    b_test: Dataset | None = None

    @property
    def n_a(self) -> int:
        return self.a_train.n_features

    def joined(self) -> tuple[Dataset, Dataset | None]:
        """Centralized tables over the shared ids (A's row order)."""
        shared = set(self.b_train.ids)
        a = self.a_train.subset([i for i, x in enumerate(self.a_train.ids) if x in shared])
        tr = hstack(a, self.b_train.align(a.ids))
        te = None
        if self.a_test is not None and self.b_test is not None:
            shared = set(self.b_test.ids)
            at = self.a_test.subset([i for i, x in enumerate(self.a_test.ids) if x in shared])
            te = hstack(at, self.b_test.align(at.ids))
        return tr, te


def make_views(ds: Dataset, a_features=None, seed: int = 0, test_ratio: float = 0.2,
               drop_rate: float = 0.0) -> Views:
    """Partition columns, then split rows 80/20 (stratified) on A's labels."""
    a, b = vertical_partition(ds, PartitionSpec(a_features=a_features, seed=seed,
                                                drop_rate=drop_rate))
    a_tr, a_te = train_test_split(a, 1.0 - test_ratio, seed)
    test_ids = set(a_te.ids)
    in_test = np.array([x in test_ids for x in b.ids], dtype=bool)
    return Views(a_tr, b.subset(np.flatnonzero(~in_test)), a_te, b.subset(np.flatnonzero(in_test)))


def federated(views: Views, config: TrainConfig, backend, **kw):
    """One in-process federated run; returns ``(a_result, b_result, ch_a, ch_b)``."""
    return run_in_process(views.a_train, views.b_train, config, backend,
                          views.a_test, views.b_test, **kw)


def centralized(views: Views, config: TrainConfig, which: str = "joined"):
    """The joined-data reference or the A-only baseline."""
    if which == "a-only":
        return train_centralized(views.a_train, config, test=views.a_test)
    if which != "joined":
        raise ValueError(f"unknown baseline {which!r}")
    tr, te = views.joined()
    return train_centralized(tr, config, n_a=views.n_a, test=te)


def _reorder(values, ids, order):
    index = {x: i for i, x in enumerate(ids)}
    return np.asarray(values)[[index[x] for x in order]]


def oracle_report(views: Views, config: TrainConfig, backend, tol: float = 1e-9) -> dict:
    """Compare a federated run against centralized training on the joined data."""
    a_res, b_res, _, _ = federated(views, config, backend, train_fallback=False)
    ens_c, _, state = centralized(views, config, "joined")
    tr, te = views.joined()
    fed = merge_model(a_res.ensemble, b_res.part)
    mismatched = []
    for tf, tc in zip(fed.trees, ens_c.trees):
        same = tf.topology() == tc.topology() and all(
            (tf.nodes[i].feature_index, tf.nodes[i].threshold) == (tc.nodes[i].feature_index,
                                                                    tc.nodes[i].threshold)
            for i in tf.nodes if tf.nodes[i].kind == "internal")
        if not same:
            mismatched.append(tf.tree_id)
    weights = [abs(tf.nodes[i].leaf_weight - tc.nodes[i].leaf_weight)
               for tf, tc in zip(fed.trees, ens_c.trees) if tf.tree_id not in mismatched
               for i in tf.nodes if tf.nodes[i].kind == "leaf"]
    # federated scores follow the intersection order, centralized ones A's row order
    central = _reorder(state["scores"], tr.ids, a_res.intersection)
    diff_train = float(np.max(np.abs(expit(a_res.train_scores) - expit(central))))
    diff_test = 0.0
    if a_res.test_scores is not None:
        central = _reorder(state["test_scores"], te.ids, a_res.test_intersection)
        diff_test = float(np.max(np.abs(expit(a_res.test_scores) - expit(central))))
    ok = (not mismatched and len(fed.trees) == len(ens_c.trees)
          and max(diff_train, diff_test) <= tol)
    return {"match": ok, "trees": len(fed.trees), "mismatched_trees": mismatched,
            "max_leaf_weight_diff": max(weights, default=0.0),
            "max_train_prob_diff": diff_train, "max_test_prob_diff": diff_test,
            "tolerance": tol}


BENCH_COLUMNS = ("dataset", "n", "t", "batch_fraction", "strategy", "cipher", "repeats",
                 "test_auc_mean", "test_auc_sd", "test_f1_mean", "test_f1_sd",
                 "fed_s_per_iter_mean", "fed_s_per_iter_sd",
                 "central_s_per_iter_mean", "central_s_per_iter_sd",
                 "slowdown_mean", "bytes_per_iter_mean", "bytes_per_iter_sd")


def bench_cell(views: Views, config: TrainConfig, backend, repeat: int = 1,
               name: str = "data") -> dict:
    """Mean and sd over ``repeat`` seeds of one (dataset, t, b) configuration."""
    aucs, f1s, fed_s, cen_s, nbytes = [], [], [], [], []
    for r in range(repeat):
        cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + r})
        a_res, _, ch_a, _ = federated(views, cfg, backend, train_fallback=False)
        per_iter = ch_a.counter.per_iteration("sent")
        nbytes.append(np.mean([per_iter.get(k, 0) for k in range(1, cfg.iterations + 1)]))
        fed_s.append(float(np.median(a_res.iteration_seconds)))
        _, _, state = centralized(views, cfg, "joined")
        cen_s.append(float(np.median(state["timings"])))
        if a_res.test_scores is not None:
            y = views.a_test.align(a_res.test_intersection).labels
            p = expit(a_res.test_scores)
            aucs.append(auc(y, p))
            f1s.append(f1(y, p))
    row = {"dataset": name, "n": views.a_train.n_samples, "t": config.t,
           "batch_fraction": config.batch_fraction, "strategy": config.strategy,
           "cipher": backend.name, "repeats": repeat}
    for key, vals in (("test_auc", aucs), ("test_f1", f1s), ("fed_s_per_iter", fed_s),
                      ("central_s_per_iter", cen_s), ("bytes_per_iter", nbytes)):
        row[f"{key}_mean"], row[f"{key}_sd"] = mean_sd(vals)
    row["slowdown_mean"] = float(np.mean(np.array(fed_s) / np.array(cen_s)))
    return row


def write_rows(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def slowdown_sweep(sizes, config: TrainConfig, backend, repeat: int = 3, n_features: int = 20,
                   seed: int = 0) -> list[dict]:
    """Federated vs centralized seconds per iteration on synthetic data.

    Each run contributes its median iteration time; across ``repeat`` runs the
    minimum is kept, since machine noise only ever adds time.
    """
    from fedgbm.data import make_synthetic

    views = {n: make_views(make_synthetic(n, n_features, seed), n_features // 2, seed)
             for n in sizes}
    fed = {n: [] for n in sizes}
    cen = {n: [] for n in sizes}
    for _ in range(repeat):
        for n in sizes:
            a_res, _, _, _ = federated(views[n], config, backend, train_fallback=False)
            fed[n].append(float(np.median(a_res.iteration_seconds)))
            _, _, state = centralized(views[n], config, "joined")
            cen[n].append(float(np.median(state["timings"])))
    return [{"n": n, "fed_s_per_iter": min(fed[n]), "central_s_per_iter": min(cen[n]),
             "slowdown": min(fed[n]) / min(cen[n])} for n in sizes]
