"""Command-line entry points.

Every command writes a ``manifest.json`` (resolved configuration, seeds and
input digests) under ``--out-dir`` next to its outputs, laid out as
``models/``, ``logs/`` and ``transcripts/``. Exit codes: 0 ok, 2 data or
configuration error, 3 configuration mismatch between the parties, 4 transport
or protocol failure, 5 security abort.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import click

from fedgbm import __version__
from fedgbm.core.boosting import STRATEGIES, TrainConfig
from fedgbm.core.model import (BModelPart, ensemble_from_json, ensemble_to_json, read_json,
                               write_json_atomic)
from fedgbm.errors import ConfigError, FedGBMError
from fedgbm.metrics import emit_run_log

log = logging.getLogger("fedgbm")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
CIPHERS = ("paillier", "null")


# -- helpers ------------------------------------------------------------------------

def _setup_logging():
    level = os.environ.get("FEDGBM_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"FEDGBM_LOG must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_config(path, **overrides) -> TrainConfig:
    """Read a JSON config (keys are :class:`TrainConfig` fields); flags override."""
    obj = {}
    if path:
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    obj.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**obj)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _layout(out_dir) -> dict:
    root = Path(out_dir)
    dirs = {name: root / name for name in ("models", "logs", "transcripts")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    dirs["root"] = root
    return dirs


def write_manifest(out_dir, command: str, config=None, inputs=(), **extra) -> Path:
    """Record what a run consumed; inputs are hashed by content."""
    from fedgbm.data import file_digest

    body = {"command": command, "version": __version__,
            "config": asdict(config) if config is not None else None,
            "inputs": {str(p): file_digest(p) for p in inputs if p and Path(p).is_file()}}
    body.update(extra)
    return write_json_atomic(Path(out_dir) / "manifest.json", body)


def _backend(cipher, keys, insecure):
    from fedgbm.phe import load_keypair, make_backend, null_cipher_backend

    if cipher == "null":
        return null_cipher_backend(insecure)
    if keys is None:
        raise ConfigError("--keys is required with the paillier cipher")
    return make_backend("paillier", load_keypair(keys))


def _load(path):
    from fedgbm.data import load_table

    return None if path is None else load_table(path)


# -- command group --------------------------------------------------------------------

@click.group()
@click.version_option(__version__, prog_name="fedgbm")
def cli():
    """Two-party vertical federated gradient boosting."""
    _setup_logging()


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["csv", "libsvm"]), default=None)
@click.option("--a-features", default=None, help="count or comma-separated column names")
@click.option("--b-features", default=None, help="count or comma-separated column names")
@click.option("--seed", default=0, show_default=True)
@click.option("--out-a", required=True, type=click.Path())
@click.option("--out-b", required=True, type=click.Path())
@click.option("--drop-rate", default=0.0, show_default=True)
@click.option("--test-ratio", default=0.2, show_default=True,
              help="held-out share written to <out>.test.csv (0 disables)")
@click.option("--manifest", type=click.Path(), default=None)
def partition(input_path, fmt, a_features, b_features, seed, out_a, out_b, drop_rate,
              test_ratio, manifest):
    """Split one labelled table into A's and B's views."""
    from fedgbm.data import PartitionSpec, partition_files

    def feats(v):
        if v is None:
            return None
        return int(v) if v.strip().isdigit() else [c.strip() for c in v.split(",") if c.strip()]

    spec = PartitionSpec(feats(a_features), feats(b_features), seed, drop_rate=drop_rate)
    man_path = manifest or Path(out_a).parent / "partition_manifest.json"
    man = partition_files(input_path, out_a, out_b, spec, fmt, test_ratio, seed, man_path)
    for path, info in man.outputs.items():
        click.echo(f"{path}: {info['rows']} rows, {info['columns']} features")


@cli.command()
@click.option("--bits", default=512, show_default=True, type=click.Choice(["512", "1024", "2048"]))
@click.option("--seed", default=None, type=int, help="deterministic keys (tests only)")
@click.option("--out", required=True, type=click.Path(), help="directory for the key files")
def keygen(bits, seed, out):
    """Generate a Paillier key pair for party A."""
    from fedgbm.phe import keygen as make_keys, save_keypair

    kp = make_keys(int(bits), seed)
    pub, priv = save_keypair(kp, out)
    click.echo(f"wrote {pub} and {priv} (key id {kp.public_key.key_id})")


def _session_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True), default=None),
        click.option("--data", required=True, type=click.Path(exists=True)),
        click.option("--test", "test_path", type=click.Path(exists=True), default=None),
        click.option("--strategy", type=click.Choice(STRATEGIES), default=None),
        click.option("--cipher", type=click.Choice(CIPHERS), default="paillier", show_default=True),
        click.option("--insecure-null-cipher", is_flag=True, help="permit --cipher null"),
        click.option("--transcript", is_flag=True, help="record every frame"),
        click.option("--out-dir", required=True, type=click.Path()),
        click.option("--timeout", default=600.0, show_default=True, help="socket timeout (s)"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@cli.command("serve-b")
@click.option("--listen", required=True, help="host:port")
@_session_options
@click.option("--registry", type=click.Path(), default=None, help="file of used session ids")
def serve_b(listen, config_path, data, test_path, strategy, cipher, insecure_null_cipher,
            transcript, out_dir, timeout, registry):
    """Party B: serve one training session."""
    from fedgbm.protocol.channel import TcpChannel, parse_address
    from fedgbm.protocol.handshake import SessionRegistry
    from fedgbm.protocol.training import serve_party_b

    config = load_config(config_path, strategy=strategy)
    if cipher == "null" and not insecure_null_cipher:
        raise ConfigError("the null cipher is insecure and requires --insecure-null-cipher")
    dirs = _layout(out_dir)
    train, test = _load(data), _load(test_path)
    write_manifest(dirs["root"], "serve-b", config, [data, test_path], cipher=cipher)
    host, port = parse_address(listen)
    tpath = dirs["transcripts"] / "party_b.transcript" if transcript else None
    reg = SessionRegistry(registry or dirs["root"] / "sessions.json")
    log.info("listening on %s:%d", host, port)
    with TcpChannel.listen(host, port, tpath, timeout=timeout) as ch:
        res = serve_party_b(ch, train, config, cipher, test, reg, dirs["root"] / "checkpoints")
    write_json_atomic(dirs["models"] / "model_b.json", res.part.to_json())
    click.echo(f"session {res.session_id}: {len(res.intersection)} shared ids, "
               f"{len(res.part.splits)} B-owned splits -> {dirs['models'] / 'model_b.json'}")


@cli.command("train-a")
@click.option("--connect", required=True, help="host:port of party B")
@_session_options
@click.option("--keys", type=click.Path(exists=True), default=None, help="key directory")
@click.option("--resume", is_flag=True, help="continue from the last checkpoint")
@click.option("--no-fallback", is_flag=True, help="skip the A-only fallback model")
def train_a(connect, config_path, data, test_path, strategy, cipher, insecure_null_cipher,
            transcript, out_dir, timeout, keys, resume, no_fallback):
    """Party A: drive one training session against a running serve-b."""
    from fedgbm.protocol.channel import TcpChannel, parse_address
    from fedgbm.protocol.training import train_party_a

    config = load_config(config_path, strategy=strategy)
    backend = _backend(cipher, keys, insecure_null_cipher)
    dirs = _layout(out_dir)
    train, test = _load(data), _load(test_path)
    write_manifest(dirs["root"], "train-a", config, [data, test_path], cipher=cipher,
                   resume=resume)
    host, port = parse_address(connect)
    tpath = dirs["transcripts"] / "party_a.transcript" if transcript else None
    with TcpChannel.connect(host, port, tpath, timeout=timeout) as ch:
        res = train_party_a(ch, train, config, backend, test, dirs["root"] / "checkpoints",
                            resume, not no_fallback)
        sent, recv = ch.counter.bytes_sent, ch.counter.bytes_received
    _write_a_outputs(dirs, res, train.feature_names)
    click.echo(f"session {res.session_id}: {len(res.records)} iterations, "
               f"sent {sent} B, received {recv} B")


def _write_a_outputs(dirs, res, feature_names):
    write_json_atomic(dirs["models"] / "model_a.json",
                      ensemble_to_json(res.ensemble, "A", feature_names))
    if res.fallback is not None:
        write_json_atomic(dirs["models"] / "model_a_only.json",
                          ensemble_to_json(res.fallback, "joined", feature_names))
    emit_run_log(res.records, dirs["logs"] / "runlog.jsonl")


@cli.command()
@click.option("--role", type=click.Choice(["a", "b"]), required=True)
@click.option("--connect", default=None, help="host:port of party B (role a)")
@click.option("--listen", default=None, help="host:port to serve on (role b)")
@click.option("--model-dir", required=True, type=click.Path(exists=True),
              help="the models/ directory of a training run")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="predictions CSV (role a)")
@click.option("--timeout", default=600.0, show_default=True)
def predict(role, connect, listen, model_dir, data, out_path, timeout):
    """Score rows with a trained model; shared ids go through party B."""
    from fedgbm.data import load_table
    from fedgbm.protocol.channel import TcpChannel, parse_address
    from fedgbm.protocol.training import predict_party_a, serve_predictions_b

    ds = load_table(data)
    mdir = Path(model_dir)
    if role == "b":
        if not listen:
            raise ConfigError("role b needs --listen")
        part = BModelPart.from_json(read_json(mdir / "model_b.json"))
        with TcpChannel.listen(*parse_address(listen), timeout=timeout) as ch:
            shared = serve_predictions_b(ch, part, ds)
        click.echo(f"answered routing for {len(shared)} shared ids")
        return
    if not connect:
        raise ConfigError("role a needs --connect")
    obj = read_json(mdir / "model_a.json")
    ens = ensemble_from_json(obj, "A")
    fb_path = mdir / "model_a_only.json"
    fallback = ensemble_from_json(read_json(fb_path)) if fb_path.exists() else None
    with TcpChannel.connect(*parse_address(connect), timeout=timeout) as ch:
        probs, shared = predict_party_a(ch, ens, ds, fallback, obj["topology_hash"])
    out_path = Path(out_path or mdir.parent / "predictions.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        fh.write("id,probability\n")
        for rid, p in zip(ds.ids, probs):
            fh.write(f"{rid.decode()},{p:.17g}\n")
    click.echo(f"{len(shared)} rows via B, {ds.n_samples - len(shared)} via the fallback "
               f"-> {out_path}")


@cli.command()
@click.option("--dataset", default="synthetic", show_default=True,
              help="'synthetic' or a labelled table (csv/libsvm)")
@click.option("--sizes", default="1000,2000,4000,8000,16000", show_default=True,
              help="synthetic sample counts")
@click.option("--grid", default="t=4", show_default=True, help="e.g. t=3,4,5")
@click.option("--batch-fractions", default="1.0", show_default=True)
@click.option("--repeat", default=1, show_default=True)
@click.option("--in-process", is_flag=True, required=True,
              help="run both parties over the loopback channel (required)")
@click.option("--iterations", default=10, show_default=True)
@click.option("--a-features", default=None, type=int)
@click.option("--cipher", type=click.Choice(CIPHERS), default="paillier", show_default=True)
@click.option("--insecure-null-cipher", is_flag=True)
@click.option("--bits", default="512", type=click.Choice(["512", "1024", "2048"]),
              show_default=True)
@click.option("--strategy", type=click.Choice(STRATEGIES), default="phe-aggregate",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
def bench(dataset, sizes, grid, batch_fractions, repeat, in_process, iterations, a_features,
          cipher, insecure_null_cipher, bits, strategy, seed, out_dir):
    """Accuracy, time and payload per configuration; writes logs/bench.csv."""
    from fedgbm.data import load_table, make_synthetic
    from fedgbm.experiments import bench_cell, make_views, write_rows
    from fedgbm.phe import keygen as make_keys, make_backend

    if not in_process:
        raise ConfigError("bench only supports --in-process runs")
    key, _, vals = grid.partition("=")
    if key.strip() != "t" or not vals:
        raise ConfigError("--grid takes the form t=3,4,5")
    ts = [int(v) for v in vals.split(",")]
    bfs = [float(v) for v in batch_fractions.split(",")]
    if cipher == "null":
        backend = make_backend("null", allow_insecure=insecure_null_cipher)
    else:
        backend = make_backend("paillier", make_keys(int(bits), seed))
    dirs = _layout(out_dir)
    if dataset == "synthetic":
        tables = {f"synthetic-{n}": make_synthetic(int(n), 20, seed) for n in sizes.split(",")}
        inputs = []
    else:
        tables = {Path(dataset).name: load_table(dataset)}
        inputs = [dataset]
    rows = []
    for name, ds in tables.items():
        views = make_views(ds, a_features or ds.n_features // 2, seed)
        for t in ts:
            for b in bfs:
                cfg = TrainConfig(iterations=iterations, t=t, batch_fraction=b,
                                  strategy=strategy, seed=seed)
                row = bench_cell(views, cfg, backend, repeat, name)
                rows.append(row)
                click.echo(f"{name} t={t} b={b}: auc={row['test_auc_mean']:.4f} "
                           f"fed={row['fed_s_per_iter_mean']:.3f}s/it "
                           f"slowdown={row['slowdown_mean']:.1f}x "
                           f"bytes/it={row['bytes_per_iter_mean']:.0f}")
    path = write_rows(rows, dirs["logs"] / "bench.csv")
    write_manifest(dirs["root"], "bench", None, inputs, grid=grid, batch_fractions=bfs,
                   repeat=repeat, iterations=iterations, cipher=cipher, bits=int(bits),
                   strategy=strategy, seed=seed, sizes=sizes)
    click.echo(f"results -> {path}")


def _views_from_files(data, data_b, test, test_b):
    from fedgbm.experiments import Views

    a, b = _load(data), _load(data_b)
    return Views(a, b, _load(test), _load(test_b))


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True), help="A's training table")
@click.option("--data-b", type=click.Path(exists=True), default=None,
              help="B's training table (joined mode)")
@click.option("--test", "test_path", type=click.Path(exists=True), default=None)
@click.option("--test-b", type=click.Path(exists=True), default=None)
@click.option("--which", type=click.Choice(["a-only", "joined"]), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out-dir", required=True, type=click.Path())
def baseline(data, data_b, test_path, test_b, which, config_path, out_dir):
    """Plaintext reference models (A-only or joined); same run-log schema."""
    from fedgbm.core.boosting import train_centralized
    from fedgbm.experiments import centralized

    config = load_config(config_path)
    dirs = _layout(out_dir)
    if which == "joined":
        if data_b is None:
            raise ConfigError("joined baseline needs --data-b")
        ens, records, _ = centralized(_views_from_files(data, data_b, test_path, test_b),
                                      config, "joined")
    else:
        ens, records, _ = train_centralized(_load(data), config, test=_load(test_path))
    write_json_atomic(dirs["models"] / f"baseline_{which}.json", ensemble_to_json(ens, "joined"))
    emit_run_log(records, dirs["logs"] / f"baseline_{which}.jsonl")
    write_manifest(dirs["root"], "baseline", config, [data, data_b, test_path, test_b],
                   which=which)
    last = records[-1] if records else None
    if last is not None:
        click.echo(f"{which}: train_auc={last.train_auc:.4f} test_auc={last.test_auc}")


@cli.command("oracle-compare")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--data-b", required=True, type=click.Path(exists=True))
@click.option("--test", "test_path", type=click.Path(exists=True), default=None)
@click.option("--test-b", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--insecure-null-cipher", is_flag=True, required=True)
@click.option("--tolerance", default=1e-9, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
def oracle_compare(data, data_b, test_path, test_b, config_path, insecure_null_cipher,
                   tolerance, out_dir):
    """Null-cipher federated run against centralized training on joined data."""
    from fedgbm.experiments import oracle_report
    from fedgbm.phe import null_cipher_backend

    config = load_config(config_path)
    backend = null_cipher_backend(insecure_null_cipher)
    dirs = _layout(out_dir)
    report = oracle_report(_views_from_files(data, data_b, test_path, test_b), config,
                           backend, tolerance)
    write_json_atomic(dirs["logs"] / "oracle_report.json", report)
    write_manifest(dirs["root"], "oracle-compare", config, [data, data_b, test_path, test_b])
    click.echo(("MATCH" if report["match"] else "MISMATCH") + " " + json.dumps(report))
    if not report["match"]:
        raise SystemExit(1)


def main(argv=None):
    """Console entry point: maps package errors to the documented exit codes."""
    try:
        cli.main(args=argv, prog_name="fedgbm", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except FedGBMError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
