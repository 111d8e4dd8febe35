#!/usr/bin/env python3
"""Convert the raw UCI Adult census file into the 123-column binary a9a shape.

Categorical columns are one-hot encoded over their documented levels (an
unknown ``?`` leaves the whole group at zero). Continuous columns become
one-hot quantile bins: five each for age, fnlwgt, education-num and
hours-per-week, zero/non-zero for capital-gain and capital-loss.

    python3 scripts/make_a9a.py --source adult.data --out data/adult_a9a.libsvm.gz

``--source`` may also point at a wheel or zip archive that contains
``adult.data`` somewhere inside it.
"""
from __future__ import annotations

import argparse
import csv
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

LEVELS = {
    "workclass": "Private Self-emp-not-inc Self-emp-inc Federal-gov Local-gov State-gov "
                 "Without-pay Never-worked",
    "education": "Bachelors Some-college 11th HS-grad Prof-school Assoc-acdm Assoc-voc 9th "
                 "7th-8th 12th Masters 1st-4th 10th Doctorate 5th-6th Preschool",
    "marital-status": "Married-civ-spouse Divorced Never-married Separated Widowed "
                      "Married-spouse-absent Married-AF-spouse",
    "occupation": "Tech-support Craft-repair Other-service Sales Exec-managerial "
                  "Prof-specialty Handlers-cleaners Machine-op-inspct Adm-clerical "
                  "Farming-fishing Transport-moving Priv-house-serv Protective-serv Armed-Forces",
    "relationship": "Wife Own-child Husband Not-in-family Other-relative Unmarried",
    "race": "White Asian-Pac-Islander Amer-Indian-Eskimo Other Black",
    "sex": "Female Male",
    "native-country": "United-States Cambodia England Puerto-Rico Canada Germany "
                      "Outlying-US(Guam-USVI-etc) India Japan Greece South China Cuba Iran "
                      "Honduras Philippines Italy Poland Jamaica Vietnam Mexico Portugal Ireland "
                      "France Dominican-Republic Laos Ecuador Taiwan Haiti Columbia Hungary "
                      "Guatemala Nicaragua Scotland Thailand Yugoslavia El-Salvador "
                      "Trinadad&Tobago Peru Hong Holand-Netherlands",
}
COLUMNS = ["age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
           "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
           "hours-per-week", "native-country"]
QUANTILE = {"age": 5, "fnlwgt": 5, "education-num": 5, "hours-per-week": 5}


def read_source(path: Path) -> str:
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as z:
            names = [n for n in z.namelist() if n.endswith("adult.data")]
            if not names:
                raise SystemExit(f"{path} does not contain adult.data")
            return z.read(names[0]).decode()
    return path.read_text()


def parse(text: str):
    rows = []
    for rec in csv.reader(io.StringIO(text), skipinitialspace=True):
        if len(rec) != 15:
            continue
        rows.append(rec)
    return rows


def encode(rows):
    """Return (labels, list of 1-based active indices per row, width)."""
    cols = {c: [r[i] for r in rows] for i, c in enumerate(COLUMNS)}
    blocks = []  # per column: function value -> local index or None, and block width
    for c in COLUMNS:
        if c in LEVELS:
            levels = LEVELS[c].split()
            pos = {v: i for i, v in enumerate(levels)}
            blocks.append((lambda v, pos=pos: pos.get(v), len(levels)))
        elif c in QUANTILE:
            x = np.array(cols[c], dtype=np.float64)
            q = QUANTILE[c]
            cuts = np.unique(np.quantile(x, np.arange(1, q) / q))
            # tied quantiles leave some bins empty; the block keeps its width
            blocks.append((lambda v, cuts=cuts: int(np.searchsorted(cuts, float(v), "right")), q))
        else:
            blocks.append((lambda v: int(float(v) > 0), 2))
    width = sum(w for _, w in blocks)
    labels, active = [], []
    for r in rows:
        labels.append(1 if r[14].rstrip(".") == ">50K" else -1)
        idx, base = [], 0
        for (fn, w), v in zip(blocks, r[:14]):
            j = fn(v)
            if j is not None:
                idx.append(base + j + 1)
            base += w
        active.append(idx)
    return labels, active, width


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("data/adult_a9a.libsvm.gz"))
    args = ap.parse_args(argv)
    labels, active, width = encode(parse(read_source(args.source)))
    lines = [" ".join([f"{y:+d}"] + [f"{j}:1" for j in idx]) for y, idx in zip(labels, active)]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archive byte-reproducible
    with open(args.out, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
        gz.write(("\n".join(lines) + "\n").encode())
    print(f"{len(lines)} rows, {width} features -> {args.out}")


if __name__ == "__main__":
    main()
