"""File formats.

Dataset files are comma-separated text::

    # mnarssl-dataset v1 d=<d> K=<K>
    x1,...,xd,label,r
    0.25,-1.5,2,1
    0.75,0.125,NA,0

Labels are 1-based on disk and 0-based in memory; ``NA`` marks a missing
label. Floats are written with ``repr`` so they read back bit-exactly.

Ground truth, checkpoints and reports are JSON with sorted keys, and
per-epoch curves are flat CSV tables.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Union

import numpy as np

from .core import MISSING, Dataset, SealedLabels, ValidationError, validate
from .model import ModelParams

PathLike = Union[str, Path]
DATASET_MAGIC = "# mnarssl-dataset v1"
NA = "NA"


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(path: PathLike, dataset: Dataset) -> None:
    d, K = dataset.dim, dataset.n_classes
    lines = [f"{DATASET_MAGIC} d={d} K={K}",
             ",".join([f"x{j + 1}" for j in range(d)] + ["label", "r"])]
    for x, y, r in zip(dataset.features, dataset.labels, dataset.indicator):
        lab = NA if y == MISSING else str(int(y) + 1)
        lines.append(",".join([_fmt(v) for v in x] + [lab, str(int(r))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: PathLike, check: bool = True) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(DATASET_MAGIC):
        raise ValidationError(f"{path}: missing dataset header")
    try:
        meta = dict(tok.split("=") for tok in text[0][len(DATASET_MAGIC):].split())
        d, K = int(meta["d"]), int(meta["K"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed header {text[0]!r}") from exc
    rows = [ln.split(",") for ln in text[2:] if ln.strip()]
    X = np.empty((len(rows), d))
    y = np.empty(len(rows), dtype=np.int64)
    r = np.empty(len(rows), dtype=np.int8)
    for i, row in enumerate(rows):
        if len(row) != d + 2:
            raise ValidationError(f"{path}: row {i} has {len(row)} columns, expected {d + 2}")
        try:
            X[i] = [float(v) for v in row[:d]]
            y[i] = MISSING if row[d] == NA else int(row[d]) - 1
            r[i] = int(row[d + 1])
        except ValueError as exc:
            raise ValidationError(f"{path}: cannot parse row {i}") from exc
    ds = Dataset(X, y, r, K)
    if check:
        validate(ds)
    return ds


def write_truth(path: PathLike, truth: SealedLabels) -> None:
    obj = {
        "format": "mnarssl-truth",
        "version": 1,
        "labels": [int(v) + 1 for v in truth.reveal()],
        "phi_star": None if truth.phi_star is None else truth.phi_star.tolist(),
    }
    write_json(path, obj)


def read_truth(path: PathLike) -> SealedLabels:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != "mnarssl-truth":
        raise ValidationError(f"{path}: not a ground-truth file")
    phi = obj.get("phi_star")
    return SealedLabels(np.asarray(obj["labels"], dtype=np.int64) - 1,
                        None if phi is None else np.asarray(phi))


def write_theta(path: PathLike, theta: ModelParams) -> None:
    write_json(path, {
        "format": "mnarssl-theta",
        "version": 1,
        "arch": theta.arch,
        "arrays": [{"shape": list(a.shape), "values": a.ravel().tolist()} for a in theta.arrays],
    })


def read_theta(path: PathLike) -> ModelParams:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != "mnarssl-theta" or obj.get("version") != 1:
        raise ValidationError(f"{path}: not a version-1 checkpoint")
    arrays = tuple(np.asarray(a["values"], dtype=np.float64).reshape(a["shape"]) for a in obj["arrays"])
    return ModelParams(obj["arch"], arrays)


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: PathLike, obj: Any) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def write_table(path: PathLike, rows: Iterable[Mapping[str, Any]], delimiter: str = ",") -> None:
    rows = [_plain(r) for r in rows]
    cols: List[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, delimiter=delimiter, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})


def read_table(path: PathLike, delimiter: str = ",") -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter=delimiter))


def write_trace(path: PathLike, trace) -> None:
    """Tab-separated MLE trace: epoch, nll, residual, phi_1..phi_K."""
    rows = []
    for t in trace:
        row = {"epoch": t.epoch, "nll": t.nll, "residual": t.residual}
        row.update({f"phi_{k + 1}": v for k, v in enumerate(t.phi)})
        rows.append(row)
    write_table(path, rows, delimiter="\t")
