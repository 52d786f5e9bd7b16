"""CSV and JSON persistence for collections, flows and reports.

Numbers are written with 17 significant digits so that every float64
round-trips exactly.  Each CSV has a JSON header sidecar (``<name>.json``)
holding the label grid, the seed and free-form provenance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .measure_space import EmpiricalMeasure, LabelGrid, MeasureCollection, MeasureFlow

FLOAT_FORMAT = "%.17g"


def _fmt(v) -> str:
    return FLOAT_FORMAT % v


def to_jsonable(obj):
    """Convert numpy scalars/arrays and dataclasses into plain JSON types."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def _write_header(path, grid: LabelGrid, dim: int, kind: str, seed, provenance, extra=None):
    header = {"kind": kind, "grid": grid.to_dict(), "dim": dim, "seed": seed, "provenance": provenance or {}}
    header.update(extra or {})
    write_json(sidecar(path), header)


def write_collection_csv(path, mu: MeasureCollection, *, seed: Optional[int] = None,
                         provenance: Optional[dict] = None) -> Path:
    """Rows ``label_index, atom_index, weight, x_1..x_d``."""
    path = Path(path)
    d = mu.dim
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_index", "atom_index", "weight"] + [f"x_{i + 1}" for i in range(d)])
        for k, m in enumerate(mu.measures):
            for i in range(m.size):
                w.writerow([k, i, _fmt(m.weights[i])] + [_fmt(v) for v in m.atoms[i]])
    _write_header(path, mu.grid, d, "collection", seed, provenance)
    return path


def _read_header(path) -> dict:
    return json.loads(sidecar(path).read_text())


def read_collection_csv(path) -> MeasureCollection:
    path = Path(path)
    header = _read_header(path)
    grid = LabelGrid(header["grid"]["labels"], header["grid"]["weights"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    measures = []
    for k in range(len(grid)):
        rows = data[data[:, 0] == k]
        rows = rows[np.argsort(rows[:, 1], kind="stable")]
        measures.append(EmpiricalMeasure(rows[:, 3:], rows[:, 2]))
    return MeasureCollection(grid, tuple(measures))


def write_flow_csv(path, flow: MeasureFlow, *, seed: Optional[int] = None, provenance: Optional[dict] = None) -> Path:
    """Rows ``time_index, time, label_index, atom_index, weight, x_1..x_d``; path-coupled flows keep atom identity."""
    path = Path(path)
    d = flow.snapshot(0).dim
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_index", "time", "label_index", "atom_index", "weight"] + [f"x_{i + 1}" for i in range(d)])
        for j, t in enumerate(flow.times):
            snap = flow.snapshot(j)
            for k, m in enumerate(snap.measures):
                for i in range(m.size):
                    w.writerow([j, _fmt(t), k, i, _fmt(m.weights[i])] + [_fmt(v) for v in m.atoms[i]])
    _write_header(path, flow.grid, d, "flow", seed, provenance, {"path_coupled": flow.path_coupled})
    return path


def read_flow_csv(path) -> MeasureFlow:
    path = Path(path)
    header = _read_header(path)
    grid = LabelGrid(header["grid"]["labels"], header["grid"]["weights"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_times = int(data[:, 0].max()) + 1
    times = np.array([data[data[:, 0] == j][0, 1] for j in range(n_times)])
    snaps = []
    for j in range(n_times):
        block = data[data[:, 0] == j]
        measures = []
        for k in range(len(grid)):
            rows = block[block[:, 2] == k]
            rows = rows[np.argsort(rows[:, 3], kind="stable")]
            measures.append(EmpiricalMeasure(rows[:, 5:], rows[:, 4]))
        snaps.append(MeasureCollection(grid, tuple(measures)))
    if header.get("path_coupled"):
        paths = np.stack([np.stack([m.atoms for m in s.measures]) for s in snaps])
        weights = np.stack([m.weights for m in snaps[0].measures])
        return MeasureFlow(grid, times, paths=paths, weights=weights)
    return MeasureFlow(grid, times, snapshots=tuple(snaps))


def write_table_csv(path, header: list, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
