"""Artifact writers: CSV tables, gnuplot data files, JSON and run manifests.

Complex columns are split into ``name_re`` and ``name_im``.  Floats are
written with repr so that identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import datetime
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .errors import IoError


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def expand_columns(columns: Mapping[str, Sequence]) -> Dict[str, list]:
    """Split complex-valued columns into re/im pairs; all columns must have equal length."""
    out: Dict[str, list] = {}
    lengths = set()
    for name, values in columns.items():
        values = list(values)
        lengths.add(len(values))
        if any(isinstance(v, (complex, np.complexfloating)) for v in values):
            out[f"{name}_re"] = [complex(v).real for v in values]
            out[f"{name}_im"] = [complex(v).imag for v in values]
        else:
            out[name] = values
    if len(lengths) > 1:
        raise ValueError(f"columns have different lengths: {sorted(lengths)}")
    return out


def write_csv(path, columns: Mapping[str, Sequence]) -> Path:
    cols = expand_columns(columns)
    path = Path(path)
    n = len(next(iter(cols.values()))) if cols else 0
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(cols))
            for i in range(n):
                w.writerow([_fmt(v[i]) for v in cols.values()])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path


def write_dat(path, columns: Mapping[str, Sequence]) -> Path:
    """Whitespace-separated variant with a '#' header line, readable by gnuplot."""
    cols = expand_columns(columns)
    path = Path(path)
    n = len(next(iter(cols.values()))) if cols else 0
    lines = ["# " + " ".join(cols)]
    for i in range(n):
        lines.append(" ".join(_fmt(v[i]) if v[i] is not None else "nan" for v in cols.values()))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path


def write_table(directory, stem: str, columns: Mapping[str, Sequence]) -> List[Path]:
    d = Path(directory)
    return [write_csv(d / f"{stem}.csv", columns), write_dat(d / f"{stem}.dat", columns)]


def read_csv(path) -> Dict[str, np.ndarray]:
    """Columns of a CSV written by write_csv, with re/im pairs merged back."""
    try:
        with Path(path).open() as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None
    header, body = rows[0], rows[1:]
    raw = {h: [r[i] for r in body] for i, h in enumerate(header)}
    out: Dict[str, np.ndarray] = {}
    for h, vals in raw.items():
        if h.endswith("_im") and h[:-3] + "_re" in raw:
            continue
        if h.endswith("_re") and h[:-3] + "_im" in raw:
            base = h[:-3]
            re = np.array(vals, dtype=float)
            im = np.array(raw[base + "_im"], dtype=float)
            out[base] = re + 1j * im
            continue
        try:
            out[h] = np.array([float(v) if v != "" else math.nan for v in vals])
        except ValueError:
            out[h] = np.array(vals, dtype=object)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (complex, np.complexfloating)):
        return [float(x.real), float(x.imag)]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if hasattr(x, "value") and hasattr(x, "name"):  # enums
        return x.value
    return x


def write_json(path, payload) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise IoError(f"{path} is not valid JSON: {exc.msg}") from None


def write_manifest(directory, command: str, config: Mapping, files: Iterable, results: Mapping,
                   status: str = "ok", extra: Optional[Mapping] = None) -> Path:
    """Manifest listing inputs, tolerances and produced files.  The timestamp is
    the only field that differs between identical runs."""
    d = Path(directory)
    payload = {
        "command": command,
        "status": status,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "config": dict(config),
        "tolerances": dict(config.get("tolerances", {})),
        "files": sorted(Path(f).name for f in files),
        "results": dict(results),
    }
    if extra:
        payload.update(extra)
    return write_json(d / "manifest.json", payload)


def orbit_columns(records: Sequence[Mapping]) -> Dict[str, list]:
    keys = ["eps", "kind", "amplitude", "mu", "T", "converged", "return_residual", "traveling_speed",
            "shift_residual"]
    cols: Dict[str, list] = {k: [] for k in keys}
    cols["a1"] = []
    cols["a2"] = []
    for r in records:
        for k in keys:
            cols[k].append(r.get(k))
        cols["a1"].append(complex(*r["a1"]))
        cols["a2"].append(complex(*r["a2"]))
    return cols


def write_outputs(records: Sequence[Mapping], directory, stem: str = "orbits") -> Dict[str, object]:
    """Orbit records as JSON plus CSV/dat tables; returns a file summary for the manifest."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {d}: {exc.strerror}") from None
    files = [write_json(d / f"{stem}.json", list(records))]
    if records:
        files += write_table(d, stem, orbit_columns(records))
    else:
        files += write_table(d, stem, {"eps": [], "kind": [], "amplitude": []})
    return {"files": [str(f) for f in files], "count": len(records)}
