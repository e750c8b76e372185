"""Output file formats: trajectories, parameter JSON, posterior samples."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from .engine import Trajectories
from .observation import SCHEMA_LINE

SCHEMA_VERSION = 1


class FormatError(ValueError):
    pass


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> None:
    """Deterministic JSON (sorted keys) with a ``schema_version`` entry."""
    doc = dict(_clean(obj))
    doc.setdefault("schema_version", SCHEMA_VERSION)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return doc


def _num(v) -> str:
    return repr(float(v))


def write_trajectories(path, traj: Trajectories, pi: np.ndarray) -> None:
    """One row per (region, grid time)."""
    facility = traj.art_count @ pi
    cols = (traj.rho, traj.alpha, traj.lam, traj.art_count, facility, traj.N)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "time", "rho", "alpha", "lambda", "art_resident", "art_facility", "N"])
        for j, rid in enumerate(traj.region_ids):
            for k, t in enumerate(traj.times):
                w.writerow([rid, f"{t:.6f}"] + [_num(c[k, j]) for c in cols])


_SITE_RE = re.compile(r"^z_delta\[(.+)\]$")


def site_ids_from_names(names) -> list[str]:
    return [m.group(1) for m in map(_SITE_RE.match, names) if m]


def parameters_from_json(doc: dict, layout) -> np.ndarray:
    """Pack a ``{"parameters": {name: value}}`` document in layout order."""
    params = doc.get("parameters")
    if not isinstance(params, dict):
        raise FormatError("parameter file needs a 'parameters' mapping")
    names = layout.names()
    missing = [n for n in names if n not in params]
    extra = sorted(set(params) - set(names))
    if missing or extra:
        raise FormatError(f"parameter names do not match the model: missing {missing[:5]}, unexpected {extra[:5]}")
    try:
        return np.array([float(params[n]) for n in names])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"non-numeric parameter value: {exc}") from exc


def write_samples(path, draws: np.ndarray, names) -> None:
    """``chain,iteration,<names>`` with exactly round-tripping float text."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", *names])
        for c in range(draws.shape[0]):
            for i in range(draws.shape[1]):
                w.writerow([c, i] + [repr(float(v)) for v in draws[c, i]])


def read_samples(path):
    """Returns ``(draws (chains, iters, dim), names)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0][:2] != ["chain", "iteration"]:
        raise FormatError(f"{path}: expected a 'chain,iteration,...' header")
    names = rows[0][2:]
    body = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, len(names) + 2))
    chains = np.unique(body[:, 0]).astype(int)
    per = [body[body[:, 0] == c] for c in chains]
    n = min(len(p) for p in per) if per else 0
    if any(len(p) != n for p in per):
        raise FormatError(f"{path}: chains have different lengths")
    draws = np.stack([p[np.argsort(p[:, 1], kind="stable")][:, 2:] for p in per]) if per else np.zeros((0, 0, len(names)))
    return draws, names
