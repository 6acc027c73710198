"""Plain-file outputs: PGM images, nodal CSV dumps and JSON summaries."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ExportError
from .mesh_fem import Field


def field_image(field: Field, scale: int = 1) -> np.ndarray:
    """8-bit image of a nodal field, one pixel per node (top row is x2 = 1).

    Values are min-max normalized to 0..255 with round-half-up. A constant
    field has no usable range and renders as all zeros.
    """
    vals = field.mesh.grid_values(field.coeffs)[::-1, :]
    lo, hi = float(np.min(vals)), float(np.max(vals))
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        img = np.zeros(vals.shape, dtype=np.uint8)
    else:
        img = np.floor((vals - lo) / (hi - lo) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    return img


def export_field_image(field: Field, path, scale: int = 1) -> Path:
    """Write ``field`` as a binary (P5) PGM file."""
    img = field_image(field, scale)
    rows, cols = img.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(img.tobytes(order="C"))
    except OSError as exc:
        raise ExportError(f"cannot write image {path}: {exc}") from exc
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM file")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def write_field_csv(field: Field, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "value"])
            for (x1, x2), v in zip(field.mesh.nodes, field.coeffs):
                w.writerow([repr(float(x1)), repr(float(x2)), repr(float(v))])
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def write_rows_csv(rows: list, path, columns: list) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            w.writeheader()
            for row in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json(obj, path) -> None:
    try:
        Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc


def result_to_dict(result) -> dict:
    """Deterministic part of an :class:`~podinv.inverse.InverseResult` (timings excluded)."""
    return dict(result.summary(), objective_history=list(map(float, result.objective_history)))
