"""Indicator-type source fields: disks, letters and user bitmaps."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AssetNotFoundError, InvalidArgumentError
from .mesh_fem import Field, Mesh

LETTER_REGION = (0.1, 0.1, 0.9, 0.9)


@dataclass(frozen=True)
class SourceSpec:
    """Declarative description of a source; see :func:`make_source`."""

    kind: str
    letter: Optional[str] = None
    center: Optional[tuple] = None
    radius: Optional[float] = None
    bitmap: Optional[np.ndarray] = None
    region: tuple = (0.0, 0.0, 1.0, 1.0)
    amplitude: float = 1.0

    def label(self) -> str:
        if self.kind == "letter":
            return self.letter
        if self.kind == "circle":
            return f"circle({self.center[0]:.4g},{self.center[1]:.4g},{self.radius:.4g})"
        return "bitmap"


def parse_bitmap(lines: Sequence[str]) -> np.ndarray:
    rows = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise InvalidArgumentError("bitmap has no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows) or any(set(r) - {"0", "1"} for r in rows):
        raise InvalidArgumentError("bitmap rows must be equal-length strings of '0' and '1'")
    return np.array([[ch == "1" for ch in r] for r in rows], dtype=np.uint8)


def read_bitmap(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise AssetNotFoundError(f"bitmap file not found: {p}")
    return parse_bitmap(p.read_text().splitlines())


def parse_glyph_file(text: str) -> dict:
    glyphs, name, rows = {}, None, []
    for ln in text.splitlines():
        s = ln.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("[") and s.endswith("]"):
            if name is not None:
                glyphs[name] = parse_bitmap(rows)
            name, rows = s[1:-1], []
        else:
            rows.append(s)
    if name is not None:
        glyphs[name] = parse_bitmap(rows)
    return glyphs


@lru_cache(maxsize=None)
def _shipped_glyphs() -> dict:
    try:
        text = resources.files("podinv").joinpath("assets/glyphs.txt").read_text()
    except FileNotFoundError as exc:
        raise AssetNotFoundError("shipped glyph set assets/glyphs.txt is missing") from exc
    return parse_glyph_file(text)


def load_glyphs(path=None) -> dict:
    """Map from letter to its 16x16 ``uint8`` bitmap (row 0 = top)."""
    if path is None:
        return dict(_shipped_glyphs())
    p = Path(path)
    if not p.is_file():
        raise AssetNotFoundError(f"glyph file not found: {p}")
    return parse_glyph_file(p.read_text())


def bitmap_source(grid: np.ndarray, region, mesh: Mesh, amplitude: float = 1.0) -> Field:
    """Nearest-pixel sampling of ``grid`` stretched over ``region = (x1_lo, x2_lo, x1_hi, x2_hi)``.

    Row 0 of the bitmap is the top edge of the region. Nodes outside the region
    get zero.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise InvalidArgumentError("bitmap must be a non-empty 2D array")
    x_lo, y_lo, x_hi, y_hi = map(float, region)
    if not (0.0 <= x_lo < x_hi <= 1.0 and 0.0 <= y_lo < y_hi <= 1.0):
        raise InvalidArgumentError(f"region {region} is not a box inside [0, 1]^2")
    rows, cols = grid.shape
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    inside = (x >= x_lo) & (x <= x_hi) & (y >= y_lo) & (y <= y_hi)
    c = np.clip(np.floor((x - x_lo) / (x_hi - x_lo) * cols).astype(int), 0, cols - 1)
    r = np.clip(np.floor((y_hi - y) / (y_hi - y_lo) * rows).astype(int), 0, rows - 1)
    vals = np.where(inside, grid[r, c] != 0, False).astype(float) * amplitude
    return Field(vals, mesh)


def letter_source(letter: str, mesh: Mesh, amplitude: float = 1.0, glyphs: Optional[dict] = None) -> Field:
    """Indicator of a capital letter drawn over [0.1, 0.9]^2."""
    table = glyphs if glyphs is not None else _shipped_glyphs()
    if not isinstance(letter, str) or letter not in table:
        raise InvalidArgumentError(f"no glyph for {letter!r}; available: {''.join(sorted(table))}")
    return bitmap_source(table[letter], LETTER_REGION, mesh, amplitude)


def circle_source(center, radius: float, mesh: Mesh, amplitude: float = 1.0) -> Field:
    """Nodal indicator of the closed disk ``|x - center| <= radius``."""
    if radius <= 0:
        raise InvalidArgumentError("radius must be positive")
    cx, cy = center
    d2 = (mesh.nodes[:, 0] - cx) ** 2 + (mesh.nodes[:, 1] - cy) ** 2
    # small slack so that nodes exactly on the circle are counted despite rounding
    return Field((d2 <= radius**2 * (1 + 1e-12)).astype(float) * amplitude, mesh)


def line_circle_center(s: float) -> tuple:
    """Centre of the horizontally moving disk family."""
    return (float(s), 0.5)


def ring_circle_center(theta: float) -> tuple:
    """Centre of the disk family moving along the ring of radius 1/4."""
    return (0.5 + np.cos(theta) / 4.0, 0.5 + np.sin(theta) / 4.0)


def make_source(spec: SourceSpec, mesh: Mesh) -> Field:
    if spec.kind == "letter":
        return letter_source(spec.letter, mesh, spec.amplitude)
    if spec.kind == "circle":
        return circle_source(spec.center, spec.radius, mesh, spec.amplitude)
    if spec.kind == "bitmap":
        return bitmap_source(spec.bitmap, spec.region, mesh, spec.amplitude)
    raise InvalidArgumentError(f"unknown source kind {spec.kind!r}")


def parse_source(token: str) -> SourceSpec:
    """Parse the compact source notation used in configuration files.

    ``A`` or ``letter:A``; ``circle:x1,x2,r``; ``line:s`` (radius 0.1 disk at
    ``(s, 0.5)``); ``ring:theta`` (radius 0.1 disk on the ring); ``bitmap:path``.
    """
    tok = token.strip()
    kind, _, arg = tok.partition(":")
    if not arg:
        kind, arg = "letter", tok
    kind = kind.lower()
    try:
        if kind == "letter":
            return SourceSpec(kind="letter", letter=arg)
        if kind == "circle":
            x1, x2, r = (float(v) for v in arg.split(","))
            return SourceSpec(kind="circle", center=(x1, x2), radius=r)
        if kind == "line":
            return SourceSpec(kind="circle", center=line_circle_center(float(arg)), radius=0.1)
        if kind == "ring":
            return SourceSpec(kind="circle", center=ring_circle_center(float(arg)), radius=0.1)
        if kind == "bitmap":
            return SourceSpec(kind="bitmap", bitmap=read_bitmap(arg))
    except ValueError as exc:
        raise InvalidArgumentError(f"cannot parse source {token!r}: {exc}") from exc
    raise InvalidArgumentError(f"unknown source kind in {token!r}")
