"""Confidence-map exporters: CSV (raw values) and 16-bit ASCII PGM (min-max normalized)."""

from __future__ import annotations

import re

import numpy as np

PGM_MAXVAL = 65535
_RANGE_RE = re.compile(r"#\s*min=(\S+)\s+max=(\S+)")


def write_csv(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in grid:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        rows = [[float(x) for x in line.split(",")] for line in f if line.strip()]
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: ragged CSV rows")
    return np.array(rows, dtype=np.float64)


def quantize(grid: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Map to integers in [0, 65535]; a constant map becomes all zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.zeros(grid.shape, dtype=np.int64), lo, hi
    return np.rint((grid - lo) / (hi - lo) * PGM_MAXVAL).astype(np.int64), lo, hi


def write_pgm(path, grid: np.ndarray) -> None:
    pixels, lo, hi = quantize(grid)
    rows, cols = pixels.shape
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("P2\n")
        f.write(f"# min={lo!r} max={hi!r}\n")
        f.write(f"{cols} {rows}\n{PGM_MAXVAL}\n")
        for row in pixels:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def read_pgm(path) -> tuple[np.ndarray, float | None, float | None]:
    """Returns (pixels, min, max); min/max are None when the range comment is missing."""
    lo = hi = None
    tokens: list[str] = []
    with open(path, encoding="ascii") as f:
        for line in f:
            if line.lstrip().startswith("#"):
                m = _RANGE_RE.search(line)
                if m:
                    lo, hi = float(m.group(1)), float(m.group(2))
                continue
            tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (P2) file")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = [int(t) for t in tokens[4:]]
    if len(values) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} pixels, found {len(values)}")
    if any(v < 0 or v > maxval for v in values):
        raise ValueError(f"{path}: pixel outside [0, {maxval}]")
    return np.array(values, dtype=np.int64).reshape(rows, cols), lo, hi


def dequantize(pixels: np.ndarray, lo: float, hi: float, maxval: int = PGM_MAXVAL) -> np.ndarray:
    return lo + pixels.astype(np.float64) / maxval * (hi - lo)
