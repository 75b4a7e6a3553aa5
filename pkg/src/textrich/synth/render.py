"""Integer-only rasterization onto uint8 RGB canvases."""

from __future__ import annotations

import numpy as np

from textrich.synth.font import GLYPH_H, text_mask, text_width

WHITE = 255
INK = 0


def blank(size: int) -> np.ndarray:
    return np.full((size, size, 3), WHITE, dtype=np.uint8)


def ink_bbox(mask: np.ndarray, x: int = 0, y: int = 0):
    """Tight ``(x1, y1, x2, y2)`` of true pixels, end-exclusive, offset by ``(x, y)``."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (x + int(cols[0]), y + int(rows[0]), x + int(cols[-1]) + 1, y + int(rows[-1]) + 1)


def draw_text(canvas: np.ndarray, text: str, x: int, y: int, scale: int = 1, color: int = INK):
    """Stamp ``text`` with its top-left cell corner at ``(x, y)``; returns the ink bbox."""
    mask = text_mask(text, scale)
    h, w = mask.shape
    region = canvas[y:y + h, x:x + w]
    if region.shape[:2] != (h, w):
        raise ValueError(f"text {text!r} at ({x},{y}) leaves the canvas")
    region[mask] = color
    return ink_bbox(mask, x, y)


def fill_rect(canvas: np.ndarray, x1: int, y1: int, x2: int, y2: int, color: int) -> None:
    canvas[y1:y2, x1:x2] = color


def hline(canvas, x1, x2, y, color=INK):
    canvas[y, x1:x2] = color


def vline(canvas, x, y1, y2, color=INK):
    canvas[y1:y2, x] = color


def draw_grid_table(canvas: np.ndarray, cells: list[list[str]], x: int, y: int,
                    cell_w: int = 9, cell_h: int = 10) -> None:
    """Ruled table with single-line cell text inset by 2 px."""
    rows, cols = len(cells), len(cells[0])
    for r in range(rows + 1):
        hline(canvas, x, x + cols * cell_w + 1, y + r * cell_h)
    for c in range(cols + 1):
        vline(canvas, x + c * cell_w, y, y + rows * cell_h + 1)
    for r, row in enumerate(cells):
        for c, text in enumerate(row):
            draw_text(canvas, text, x + c * cell_w + 2, y + r * cell_h + 2)


def grid_table_size(rows: int, cols: int, cell_w: int = 9, cell_h: int = 10) -> tuple[int, int]:
    return cols * cell_w + 1, rows * cell_h + 1


__all__ = ["blank", "ink_bbox", "draw_text", "fill_rect", "hline", "vline", "draw_grid_table",
           "grid_table_size", "text_width", "GLYPH_H"]
