"""Deterministic image-grid assembly for feature overview sheets.

Cells are copied pixel-for-pixel into a row-major grid; optional label
strips are rendered below each cell with PIL's built-in bitmap font.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, ValidationError

LABEL_STRIP_PX = 12
MIN_CELL_PX = 16


@dataclass(frozen=True)
class GridSpec:
    columns: int
    cell_size: int | None = None     # None keeps native cell resolution
    labels: bool = False
    ordering: str = "name"           # inputs pre-sorted by this key

    def validate(self):
        if self.columns < 1:
            raise ConfigError(f"grid columns must be >= 1, got {self.columns}")
        if self.cell_size is not None and self.cell_size < MIN_CELL_PX:
            raise ConfigError(f"grid cell size must be >= {MIN_CELL_PX} px")
        return self


def _prepare_cells(cells: list[np.ndarray], spec: GridSpec) -> list[np.ndarray]:
    out = []
    for cell in cells:
        arr = np.asarray(cell)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValidationError("grid cells must be (H, W, 3) uint8 arrays")
        out.append(arr)
    if spec.cell_size is not None:
        side = spec.cell_size
        out = [
            np.asarray(Image.fromarray(c).resize((side, side), Image.BILINEAR))
            for c in out
        ]
    first = out[0].shape
    if any(c.shape != first for c in out):
        raise ValidationError(
            "grid cells have mixed resolutions; pass a cell size to resize them"
        )
    return out


def render_grid(cells: list[np.ndarray], spec: GridSpec,
                labels: list[str] | None = None) -> np.ndarray:
    """Tile cells row-major into one (H, W, 3) uint8 canvas."""
    spec.validate()
    if not cells:
        raise ValidationError("grid needs at least one cell")
    cells = _prepare_cells(cells, spec)
    ch, cw = cells[0].shape[:2]
    strip = LABEL_STRIP_PX if spec.labels else 0
    cols = spec.columns
    rows = (len(cells) + cols - 1) // cols
    canvas = np.zeros((rows * (ch + strip), cols * cw, 3), dtype=np.uint8)
    for idx, cell in enumerate(cells):
        r, c = divmod(idx, cols)
        y, x = r * (ch + strip), c * cw
        canvas[y:y + ch, x:x + cw] = cell
    if spec.labels:
        img = Image.fromarray(canvas)
        draw = ImageDraw.Draw(img)
        texts = labels if labels is not None else [str(i) for i in range(len(cells))]
        for idx, text in enumerate(texts[: len(cells)]):
            r, c = divmod(idx, cols)
            draw.text((c * cw + 2, r * (ch + strip) + ch + 1),
                      text[: cw // 6], fill=(255, 255, 255))
        canvas = np.asarray(img)
    return canvas


def save_grid(path, cells, spec: GridSpec, labels=None):
    Image.fromarray(render_grid(cells, spec, labels), mode="RGB").save(path, format="PNG")
