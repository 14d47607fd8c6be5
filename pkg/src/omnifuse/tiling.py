"""Any-resolution handling: grid planning, tile splitting and the visual token layout.

The planner scores every grid with ``rows * cols <= max_tiles`` by

1. the padded fraction of the grid canvas after aspect-preserving scale-to-fit
   (at the exact scale, before pixel rounding),
2. the downscale factor (``1/scale`` if the image has to shrink, else 1),
3. the tile count,
4. ``|cols - rows|``,

and keeps the lexicographic minimum. All scores are exact rationals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .imaging import check_image, fit_size, resize_bilinear
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TileLayout:
    grid_rows: int
    grid_cols: int
    scaled_w: int
    scaled_h: int
    pad_right: int
    pad_bottom: int
    tile_res: int
    source_w: int = 0
    source_h: int = 0

    @property
    def num_tiles(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def canvas(self) -> tuple[int, int]:
        return self.grid_cols * self.tile_res, self.grid_rows * self.tile_res

    def describe(self) -> str:
        return f"{self.grid_rows}x{self.grid_cols} pad {self.pad_right},{self.pad_bottom}"


def grid_score(w: int, h: int, rows: int, cols: int, tile_res: int) -> tuple:
    canvas_w, canvas_h = cols * tile_res, rows * tile_res
    # Padding measured at the exact scale so pixel rounding never decides a tie.
    if canvas_w * h <= canvas_h * w:
        pad_fraction = 1 - Fraction(h * canvas_w, w * canvas_h)
    else:
        pad_fraction = 1 - Fraction(w * canvas_h, h * canvas_w)
    downscale = max(Fraction(1), Fraction(w, canvas_w), Fraction(h, canvas_h))
    return pad_fraction, downscale, rows * cols, abs(cols - rows)


def plan_grid(w: int, h: int, tile_res: int, max_tiles: int) -> TileLayout:
    """Choose the grid for a ``w x h`` image.

    Degenerate input (a side or ``max_tiles`` below 1) is clamped to a
    single 1x1 tile and logged.
    """
    if w < 1 or h < 1 or max_tiles < 1:
        log.warning("degenerate plan_grid input (w=%s, h=%s, max_tiles=%s) clamped to 1x1",
                    w, h, max_tiles)
        max_tiles = 1
    w, h, max_tiles = max(1, int(w)), max(1, int(h)), int(max_tiles)
    if tile_res < 1:
        raise ShapeError(f"tile_res must be positive, got {tile_res}")
    best, best_key = (1, 1), None
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles // rows + 1):
            key = grid_score(w, h, rows, cols, tile_res)
            if best_key is None or key < best_key:
                best, best_key = (rows, cols), key
    rows, cols = best
    sw, sh = fit_size(w, h, cols * tile_res, rows * tile_res)
    return TileLayout(rows, cols, sw, sh, cols * tile_res - sw, rows * tile_res - sh,
                      tile_res, w, h)


@dataclass
class TileBatch:
    overview: np.ndarray
    tiles: list[np.ndarray]
    layout: TileLayout


def padded_canvas(img: np.ndarray, layout: TileLayout) -> np.ndarray:
    """The image scaled to the layout and zero-padded bottom/right."""
    img = check_image(img)
    _, h, w = img.shape
    if layout.source_w and (layout.source_w, layout.source_h) != (w, h):
        raise ContractError(
            f"layout was planned for {layout.source_w}x{layout.source_h}, image is {w}x{h}"
        )
    if fit_size(w, h, *layout.canvas) != (layout.scaled_w, layout.scaled_h):
        raise ContractError(f"layout {layout.describe()} does not fit a {w}x{h} image")
    canvas_w, canvas_h = layout.canvas
    canvas = np.zeros((3, canvas_h, canvas_w))
    canvas[:, :layout.scaled_h, :layout.scaled_w] = resize_bilinear(img, layout.scaled_h,
                                                                    layout.scaled_w)
    return canvas


def split(img: np.ndarray, layout: TileLayout) -> TileBatch:
    """Cut the padded canvas into row-major tiles and keep a whole-image overview."""
    canvas = padded_canvas(img, layout)
    r = layout.tile_res
    tiles = [
        canvas[:, i * r:(i + 1) * r, j * r:(j + 1) * r].copy()
        for i in range(layout.grid_rows)
        for j in range(layout.grid_cols)
    ]
    overview = resize_bilinear(img, r, r)
    return TileBatch(overview, tiles, layout)


def stitch(tiles: Sequence[np.ndarray], layout: TileLayout) -> np.ndarray:
    """Inverse of the tile cut: reassemble the padded canvas."""
    if len(tiles) != layout.num_tiles:
        raise ContractError(f"expected {layout.num_tiles} tiles, got {len(tiles)}")
    rows = [
        np.concatenate(tiles[i * layout.grid_cols:(i + 1) * layout.grid_cols], axis=2)
        for i in range(layout.grid_rows)
    ]
    return np.concatenate(rows, axis=1)


def assemble_visual_sequence(overview_tokens: Tensor, tile_tokens: Sequence[Tensor]) -> Tensor:
    """Overview tokens first, then each tile's tokens in row-major order."""
    width = overview_tokens.shape[-1]
    for t in tile_tokens:
        if t.shape[-1] != width:
            raise ShapeError(f"tile tokens width {t.shape[-1]} != overview width {width}")
    if not tile_tokens:
        return overview_tokens
    return T.concat([overview_tokens, *tile_tokens], axis=-2)


def default_max_tiles(seq_len: int, tokens_per_tile: int, text_reserve: int = 512) -> int:
    """Largest tile count whose tiles + overview + boundary tokens fit the budget."""
    return max(0, (seq_len - text_reserve - 2) // tokens_per_tile - 1)


def visual_token_budget(num_tiles: int, tokens_per_tile: int) -> int:
    return (num_tiles + 1) * tokens_per_tile
