"""
Image grid emission.

Pixels map from [-1, 1] to ``floor((x + 1) * 127.5 + 0.5)`` clipped to
[0, 255], so 0 renders as 128. Grids have no padding.
"""

import logging
import os
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from rcdmkit.exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) in [-1, 1] to (N, H, W, C) uint8."""
    array = images.detach().cpu().double().numpy()
    pixels = np.floor((array + 1.0) * 127.5 + 0.5)
    return np.clip(pixels, 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


def default_layout(count: int, cols: int = 8) -> Tuple[int, int]:
    cols = max(1, min(cols, count))
    return (count + cols - 1) // cols, cols


def emit_grid(
    images: torch.Tensor, layout: Sequence[int], path: Union[str, Path]
) -> Path:
    """Write a batch as one row-major PNG grid.

    Args:
        images: Batch (N, C, H, W) with C in {1, 3}
        layout: (rows, cols); ``rows * cols`` must be at least N
        path: Output file

    Returns:
        Path: The written file
    """
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ShapeMismatchError(
            f"expected (N, 1|3, H, W) images, got {tuple(images.shape)}"
        )
    rows, cols = (int(v) for v in layout)
    count = images.shape[0]
    if rows < 1 or cols < 1 or rows * cols < count:
        raise ConfigurationError(f"layout {rows}x{cols} cannot hold {count} images")

    tiles = to_uint8(images)
    _, h, w, c = tiles.shape
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, col = divmod(i, cols)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = tile

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(canvas[..., 0] if c == 1 else canvas)
    tmp = path.with_name(path.name + ".tmp")
    image.save(tmp, format="PNG")
    os.replace(tmp, path)
    logger.debug(f"Wrote {rows}x{cols} grid of {count} images to {path}")
    return path


def emit_rows(rows: Sequence[torch.Tensor], path: Union[str, Path]) -> Path:
    """Stack equally long batches as grid rows."""
    if not rows:
        raise ConfigurationError("no rows to render")
    cols = max(r.shape[0] for r in rows)
    tiles = []
    for row in rows:
        pad = cols - row.shape[0]
        if pad:
            row = torch.cat([row, -torch.ones((pad, *row.shape[1:]), dtype=row.dtype)])
        tiles.append(row)
    return emit_grid(torch.cat(tiles), (len(rows), cols), path)
