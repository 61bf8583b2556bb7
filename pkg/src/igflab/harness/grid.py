"""Side-by-side image grids: original and reconstruction in adjacent columns."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def grid_array(originals, reconstructions, pairs_per_row: int = 8, pad: int = 2) -> np.ndarray:
    """Tile pairs so that column 2j holds an original and column 2j+1 its
    reconstruction.  Returns uint8 (H, W) or (H, W, 3)."""
    a = np.asarray(originals, dtype=np.float32)
    b = np.asarray(reconstructions, dtype=np.float32)
    if len(a) == 0:
        raise ValueError("nothing to draw")
    if a.shape != b.shape:
        raise ValueError(f"originals {a.shape} and reconstructions {b.shape} differ")
    n, c, h, w = a.shape
    per_row = min(pairs_per_row, n)
    rows = -(-n // per_row)
    canvas = np.ones((c, rows * (h + pad) + pad, 2 * per_row * (w + pad) + pad), dtype=np.float32)
    for i in range(n):
        r, j = divmod(i, per_row)
        top = pad + r * (h + pad)
        for k, img in enumerate((a[i], b[i])):
            left = pad + (2 * j + k) * (w + pad)
            canvas[:, top : top + h, left : left + w] = img
    out = np.rint(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    return out[0] if c == 1 else out.transpose(1, 2, 0)


def tile(grid: np.ndarray, index: int, column: int, shape, pairs_per_row: int = 8, pad: int = 2) -> np.ndarray:
    """Extract the tile for pair ``index`` (column 0 = original, 1 = reconstruction)."""
    h, w = shape
    r, j = divmod(index, pairs_per_row)
    top = pad + r * (h + pad)
    left = pad + (2 * j + column) * (w + pad)
    return grid[top : top + h, left : left + w]


def emit_grid(originals, reconstructions, path: str | Path, pairs_per_row: int = 8, pad: int = 2,
              scale: int = 1, text: dict | None = None) -> Path:
    arr = grid_array(originals, reconstructions, pairs_per_row, pad)
    img = Image.fromarray(arr)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", pnginfo=info)
    return path


def emit_tiles(images, path: str | Path, per_row: int = 16, pad: int = 2, text: dict | None = None) -> Path:
    """Plain tiling of one image set (no originals column)."""
    a = np.asarray(images, dtype=np.float32)
    if len(a) == 0:
        raise ValueError("nothing to draw")
    n, c, h, w = a.shape
    per_row = min(per_row, n)
    rows = -(-n // per_row)
    canvas = np.ones((c, rows * (h + pad) + pad, per_row * (w + pad) + pad), dtype=np.float32)
    for i in range(n):
        r, j = divmod(i, per_row)
        canvas[:, pad + r * (h + pad) : pad + r * (h + pad) + h, pad + j * (w + pad) : pad + j * (w + pad) + w] = a[i]
    out = np.rint(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    out = out[0] if c == 1 else out.transpose(1, 2, 0)
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(path, format="PNG", pnginfo=info)
    return path
