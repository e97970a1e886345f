"""PNG helpers; internal images are float (H, W, 3) arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img, path) -> None:
    arr = to_uint8(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_png_dir(directory) -> list[np.ndarray]:
    return [load_png(p) for p in sorted(Path(directory).glob("*.png"))]
