from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_pil(x: torch.Tensor) -> Image.Image:
    """C x H x W tensor in [0, 1] -> 8-bit grayscale or RGB image."""
    arr = (x.detach().clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def save_grid(samples: torch.Tensor, path, columns: int = 8, pad: int = 2) -> Path:
    n, c, h, w = samples.shape
    rows = math.ceil(n / columns)
    mode = "L" if c == 1 else "RGB"
    grid = Image.new(mode, (columns * (w + pad) + pad, rows * (h + pad) + pad))
    for i in range(n):
        r, col = divmod(i, columns)
        grid.paste(to_pil(samples[i]), (pad + col * (w + pad), pad + r * (h + pad)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.save(path, format="PNG")
    return path


def save_samples(samples: torch.Tensor, labels, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (x, y) in enumerate(zip(samples, labels)):
        p = directory / f"sample_{i:03d}_class{int(y)}.png"
        to_pil(x).save(p, format="PNG")
        paths.append(p)
    return paths
