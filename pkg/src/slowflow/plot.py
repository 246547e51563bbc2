"""Binary PPM heatmaps with a fixed diverging colormap, plus CSV field dumps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import atomic_write

LAND_RGB = (128, 128, 128)


def diverging_colormap(n: int = 256) -> np.ndarray:
    """Blue -> white -> red, ``n`` entries of uint8 RGB."""
    t = np.linspace(-1.0, 1.0, n)
    blue = np.array([33, 102, 172], float)
    red = np.array([178, 24, 43], float)
    white = np.array([247, 247, 247], float)
    lo = white + (blue - white) * np.clip(-t, 0, 1)[:, None]
    hi = white + (red - white) * np.clip(t, 0, 1)[:, None]
    rgb = np.where((t < 0)[:, None], lo, hi)
    return np.round(rgb).astype(np.uint8)


COLORMAP = diverging_colormap()


@dataclass
class PlotSpec:
    variable: str
    step: int = 0
    vmin: float | None = None
    vmax: float | None = None
    output: str = "field.ppm"
    csv_path: str | None = None

    def __post_init__(self):
        for v in (self.vmin, self.vmax):
            if v is not None and not math.isfinite(v):
                raise ValueError("colormap range must be finite")
        if self.vmin is not None and self.vmax is not None and self.vmin > self.vmax:
            raise ValueError(f"vmin {self.vmin} exceeds vmax {self.vmax}")


def color_indices(field: np.ndarray, land_mask: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    ocean = field[~land_mask]
    lo = float(ocean.min()) if vmin is None and ocean.size else (vmin if vmin is not None else 0.0)
    hi = float(ocean.max()) if vmax is None and ocean.size else (vmax if vmax is not None else 0.0)
    if hi - lo <= 0:
        return np.full(field.shape, len(COLORMAP) // 2, dtype=np.int64)
    x = (np.asarray(field, np.float64) - lo) / (hi - lo)
    return np.clip(np.floor(x * len(COLORMAP)), 0, len(COLORMAP) - 1).astype(np.int64)


def render(field: np.ndarray, land_mask: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    """(n_lat, n_lon, 3) uint8 image; row 0 is the northernmost latitude."""
    field = np.asarray(field, np.float64)
    land_mask = np.asarray(land_mask, bool)
    if field.shape != land_mask.shape:
        raise ValueError(f"field {field.shape} and land mask {land_mask.shape} differ")
    if not np.all(np.isfinite(field[~land_mask])):
        raise ValueError("field has non-finite ocean values")
    img = COLORMAP[color_indices(field, land_mask, vmin, vmax)]
    img[land_mask] = LAND_RGB
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, np.uint8).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w, 3)


def write_ppm(field, land_mask, path, vmin=None, vmax=None) -> None:
    atomic_write(path, encode_ppm(render(field, land_mask, vmin, vmax)))


def write_field_csv(field: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(field, np.float64):
            w.writerow([repr(float(v)) for v in row])


def read_field_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
