"""Images, area-ratio resizing and AnyRes tiling.

Raw raster file layout (little-endian)::

    b"TVLR" | uint32 width | uint32 height | uint32 channels (=3) | width*height*3 uint8, row-major HWC

Pixels are stored as ``byte / 255``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

RASTER_MAGIC = b"TVLR"
PAD_VALUE = 0.0


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Image:
    """RGB raster, ``pixels`` has shape [h, w, 3] with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionError(f"image pixels must be [h>=1, w>=1, 3], got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.isfinite(px).all()):
            raise ContractError("image pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def constant(cls, width: int, height: int, value=0.0) -> "Image":
        px = np.empty((height, width, 3))
        px[...] = value
        return cls(px)

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def copy(self) -> "Image":
        return Image(self.pixels.copy())


def _axis_coords(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: Image, width: int, height: int) -> Image:
    """Bilinear resample to exactly ``width`` x ``height``; same size returns a copy."""
    if width < 1 or height < 1:
        raise ParameterError(f"target size must be positive, got {width}x{height}")
    if (width, height) == img.size:
        return img.copy()
    px = img.pixels
    y0, y1, fy = _axis_coords(img.height, height)
    x0, x1, fx = _axis_coords(img.width, width)
    top = px[y0]
    rows = top + fy[:, None, None] * (px[y1] - top)
    left = rows[:, x0]
    out = left + fx[None, :, None] * (rows[:, x1] - left)
    # a + f·(b − a) keeps constant regions exact; clip guards the last ulp
    return Image(np.clip(out, 0.0, 1.0))


def area_ratio_size(width: int, height: int, alpha: float) -> tuple[int, int]:
    side = math.sqrt(alpha)
    return max(1, round_half_up(width * side)), max(1, round_half_up(height * side))


def resize_area_ratio(img: Image, alpha: float) -> Image:
    """Scale so the output area is about ``alpha`` times the input area."""
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return img.copy()
    return resize_bilinear(img, *area_ratio_size(img.width, img.height, alpha))


@dataclass
class TileGrid:
    tile_size: int
    rows: int
    cols: int
    tiles: list[Image]
    scale_applied: float
    content_width: int
    content_height: int
    pad_right: int
    pad_bottom: int
    max_tiles: int = field(default=0)

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def canvas(self) -> np.ndarray:
        T = self.tile_size
        out = np.empty((self.rows * T, self.cols * T, 3))
        for idx, tile in enumerate(self.tiles):
            r, c = divmod(idx, self.cols)
            out[r * T:(r + 1) * T, c * T:(c + 1) * T] = tile.pixels
        return out


@dataclass(frozen=True)
class GridChoice:
    rows: int
    cols: int
    scale: float
    content_width: int
    content_height: int
    padding: int
    lost: int

    @property
    def cost(self) -> int:
        return self.padding + self.lost


def fit_grid(width: int, height: int, T: int, rows: int, cols: int) -> GridChoice:
    s = min(cols * T / width, rows * T / height, 1.0)
    cw = max(1, round_half_up(width * s)) if s < 1.0 else width
    ch = max(1, round_half_up(height * s)) if s < 1.0 else height
    cw, ch = min(cw, cols * T), min(ch, rows * T)
    padding = rows * cols * T * T - cw * ch
    lost = width * height - cw * ch
    return GridChoice(rows, cols, s, cw, ch, padding, lost)


def candidate_grids(max_tiles: int):
    for rows in range(1, max_tiles + 1):
        for cols in range(1, max_tiles // rows + 1):
            yield rows, cols


def select_grid(width: int, height: int, T: int, max_tiles: int) -> GridChoice:
    """Pick the grid with least wasted area.

    Waste counts both canvas padding and the source area given up by
    downscaling, so a big image is not squeezed into one tile just because
    that fits without padding. Ties go to fewer tiles, then fewer rows.
    """
    best = None
    for rows, cols in candidate_grids(max_tiles):
        choice = fit_grid(width, height, T, rows, cols)
        key = (choice.cost, rows * cols, rows)
        if best is None or key < best[0]:
            best = (key, choice)
    return best[1]


def anyres_tile(img: Image, T: int, max_tiles: int) -> TileGrid:
    if T < 8:
        raise ParameterError(f"tile size must be >= 8, got {T}")
    if max_tiles < 1:
        raise ParameterError(f"max_tiles must be >= 1, got {max_tiles}")
    choice = select_grid(img.width, img.height, T, max_tiles)
    scaled = resize_bilinear(img, choice.content_width, choice.content_height)
    canvas = np.full((choice.rows * T, choice.cols * T, 3), PAD_VALUE)
    canvas[: choice.content_height, : choice.content_width] = scaled.pixels
    tiles = [
        Image(canvas[r * T:(r + 1) * T, c * T:(c + 1) * T].copy())
        for r in range(choice.rows)
        for c in range(choice.cols)
    ]
    return TileGrid(
        tile_size=T,
        rows=choice.rows,
        cols=choice.cols,
        tiles=tiles,
        scale_applied=choice.scale,
        content_width=choice.content_width,
        content_height=choice.content_height,
        pad_right=choice.cols * T - choice.content_width,
        pad_bottom=choice.rows * T - choice.content_height,
        max_tiles=max_tiles,
    )


def reassemble(grid: TileGrid) -> Image:
    canvas = grid.canvas()
    return Image(canvas[: grid.content_height, : grid.content_width].copy())


def scaled_image(img: Image, grid: TileGrid) -> Image:
    """The image as it was placed on the grid canvas (before padding)."""
    return resize_bilinear(img, grid.content_width, grid.content_height)


# --------------------------------------------------------------------------
# raw raster I/O


def encode_raster(img: Image) -> bytes:
    body = np.clip(np.floor(img.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return RASTER_MAGIC + struct.pack("<III", img.width, img.height, 3) + body.tobytes()


def decode_raster(blob: bytes) -> Image:
    if blob[:4] != RASTER_MAGIC:
        raise ContractError("not a raw raster file (bad magic)")
    w, h, c = struct.unpack_from("<III", blob, 4)
    if c != 3:
        raise ContractError(f"raw raster must have 3 channels, got {c}")
    body = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if body.size != w * h * c:
        raise ContractError(f"raw raster payload has {body.size} bytes, expected {w * h * c}")
    return Image(body.reshape(h, w, c).astype(np.float64) / 255.0)


def write_raster(path, img: Image) -> None:
    Path(path).write_bytes(encode_raster(img))


def read_raster(path) -> Image:
    return decode_raster(Path(path).read_bytes())
