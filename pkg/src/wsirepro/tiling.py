"""Deterministic tiling of one whole-slide image into fixed-size tissue tiles.

The grid is laid out on the chosen pyramid level in source pixels; each grid
cell is then resampled to ``tile_px`` square at the target resolution.
Partial edge cells are dropped.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import math
import mmap
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import canonical
from .dicom import CodecRegistry, DataSet, WsiInstanceInfo, default_codecs, extract_wsi_info, parse_part10, read_frame
from .errors import WsiReproError
from .storage import TileCache, TileCacheKey

MODES = ("stream", "precache")


class TilingError(WsiReproError):
    pass


class NoVolumeInstance(TilingError):
    pass


class ResampleTooExtreme(TilingError):
    pass


class DegenerateSlide(TilingError):
    pass


class EmptyBuffer(TilingError):
    pass


class NonSquareSource(TilingError):
    pass


class TileError(TilingError):
    """Wraps a lower-level failure with the tile index it occurred at."""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"tile {index}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class TilingParams:
    tile_px: int = 256
    target_spacing_um: float = 1.0
    tissue_threshold: float = 0.5
    background_rgb_min: int = 220

    def __post_init__(self):
        if self.tile_px <= 0:
            raise ValueError("tile_px must be positive")
        if not 0 < self.tissue_threshold <= 1:
            raise ValueError("tissue_threshold must be in (0, 1]")
        if not self.target_spacing_um > 0:
            raise ValueError("target_spacing_um must be positive")
        if not 0 <= self.background_rgb_min <= 255:
            raise ValueError("background_rgb_min must be within 0..255")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TilingParams":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown tiling parameters {sorted(unknown)}")
        return cls(**data)

    @property
    def digest(self) -> str:
        return canonical.digest(self.to_dict())[:16]


@dataclass(frozen=True)
class TileGrid:
    source_tile_px: int
    tiles_x: int
    tiles_y: int
    scale: float

    @property
    def size(self) -> int:
        return self.tiles_x * self.tiles_y


@dataclass(frozen=True)
class TileImage:
    index: int
    col: int
    row: int
    pixels: np.ndarray  # (tile_px, tile_px, 3) uint8

    @property
    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.pixels).tobytes()).hexdigest()


@dataclass(frozen=True)
class TileEntry:
    index: int
    col: int
    row: int
    kept: bool
    tissue_fraction: float
    digest: str


def _level_key(spacing_um: float, target_um: float, uid: str):
    return (round(abs(math.log(spacing_um / target_um)), 12), spacing_um, uid)


def select_level(instances: Sequence[WsiInstanceInfo], target_spacing_um: float) -> WsiInstanceInfo:
    """Pick the VOLUME instance closest to the target spacing on a log scale.

    Ties go to the finer spacing, then to the smallest SOP Instance UID.
    """
    volumes = [i for i in instances if i.image_type_flavor == "VOLUME"]
    if not volumes:
        raise NoVolumeInstance("series has no VOLUME instance")
    return min(volumes, key=lambda i: _level_key(i.spacing_um, target_spacing_um, i.sop_instance_uid))


def compute_grid(info: WsiInstanceInfo, params: TilingParams) -> TileGrid:
    scale = params.target_spacing_um / info.spacing_um
    if not 0.25 <= scale <= 4.0:
        raise ResampleTooExtreme(f"source spacing {info.spacing_um} um/px vs target {params.target_spacing_um}")
    source_tile_px = int(math.floor(params.tile_px * scale + 0.5))
    tiles_x = info.total_pixel_matrix_columns // source_tile_px
    tiles_y = info.total_pixel_matrix_rows // source_tile_px
    if tiles_x == 0 or tiles_y == 0:
        raise DegenerateSlide(
            f"{info.total_pixel_matrix_columns}x{info.total_pixel_matrix_rows} px holds no {source_tile_px} px tile"
        )
    return TileGrid(source_tile_px, tiles_x, tiles_y, scale)


def tissue_fraction(pixels: np.ndarray, background_rgb_min: int = 220) -> float:
    """Fraction of pixels with at least one channel below ``background_rgb_min``."""
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise EmptyBuffer("tile has no pixels")
    flat = pixels.reshape(-1, 3)
    background = np.count_nonzero(np.all(flat >= background_rgb_min, axis=1))
    return 1.0 - background / flat.shape[0]


def _area_weights(source_px: int, tile_px: int) -> np.ndarray:
    """Row-stochastic matrix averaging source pixels over each target pixel's footprint."""
    factor = source_px / tile_px
    weights = np.zeros((tile_px, source_px))
    for i in range(tile_px):
        lo, hi = i * factor, (i + 1) * factor
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), source_px)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights / factor


def _bilinear_weights(source_px: int, tile_px: int) -> np.ndarray:
    weights = np.zeros((tile_px, source_px))
    factor = source_px / tile_px
    for i in range(tile_px):
        x = min(max((i + 0.5) * factor - 0.5, 0.0), source_px - 1)
        j = int(math.floor(x))
        frac = x - j
        weights[i, j] += 1.0 - frac
        if frac > 0:
            weights[i, j + 1] += frac
    return weights


@functools.lru_cache(maxsize=16)
def _weights(source_px: int, tile_px: int) -> np.ndarray:
    if source_px > tile_px:
        return _area_weights(source_px, tile_px)
    return _bilinear_weights(source_px, tile_px)


def resample_tile(source: np.ndarray, source_px: int, tile_px: int = 256) -> np.ndarray:
    """Box-filter down or bilinear up to ``tile_px`` square; rounds half away from zero."""
    source = np.asarray(source)
    if source.ndim != 3 or source.shape[0] != source.shape[1] or source.shape[0] != source_px:
        raise NonSquareSource(f"expected ({source_px}, {source_px}, C), got {source.shape}")
    if source_px == tile_px:
        return np.array(source, dtype=np.uint8, copy=True)
    values = source.astype(np.float64)
    if source_px > tile_px and source_px % tile_px == 0:
        f = source_px // tile_px
        out = values.reshape(tile_px, f, tile_px, f, -1).mean(axis=(1, 3))
    else:
        w = _weights(source_px, tile_px)
        out = np.einsum("ij,jkc,lk->ilc", w, values, w, optimize=True)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# -- slides and tile streams -------------------------------------------------


@dataclass(frozen=True)
class Slide:
    dataset: DataSet
    info: WsiInstanceInfo
    codecs: CodecRegistry = dataclasses.field(default_factory=default_codecs)

    @functools.cached_property
    def _frame(self):
        @functools.lru_cache(maxsize=max(4, 2 * self.info.tiles_per_row))
        def frame(index: int) -> np.ndarray:
            return read_frame(self.dataset, self.info, index, self.codecs).pixels

        return frame

    def read_region(self, x: int, y: int, width: int, height: int) -> np.ndarray:
        """Source-level pixels of ``[x, x+width) x [y, y+height)``, assembled from frames."""
        info = self.info
        fw, fh = info.frame_columns, info.frame_rows
        out = np.empty((height, width, 3), dtype=np.uint8)
        for fy in range(y // fh, (y + height - 1) // fh + 1):
            for fx in range(x // fw, (x + width - 1) // fw + 1):
                frame = self._frame(fy * info.tiles_per_row + fx)
                x0, y0 = max(x, fx * fw), max(y, fy * fh)
                x1, y1 = min(x + width, (fx + 1) * fw), min(y + height, (fy + 1) * fh)
                out[y0 - y : y1 - y, x0 - x : x1 - x] = frame[y0 - fy * fh : y1 - fy * fh, x0 - fx * fw : x1 - fx * fw]
        return out


def open_slide(data, codecs: CodecRegistry | None = None) -> Slide:
    ds = parse_part10(data)
    return Slide(ds, extract_wsi_info(ds), codecs or default_codecs())


def open_slide_file(path, codecs: CodecRegistry | None = None) -> Slide:
    """Memory-map ``path`` so frames are paged in only when decoded."""
    with open(path, "rb") as fh:
        mapped = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    return open_slide(mapped, codecs)


def _render_tile(slide: Slide, grid: TileGrid, params: TilingParams, index: int) -> tuple[TileEntry, TileImage]:
    row, col = divmod(index, grid.tiles_x)
    stp = grid.source_tile_px
    try:
        source = slide.read_region(col * stp, row * stp, stp, stp)
        pixels = resample_tile(source, stp, params.tile_px)
    except WsiReproError as exc:
        raise TileError(index, exc) from exc
    tile = TileImage(index, col, row, pixels)
    fraction = tissue_fraction(pixels, params.background_rgb_min)
    entry = TileEntry(index, col, row, fraction >= params.tissue_threshold, fraction, tile.digest)
    return entry, tile


def _ordered_map(fn, indices: Iterable[int], threads: int) -> Iterator:
    """Apply ``fn`` with a bounded worker pool, yielding results in input order."""
    indices = list(indices)
    if threads <= 1:
        yield from map(fn, indices)
        return
    window = 4 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, len(indices), window):
            yield from pool.map(fn, indices[start : start + window])


_INDEX_HEADER = "index\tcol\trow\tkept\ttissue_fraction\tdigest"


def _entries_to_text(entries: Sequence[TileEntry]) -> str:
    rows = [_INDEX_HEADER]
    for e in entries:
        rows.append(f"{e.index}\t{e.col}\t{e.row}\t{int(e.kept)}\t{e.tissue_fraction:.6f}\t{e.digest}")
    return "\n".join(rows) + "\n"


def _entries_from_text(text: str) -> list[TileEntry]:
    lines = text.splitlines()
    if not lines or lines[0] != _INDEX_HEADER:
        raise ValueError("bad tile index header")
    out = []
    for line in lines[1:]:
        index, col, row, kept, fraction, digest = line.split("\t")
        out.append(TileEntry(int(index), int(col), int(row), kept == "1", float(fraction), digest))
    return out


class TileSequence:
    """Kept tiles of one slide in ascending index order.

    In ``stream`` mode tiles are decoded lazily during iteration.  In
    ``precache`` mode construction decodes the whole grid once, stores kept
    tiles in ``cache`` and iteration reads them back.  ``entries`` lists every
    grid cell (kept or not) once a full pass has happened.
    """

    def __init__(self, slide: Slide, params: TilingParams, mode: str = "stream",
                 cache: Optional[TileCache] = None, threads: int = 1):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "precache" and cache is None:
            raise ValueError("precache mode needs a tile cache")
        self.slide = slide
        self.params = params
        self.mode = mode
        self.cache = cache
        self.threads = max(1, int(threads))
        self.grid = compute_grid(slide.info, params)
        self.entries: list[TileEntry] = []
        if mode == "precache":
            self._precache()

    @property
    def kept_indices(self) -> list[int]:
        return [e.index for e in self.entries if e.kept]

    def _key(self, index: int) -> TileCacheKey:
        return TileCacheKey(self.slide.info.sop_instance_uid, index, self.params.digest)

    def _index_path(self) -> Path:
        return self.cache.path(self._key(0)).parent / "index.tsv"

    def _precache(self) -> None:
        index_path = self._index_path()
        if index_path.exists():
            try:
                entries = _entries_from_text(index_path.read_text())
                if len(entries) == self.grid.size and all(
                    not e.kept or self.cache.path(self._key(e.index)).exists() for e in entries
                ):
                    self.entries = entries
                    return
            except (OSError, ValueError):
                pass
        entries = []
        work = functools.partial(_render_tile, self.slide, self.grid, self.params)
        for entry, tile in _ordered_map(work, range(self.grid.size), self.threads):
            if entry.kept:
                self.cache.put(self._key(entry.index), tile)
            entries.append(entry)
        index_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = index_path.with_suffix(".tmp")
        tmp.write_text(_entries_to_text(entries))
        tmp.replace(index_path)
        self.entries = entries

    def __iter__(self) -> Iterator[TileImage]:
        if self.mode == "precache":
            for entry in self.entries:
                if not entry.kept:
                    continue
                tile = self.cache.get(self._key(entry.index))
                if tile is None or tile.digest != entry.digest:
                    # Entry vanished or was corrupt: regenerate it.
                    _, tile = _render_tile(self.slide, self.grid, self.params, entry.index)
                    self.cache.put(self._key(entry.index), tile)
                yield tile
            return
        self.entries = []
        work = functools.partial(_render_tile, self.slide, self.grid, self.params)
        for entry, tile in _ordered_map(work, range(self.grid.size), self.threads):
            self.entries.append(entry)
            if entry.kept:
                yield tile

    def manifest_text(self) -> str:
        if len(self.entries) != self.grid.size:
            for _ in self:
                pass
        return _entries_to_text(self.entries)


def iterate_tiles(slide: Slide, params: TilingParams, mode: str = "stream",
                  cache: Optional[TileCache] = None, threads: int = 1) -> TileSequence:
    return TileSequence(slide, params, mode, cache, threads)
