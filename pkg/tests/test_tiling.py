import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsirepro.dicom import FixtureSpec, WsiInstanceInfo, write_synthetic_wsi
from wsirepro.storage import TileCache
from wsirepro.tiling import (
    DegenerateSlide,
    EmptyBuffer,
    NonSquareSource,
    NoVolumeInstance,
    ResampleTooExtreme,
    TileSequence,
    TilingParams,
    compute_grid,
    iterate_tiles,
    open_slide,
    resample_tile,
    select_level,
    tissue_fraction,
)

DARK = (100, 80, 120)


def info(spacing_um=1.0, cols=1024, rows=768, flavor="VOLUME", uid="1.1"):
    mm = spacing_um / 1000
    return WsiInstanceInfo(uid, "2.1", "P", "SM", flavor, cols, rows, 256, 256,
                           -(-cols // 256) * -(-rows // 256), (mm, mm), "RGB", "TILED_FULL")


def blob_slide(cells, cols=1024, rows=768, spacing_mm=0.001, frame=256, **kw):
    spec = FixtureSpec(total_columns=cols, total_rows=rows, frame_columns=frame, frame_rows=frame,
                       pixel_spacing_mm=spacing_mm, pattern="tissue_blob", blob_cells=tuple(cells),
                       tissue_rgb=DARK, **kw)
    return open_slide(write_synthetic_wsi(spec))


def test_select_level_exact_match():
    levels = [info(s, uid=f"1.{i}") for i, s in enumerate([0.25, 0.5, 1.0, 2.0])]
    assert select_level(levels, 1.0).spacing_um == pytest.approx(1.0)


def test_select_level_tie_goes_finer_then_uid():
    assert select_level([info(2.0, uid="1.1"), info(0.5, uid="1.2")], 1.0).sop_instance_uid == "1.2"
    assert select_level([info(0.5, uid="1.9"), info(0.5, uid="1.10")], 1.0).sop_instance_uid == "1.10"


def test_select_level_needs_volume():
    with pytest.raises(NoVolumeInstance):
        select_level([info(flavor="LABEL"), info(flavor="OVERVIEW")], 1.0)


@pytest.mark.parametrize("spacing, cols, rows, expected", [
    (1.0, 1024, 768, (256, 4, 3)),
    (1.0, 1000, 600, (256, 3, 2)),
    (0.5, 1024, 768, (512, 2, 1)),
    (2.0, 1024, 768, (128, 8, 6)),
])
def test_compute_grid(spacing, cols, rows, expected):
    grid = compute_grid(info(spacing, cols, rows), TilingParams())
    assert (grid.source_tile_px, grid.tiles_x, grid.tiles_y) == expected
    assert grid.scale == pytest.approx(1.0 / spacing)


def test_compute_grid_errors():
    with pytest.raises(ResampleTooExtreme):
        compute_grid(info(0.2), TilingParams())
    with pytest.raises(ResampleTooExtreme):
        compute_grid(info(5.0), TilingParams())
    with pytest.raises(DegenerateSlide):
        compute_grid(info(1.0, 1024, 200), TilingParams())


def test_params_validation():
    for bad in ({"tile_px": 0}, {"tissue_threshold": 0}, {"tissue_threshold": 1.5}, {"target_spacing_um": 0}):
        with pytest.raises(ValueError):
            TilingParams(**bad)
    assert TilingParams.from_dict(TilingParams().to_dict()) == TilingParams()
    with pytest.raises(ValueError):
        TilingParams.from_dict({"stride": 4})


def test_tissue_fraction_examples():
    white = np.full((256, 256, 3), 255, np.uint8)
    dark = np.empty((256, 256, 3), np.uint8)
    dark[:] = DARK
    half = white.copy()
    half[:, 128:] = DARK
    assert tissue_fraction(white) == 0.0
    assert tissue_fraction(dark) == 1.0
    assert tissue_fraction(half) == 0.5
    # one channel below the cutoff is enough to count as tissue
    assert tissue_fraction(np.array([[[219, 255, 255]]], np.uint8)) == 1.0
    with pytest.raises(EmptyBuffer):
        tissue_fraction(np.zeros((0, 0, 3), np.uint8))


def test_resample_examples():
    solid = np.full((256, 256, 3), 37, np.uint8)
    assert np.array_equal(resample_tile(solid, 256), solid)
    yy, xx = np.indices((512, 512))
    board = np.repeat(np.where((xx + yy) % 2 == 0, 0, 255).astype(np.uint8)[:, :, None], 3, axis=2)
    assert np.all(resample_tile(board, 512) == 128)
    assert np.all(resample_tile(np.full((512, 512, 3), 200, np.uint8), 512) == 200)
    with pytest.raises(NonSquareSource):
        resample_tile(np.zeros((10, 12, 3), np.uint8), 10)


@given(st.integers(64, 1024), st.integers(0, 255))
def test_resample_preserves_constants(source_px, value):
    out = resample_tile(np.full((source_px, source_px, 3), value, np.uint8), source_px)
    assert out.shape == (256, 256, 3)
    assert np.all(out == value)


@given(st.integers(257, 700), st.integers(0, 2**32 - 1))
def test_box_filter_preserves_mean_within_rounding(source_px, seed):
    src = np.random.default_rng(seed).integers(0, 256, (source_px, source_px, 3), dtype=np.uint8)
    out = resample_tile(src, source_px)
    assert abs(out.astype(float).mean() - src.astype(float).mean()) <= 0.5 + 1e-9
    assert out.min() >= src.min() and out.max() <= src.max()


def test_five_blobs_seven_white():
    slide = blob_slide([0, 3, 5, 6, 11], noise=5)
    seq = iterate_tiles(slide, TilingParams())
    tiles = list(seq)
    assert [t.index for t in tiles] == [0, 3, 5, 6, 11]
    assert [(t.col, t.row) for t in tiles] == [(0, 0), (3, 0), (1, 1), (2, 1), (3, 2)]
    assert all(t.pixels.shape == (256, 256, 3) for t in tiles)
    assert seq.kept_indices == [0, 3, 5, 6, 11]
    assert len(seq.entries) == 12


def test_1000x600_yields_six_tiles():
    tiles = list(iterate_tiles(blob_slide(range(6), cols=1000, rows=600, cell_px=256), TilingParams()))
    assert len(tiles) == 6


def test_half_micron_slide_resamples_512_to_256():
    slide = blob_slide([0, 1], cols=1024, rows=768, spacing_mm=0.0005, cell_px=512, frame=256)
    seq = iterate_tiles(slide, TilingParams())
    tiles = list(seq)
    assert seq.grid.source_tile_px == 512
    assert [t.index for t in tiles] == [0, 1]
    assert all(t.pixels.shape == (256, 256, 3) for t in tiles)
    assert np.all(tiles[0].pixels == DARK)


@pytest.mark.parametrize("fraction, kept", [(0.5, True), (0.49, False)])
def test_threshold_boundary(fraction, kept):
    slide = blob_slide([0], cols=256, rows=256, blob_fraction=fraction)
    seq = iterate_tiles(slide, TilingParams())
    assert len(list(seq)) == int(kept)
    if kept:
        assert seq.entries[0].tissue_fraction == 0.5


def test_all_white_is_empty():
    seq = iterate_tiles(blob_slide([]), TilingParams())
    assert list(seq) == []
    assert seq.kept_indices == []


def test_stream_and_precache_identical(tmp_path):
    slide = blob_slide([1, 2, 4, 9, 10], noise=20, noise_seed=3)
    stream = iterate_tiles(slide, TilingParams())
    cached = iterate_tiles(slide, TilingParams(), "precache", TileCache(tmp_path))
    a = [(t.index, t.digest) for t in stream]
    b = [(t.index, t.digest) for t in cached]
    assert a == b and len(a) == 5
    assert stream.manifest_text() == cached.manifest_text()
    # second construction reuses the cache index
    again = iterate_tiles(slide, TilingParams(), "precache", TileCache(tmp_path))
    assert [(t.index, t.digest) for t in again] == a


def test_precache_regenerates_corrupt_entries(tmp_path):
    slide = blob_slide([1, 2], noise=20)
    cache = TileCache(tmp_path)
    seq = iterate_tiles(slide, TilingParams(), "precache", cache)
    expected = [t.digest for t in seq]
    cache.path(seq._key(2)).write_bytes(b"junk")
    assert [t.digest for t in iterate_tiles(slide, TilingParams(), "precache", cache)] == expected


def test_precache_requires_cache():
    with pytest.raises(ValueError):
        TileSequence(blob_slide([0]), TilingParams(), "precache")
    with pytest.raises(ValueError):
        TileSequence(blob_slide([0]), TilingParams(), "lazy")


def test_thread_count_does_not_change_output():
    slide = blob_slide([0, 2, 3, 7, 8, 11], noise=30)
    one = [(t.index, t.digest) for t in iterate_tiles(slide, TilingParams(), threads=1)]
    four = [(t.index, t.digest) for t in iterate_tiles(slide, TilingParams(), threads=4)]
    assert one == four


def test_manifest_text_format():
    text = iterate_tiles(blob_slide([0]), TilingParams()).manifest_text()
    lines = text.splitlines()
    assert lines[0] == "index\tcol\trow\tkept\ttissue_fraction\tdigest"
    assert len(lines) == 13
    assert lines[1].split("\t")[:5] == ["0", "0", "0", "1", "1.000000"]
    assert lines[2].split("\t")[3:5] == ["0", "0.000000"]


@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 63), st.integers(0, 63),
       st.sampled_from([0.0005, 0.001, 0.002]))
def test_grid_partitions_cropped_matrix(tx, ty, extra_x, extra_y, spacing_mm):
    params = TilingParams(tile_px=32)
    source = round(32 * 0.001 / spacing_mm)
    cols, rows = tx * source + extra_x % source, ty * source + extra_y % source
    spec = FixtureSpec(total_columns=cols, total_rows=rows, frame_columns=16, frame_rows=16,
                       pixel_spacing_mm=spacing_mm, pattern="solid", fill_value=10)
    grid = compute_grid(open_slide(write_synthetic_wsi(spec)).info, params)
    assert (grid.tiles_x, grid.tiles_y, grid.source_tile_px) == (tx, ty, source)
    covered = np.zeros((rows, cols), int)
    for index in range(grid.size):
        r, c = divmod(index, grid.tiles_x)
        covered[r * source : (r + 1) * source, c * source : (c + 1) * source] += 1
    assert covered.max() == 1
    assert covered.sum() == grid.size * source * source == (cols // source) * (rows // source) * source**2
