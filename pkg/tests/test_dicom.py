import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsirepro.dicom import (
    JPEG_BASELINE,
    CodecRegistry,
    CodecUnavailable,
    DecodeFailure,
    DicomError,
    ElementOrderError,
    FixtureSpec,
    FrameOutOfRange,
    InconsistentGeometry,
    InvalidSpec,
    MalformedSequence,
    MissingAttribute,
    MissingMagic,
    NotSlideMicroscopy,
    OutOfGrid,
    TruncatedElement,
    UnsupportedOrganization,
    UnsupportedTransferSyntax,
    extract_wsi_info,
    frame_for_tile,
    parse_part10,
    read_frame,
    render_frames,
    render_matrix,
    write_synthetic_wsi,
)


def parsed(**kw):
    ds = parse_part10(write_synthetic_wsi(FixtureSpec(**kw)))
    return ds, extract_wsi_info(ds)


def test_minimal_fixture_round_trip():
    ds, info = parsed()
    assert ds.Modality == "SM"
    assert ds.NumberOfFrames == 12
    assert (info.total_pixel_matrix_columns, info.total_pixel_matrix_rows) == (64, 48)
    assert (info.frame_columns, info.frame_rows) == (16, 16)
    assert info.number_of_frames == 12
    assert ds.transfer_syntax == "1.2.840.10008.1.2.1"


def test_spec_example_1024x768():
    _, info = parsed(total_columns=1024, total_rows=768, frame_columns=256, frame_rows=256, pattern="solid")
    assert info.number_of_frames == 12
    assert info.image_type_flavor == "VOLUME"
    assert info.pixel_spacing_mm == (0.001, 0.001)
    assert info.spacing_um == pytest.approx(1.0)


def test_empty_input_is_missing_magic():
    with pytest.raises(MissingMagic):
        parse_part10(b"")
    with pytest.raises(MissingMagic):
        parse_part10(b"\0" * 128 + b"DICX")


def test_unsupported_transfer_syntax():
    data = write_synthetic_wsi(FixtureSpec(declared_transfer_syntax="1.2.840.10008.1.2.4.100"))
    with pytest.raises(UnsupportedTransferSyntax):
        parse_part10(data)


def test_missing_total_columns():
    ds = parse_part10(write_synthetic_wsi(FixtureSpec(omit=("TotalPixelMatrixColumns",))))
    with pytest.raises(MissingAttribute) as err:
        extract_wsi_info(ds)
    assert err.value.tag == (0x0048, 0x0006)


def test_ct_modality_rejected():
    ds = parse_part10(write_synthetic_wsi(FixtureSpec(modality="CT")))
    with pytest.raises(NotSlideMicroscopy):
        extract_wsi_info(ds)


def test_wrong_sop_class_rejected():
    ds = parse_part10(write_synthetic_wsi(FixtureSpec(sop_class_uid="1.2.840.10008.5.1.4.1.1.2")))
    with pytest.raises(NotSlideMicroscopy):
        extract_wsi_info(ds)


def test_tiled_sparse_rejected():
    ds = parse_part10(write_synthetic_wsi(FixtureSpec(dimension_organization="TILED_SPARSE")))
    with pytest.raises(UnsupportedOrganization):
        extract_wsi_info(ds)


def test_frame_for_tile_examples():
    _, info = parsed()  # 4 x 3 grid
    assert frame_for_tile(info, 1, 1) == 5
    assert frame_for_tile(info, 0, 0) == 0
    with pytest.raises(OutOfGrid):
        frame_for_tile(info, 4, 0)
    with pytest.raises(OutOfGrid):
        frame_for_tile(info, 0, 3)


def test_read_frame_gray_value():
    ds, info = parsed()
    frame = read_frame(ds, info, 3)
    assert (frame.width, frame.height) == (16, 16)
    assert frame.pixels.shape == (16, 16, 3)
    assert np.all(frame.pixels == 3)
    with pytest.raises(FrameOutOfRange):
        read_frame(ds, info, info.number_of_frames)


def test_partial_edge_frames_are_padded():
    ds, info = parsed(total_columns=40, total_rows=20, frame_columns=16, frame_rows=16, pattern="checkerboard")
    assert info.number_of_frames == 3 * 2
    matrix = render_matrix(FixtureSpec(total_columns=40, total_rows=20, frame_columns=16, frame_rows=16, pattern="checkerboard"))
    frame = read_frame(ds, info, frame_for_tile(info, 2, 1))
    assert np.array_equal(frame.pixels[:4, :8], matrix[16:20, 32:40])


def test_implicit_vr_parses_metadata_and_frames():
    ds, info = parsed(transfer_syntax="implicit")
    assert ds.transfer_syntax == "1.2.840.10008.1.2"
    assert info.number_of_frames == 12
    assert np.all(read_frame(ds, info, 7).pixels == 7)


@pytest.mark.parametrize("offset_table", [True, False])
def test_jpeg_frames_decode_via_codec(offset_table):
    ds, info = parsed(transfer_syntax="jpeg", pattern="solid", fill_value=128, offset_table=offset_table)
    assert ds.transfer_syntax == JPEG_BASELINE
    pixels = read_frame(ds, info, 11).pixels
    assert np.abs(pixels.astype(int) - 128).max() <= 2


def test_jpeg_without_codec():
    ds, info = parsed(transfer_syntax="jpeg", pattern="solid")
    with pytest.raises(CodecUnavailable):
        read_frame(ds, info, 0, CodecRegistry())


def test_codec_failure_reports_offset():
    class Broken:
        def decode(self, data, rows, columns):
            raise ValueError("boom")

    ds, info = parsed(transfer_syntax="jpeg", pattern="solid")
    with pytest.raises(DecodeFailure) as err:
        read_frame(ds, info, 2, CodecRegistry({JPEG_BASELINE: Broken()}))
    assert err.value.offset > 132


def test_inconsistent_frame_count():
    data = bytearray(write_synthetic_wsi(FixtureSpec()))
    value = parse_part10(bytes(data)).elements[(0x0028, 0x0008)].position
    assert data[value : value + 2] == b"12"
    data[value : value + 2] = b"13"
    with pytest.raises(InconsistentGeometry):
        extract_wsi_info(parse_part10(bytes(data)))


def test_element_order_enforced():
    data = write_synthetic_wsi(FixtureSpec())
    ds = parse_part10(data)
    # Swap two adjacent elements of equal size: Rows and Columns (US, 8-byte header + 2-byte value).
    rows = ds.elements[(0x0028, 0x0010)].position - 8
    cols = ds.elements[(0x0028, 0x0011)].position - 8
    assert cols == rows + 10
    swapped = bytearray(data)
    swapped[rows : rows + 10], swapped[cols : cols + 10] = data[cols : cols + 10], data[rows : rows + 10]
    with pytest.raises(ElementOrderError):
        parse_part10(bytes(swapped))


def test_unmatched_item_delimiter():
    data = write_synthetic_wsi(FixtureSpec())
    ds = parse_part10(data)
    sq = ds.elements[(0x5200, 0x9229)].position
    bad = bytearray(data)
    # An item delimiter where an item should start closes nothing.
    item = data.index(struct.pack("<HH", 0xFFFE, 0xE000), sq)
    bad[item : item + 4] = struct.pack("<HH", 0xFFFE, 0xE00D)
    with pytest.raises(MalformedSequence):
        parse_part10(bytes(bad))


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        write_synthetic_wsi(FixtureSpec(frame_columns=0, frame_rows=0))
    with pytest.raises(InvalidSpec):
        write_synthetic_wsi(FixtureSpec(frame_columns=128))
    with pytest.raises(InvalidSpec):
        write_synthetic_wsi(FixtureSpec(pattern="plaid"))


def test_writer_is_deterministic():
    spec = FixtureSpec(pattern="tissue_blob", blob_cells=(0,), cell_px=16, noise=9, noise_seed=4)
    assert write_synthetic_wsi(spec) == write_synthetic_wsi(spec)


def test_spec_text_round_trip():
    spec = FixtureSpec(total_columns=100, tissue_rgb=(1, 2, 3), blob_cells=(0, 4), omit=("PatientID",))
    assert FixtureSpec.from_text(spec.to_text()) == spec
    with pytest.raises(InvalidSpec):
        FixtureSpec.from_text("no_such_field=1")


def test_repeated_parse_has_identical_order():
    data = write_synthetic_wsi(FixtureSpec())
    assert list(parse_part10(data).elements) == list(parse_part10(data).elements)


def test_pixel_data_not_decoded_eagerly():
    ds = parse_part10(write_synthetic_wsi(FixtureSpec()))
    assert isinstance(ds.elements[(0x7FE0, 0x0010)].value, memoryview)


geometry = st.integers(1, 6).flatmap(
    lambda fc: st.integers(1, 6).flatmap(
        lambda fr: st.tuples(st.just(fc * 4), st.just(fr * 4), st.integers(fc * 4, 80), st.integers(fr * 4, 80))
    )
)


@given(geometry, st.sampled_from(["explicit", "implicit"]), st.sampled_from(["VOLUME", "LABEL", "OVERVIEW", "THUMBNAIL"]),
       st.floats(0.0001, 0.01))
def test_round_trip_property(geom, syntax, flavor, spacing):
    fc, fr, tc, tr = geom
    spec = FixtureSpec(total_columns=tc, total_rows=tr, frame_columns=fc, frame_rows=fr, transfer_syntax=syntax,
                       flavor=flavor, pixel_spacing_mm=spacing)
    info = extract_wsi_info(parse_part10(write_synthetic_wsi(spec)))
    assert (info.total_pixel_matrix_columns, info.total_pixel_matrix_rows) == (tc, tr)
    assert (info.frame_columns, info.frame_rows) == (fc, fr)
    assert info.number_of_frames == spec.number_of_frames
    assert info.image_type_flavor == flavor
    assert info.pixel_spacing_mm[0] == pytest.approx(spacing, rel=1e-9)
    frames = sorted(frame_for_tile(info, c, r) for c in range(info.tiles_per_row) for r in range(info.tiles_per_column))
    assert frames == list(range(info.number_of_frames))


def test_frames_tile_the_matrix():
    spec = FixtureSpec(total_columns=40, total_rows=20, pattern="checkerboard")
    matrix = render_matrix(spec)
    frames = render_frames(spec)
    assert len(frames) == spec.number_of_frames
    assert np.array_equal(frames[0], matrix[:16, :16])


@given(st.data())
def test_truncations_raise_structured_errors(data):
    blob = write_synthetic_wsi(FixtureSpec(total_columns=32, total_rows=32))
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(DicomError):
        ds = parse_part10(blob[:cut])
        info = extract_wsi_info(ds)
        for k in range(info.number_of_frames):
            read_frame(ds, info, k)
