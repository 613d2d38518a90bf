"""Slide Microscopy instance metadata and per-frame pixel access."""

from __future__ import annotations

import io
import math
import threading
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .dataset import (
    EXPLICIT_VR_LE,
    IMPLICIT_VR_LE,
    JPEG_BASELINE,
    PIXEL_DATA,
    DataSet,
    DicomError,
    Encapsulated,
    MissingAttribute,
    tag_of,
)

WSI_SOP_CLASS_UID = "1.2.840.10008.5.1.4.1.1.77.1.6"
FLAVORS = ("VOLUME", "LABEL", "OVERVIEW", "THUMBNAIL")
ORGANIZATIONS = ("TILED_FULL", "TILED_SPARSE")


class NotSlideMicroscopy(DicomError):
    pass


class UnsupportedOrganization(DicomError):
    pass


class InconsistentGeometry(DicomError):
    """Frame count disagrees with the TILED_FULL tile grid."""


class OutOfGrid(DicomError):
    pass


class FrameOutOfRange(DicomError):
    pass


class CodecUnavailable(DicomError):
    pass


class DecodeFailure(DicomError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass(frozen=True)
class WsiInstanceInfo:
    sop_instance_uid: str
    series_instance_uid: str
    patient_id: str
    modality: str
    image_type_flavor: str
    total_pixel_matrix_columns: int
    total_pixel_matrix_rows: int
    frame_columns: int
    frame_rows: int
    number_of_frames: int
    pixel_spacing_mm: tuple[float, float]
    photometric_interpretation: str
    dimension_organization: str
    study_instance_uid: str = ""

    @property
    def tiles_per_row(self) -> int:
        return -(-self.total_pixel_matrix_columns // self.frame_columns)

    @property
    def tiles_per_column(self) -> int:
        return -(-self.total_pixel_matrix_rows // self.frame_rows)

    @property
    def spacing_um(self) -> float:
        """Mean of row and column spacing in micrometres per pixel."""
        return 500.0 * (self.pixel_spacing_mm[0] + self.pixel_spacing_mm[1])


@dataclass(frozen=True)
class FrameImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    @property
    def channels(self) -> int:
        return 3


def _pixel_spacing(ds: DataSet) -> tuple[float, float]:
    elements = ds.elements
    shared = "SharedFunctionalGroupsSequence"
    if shared in elements:
        for item in elements.sequence(shared):
            if "PixelMeasuresSequence" in item:
                for measures in item.sequence("PixelMeasuresSequence"):
                    if "PixelSpacing" in measures:
                        return (measures.number("PixelSpacing", 0), measures.number("PixelSpacing", 1))
    if "PixelSpacing" in elements:
        return (elements.number("PixelSpacing", 0), elements.number("PixelSpacing", 1))
    raise MissingAttribute(tag_of("PixelSpacing"), "no Pixel Measures in shared functional groups")


def extract_wsi_info(ds: DataSet) -> WsiInstanceInfo:
    """Read the Slide Microscopy attributes needed for tiling from ``ds``."""
    el = ds.elements
    sop_class = el.string("SOPClassUID")
    modality = el.string("Modality")
    if sop_class != WSI_SOP_CLASS_UID or modality != "SM":
        raise NotSlideMicroscopy(f"SOP class {sop_class}, modality {modality}")

    organization = el.string("DimensionOrganizationType")
    if organization == "TILED_SPARSE":
        raise UnsupportedOrganization("TILED_SPARSE")
    if organization not in ORGANIZATIONS:
        raise UnsupportedOrganization(organization)

    flavor = el.string("ImageType", 2)
    if flavor not in FLAVORS:
        raise MissingAttribute(tag_of("ImageType"), f"unknown flavor {flavor!r}")

    spacing = _pixel_spacing(ds)
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise MissingAttribute(tag_of("PixelSpacing"), f"non-positive spacing {spacing}")

    info = WsiInstanceInfo(
        sop_instance_uid=el.string("SOPInstanceUID"),
        series_instance_uid=el.string("SeriesInstanceUID"),
        study_instance_uid=el.string("StudyInstanceUID") if "StudyInstanceUID" in el else "",
        patient_id=el.string("PatientID") if el.strings("PatientID") else "",
        modality=modality,
        image_type_flavor=flavor,
        total_pixel_matrix_columns=el.integer("TotalPixelMatrixColumns"),
        total_pixel_matrix_rows=el.integer("TotalPixelMatrixRows"),
        frame_columns=el.integer("Columns"),
        frame_rows=el.integer("Rows"),
        number_of_frames=el.integer("NumberOfFrames"),
        pixel_spacing_mm=spacing,
        photometric_interpretation=el.string("PhotometricInterpretation"),
        dimension_organization=organization,
    )
    if min(info.total_pixel_matrix_columns, info.total_pixel_matrix_rows, info.frame_columns, info.frame_rows) <= 0:
        raise InconsistentGeometry("zero-sized pixel matrix or frame")
    expected = info.tiles_per_row * info.tiles_per_column
    if info.number_of_frames != expected:
        raise InconsistentGeometry(f"NumberOfFrames {info.number_of_frames}, TILED_FULL grid needs {expected}")
    return info


def frame_for_tile(info: WsiInstanceInfo, tile_col: int, tile_row: int) -> int:
    """Row-major frame index of a TILED_FULL tile (0-based)."""
    if info.dimension_organization != "TILED_FULL":
        raise UnsupportedOrganization(info.dimension_organization)
    if not (0 <= tile_col < info.tiles_per_row and 0 <= tile_row < info.tiles_per_column):
        raise OutOfGrid(
            f"tile ({tile_col}, {tile_row}) outside {info.tiles_per_row}x{info.tiles_per_column} grid"
        )
    return tile_row * info.tiles_per_row + tile_col


class FrameCodec(Protocol):
    def decode(self, data: bytes, rows: int, columns: int) -> np.ndarray:
        """Return an ``(rows, columns, 3)`` uint8 array."""


class PillowJpegCodec:
    """Baseline JPEG via Pillow; stateless, so one instance is shared."""

    def decode(self, data: bytes, rows: int, columns: int) -> np.ndarray:
        from PIL import Image

        with Image.open(io.BytesIO(data)) as image:
            image.draft("RGB", (columns, rows))
            array = np.asarray(image.convert("RGB"))
        if array.shape != (rows, columns, 3):
            raise ValueError(f"decoded shape {array.shape}, expected {(rows, columns, 3)}")
        return array

    def encode(self, pixels: np.ndarray, quality: int = 95) -> bytes:
        from PIL import Image

        out = io.BytesIO()
        Image.fromarray(pixels, "RGB").save(out, format="JPEG", quality=quality, subsampling=0)
        return out.getvalue()


class CodecRegistry:
    """Maps encapsulated transfer syntax UIDs to frame codecs."""

    def __init__(self, codecs: dict[str, FrameCodec] | None = None):
        self._codecs = dict(codecs or {})
        self._lock = threading.Lock()

    def register(self, transfer_syntax: str, codec: FrameCodec) -> None:
        with self._lock:
            self._codecs[transfer_syntax] = codec

    def get(self, transfer_syntax: str) -> FrameCodec:
        try:
            return self._codecs[transfer_syntax]
        except KeyError:
            raise CodecUnavailable(f"no codec registered for {transfer_syntax}") from None


def default_codecs() -> CodecRegistry:
    return CodecRegistry({JPEG_BASELINE: PillowJpegCodec()})


def _frame_fragments(pixel: Encapsulated, frame_index: int, number_of_frames: int) -> tuple[bytes, int]:
    frags = pixel.fragments
    if pixel.offset_table:
        if len(pixel.offset_table) != number_of_frames:
            raise DecodeFailure("offset table size differs from frame count", pixel.fragment_positions[0] if frags else 0)
        start = pixel.offset_table[frame_index]
        stop = pixel.offset_table[frame_index + 1] if frame_index + 1 < number_of_frames else None
        chosen = [
            i for i, off in enumerate(pixel.fragment_offsets) if off >= start and (stop is None or off < stop)
        ]
    elif len(frags) == number_of_frames:
        chosen = [frame_index]
    else:
        # No offset table: each frame starts with a JPEG SOI marker.
        starts = [i for i, f in enumerate(frags) if bytes(f[:2]) == b"\xff\xd8"]
        if len(starts) != number_of_frames:
            raise DecodeFailure("cannot reconstruct frame boundaries from fragments", 0)
        starts.append(len(frags))
        chosen = list(range(starts[frame_index], starts[frame_index + 1]))
    if not chosen:
        raise DecodeFailure(f"no fragments for frame {frame_index}", 0)
    data = b"".join(bytes(frags[i]) for i in chosen)
    return data, pixel.fragment_positions[chosen[0]]


def read_frame(ds: DataSet, info: WsiInstanceInfo, frame_index: int, codecs: CodecRegistry | None = None) -> FrameImage:
    """Decode one frame into an RGB :class:`FrameImage`."""
    if not 0 <= frame_index < info.number_of_frames:
        raise FrameOutOfRange(f"frame {frame_index} not in [0, {info.number_of_frames})")
    if PIXEL_DATA not in ds.elements:
        raise MissingAttribute(PIXEL_DATA)
    elem = ds.elements[PIXEL_DATA]
    rows, cols = info.frame_rows, info.frame_columns

    if isinstance(elem.value, Encapsulated):
        codec = (codecs or default_codecs()).get(ds.transfer_syntax)
        data, offset = _frame_fragments(elem.value, frame_index, info.number_of_frames)
        try:
            pixels = np.ascontiguousarray(codec.decode(data, rows, cols), dtype=np.uint8)
        except Exception as exc:
            raise DecodeFailure(f"frame {frame_index}: {exc}", offset) from exc
        return FrameImage(cols, rows, pixels)

    if ds.transfer_syntax not in (EXPLICIT_VR_LE, IMPLICIT_VR_LE):
        raise DecodeFailure(f"native pixel data under {ds.transfer_syntax}", elem.position)
    el = ds.elements
    if el.integer("SamplesPerPixel") != 3 or el.integer("BitsAllocated") != 8:
        raise DecodeFailure("only 8-bit RGB native pixel data is supported", elem.position)
    if "PlanarConfiguration" in el and el.integer("PlanarConfiguration") != 0:
        raise DecodeFailure("planar configuration 1 unsupported", elem.position)
    stride = rows * cols * 3
    start = frame_index * stride
    raw = elem.value
    if start + stride > len(raw):
        raise DecodeFailure(f"pixel data too short for frame {frame_index}", elem.position + start)
    pixels = np.frombuffer(raw[start : start + stride], dtype=np.uint8).reshape(rows, cols, 3)
    return FrameImage(cols, rows, pixels)
