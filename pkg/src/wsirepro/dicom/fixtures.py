"""Deterministic synthetic Slide Microscopy files for tests and demos.

Not clinical-grade DICOM: only the attributes the reader needs are written.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import EXPLICIT_VR_LE, IMPLICIT_VR_LE, JPEG_BASELINE, LONG_VRS, DICTIONARY, KEYWORDS, Tag
from .wsi import FLAVORS, WSI_SOP_CLASS_UID, PillowJpegCodec
from ..errors import WsiReproError

PATTERNS = ("frame_index", "solid", "checkerboard", "tissue_blob")
TRANSFER_SYNTAXES = {"explicit": EXPLICIT_VR_LE, "implicit": IMPLICIT_VR_LE, "jpeg": JPEG_BASELINE}
IMPLEMENTATION_UID = "1.2.826.0.1.3680043.10.1.1"


class InvalidSpec(WsiReproError):
    pass


@dataclass(frozen=True)
class FixtureSpec:
    """Everything that determines the bytes of one synthetic instance.

    ``pattern`` selects the pixel content:

    * ``frame_index``: frame k filled with gray value ``k % 256``
    * ``solid``: every pixel ``fill_value``
    * ``checkerboard``: 1-px alternation of 0 and 255
    * ``tissue_blob``: ``background_rgb`` everywhere except the cells listed
      in ``blob_cells`` (row-major over a grid of ``cell_px`` squares), whose
      left ``blob_fraction`` of columns are painted ``tissue_rgb`` plus
      uniform noise of +/-``noise``.
    """

    total_columns: int = 64
    total_rows: int = 48
    frame_columns: int = 16
    frame_rows: int = 16
    pixel_spacing_mm: float = 0.001
    modality: str = "SM"
    flavor: str = "VOLUME"
    pattern: str = "frame_index"
    fill_value: int = 0
    tissue_rgb: tuple[int, int, int] = (150, 80, 170)
    background_rgb: tuple[int, int, int] = (245, 245, 245)
    blob_cells: tuple[int, ...] = ()
    cell_px: int = 256
    blob_fraction: float = 1.0
    noise: int = 0
    noise_seed: int = 0
    transfer_syntax: str = "explicit"
    declared_transfer_syntax: str = ""
    dimension_organization: str = "TILED_FULL"
    sop_class_uid: str = WSI_SOP_CLASS_UID
    patient_id: str = "PATIENT-0"
    study_instance_uid: str = ""
    series_instance_uid: str = ""
    sop_instance_uid: str = ""
    omit: tuple[str, ...] = ()
    offset_table: bool = True

    def validate(self) -> None:
        if min(self.total_columns, self.total_rows, self.frame_columns, self.frame_rows) <= 0:
            raise InvalidSpec("matrix and frame dimensions must be positive")
        if self.frame_columns > self.total_columns or self.frame_rows > self.total_rows:
            raise InvalidSpec("frame larger than the total pixel matrix")
        if max(self.frame_columns, self.frame_rows) > 0xFFFF:
            raise InvalidSpec("frame dimensions exceed 16 bits")
        if not self.pixel_spacing_mm > 0:
            raise InvalidSpec("pixel spacing must be positive")
        if self.pattern not in PATTERNS:
            raise InvalidSpec(f"unknown pattern {self.pattern!r}")
        if self.flavor not in FLAVORS:
            raise InvalidSpec(f"unknown flavor {self.flavor!r}")
        if self.transfer_syntax not in TRANSFER_SYNTAXES:
            raise InvalidSpec(f"transfer syntax must be one of {sorted(TRANSFER_SYNTAXES)}")
        if not 0 <= self.fill_value <= 255 or not 0 <= self.noise <= 255:
            raise InvalidSpec("fill_value and noise must be within 0..255")
        if self.cell_px <= 0 or not 0 < self.blob_fraction <= 1:
            raise InvalidSpec("cell_px must be positive and blob_fraction in (0, 1]")
        for rgb in (self.tissue_rgb, self.background_rgb):
            if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
                raise InvalidSpec(f"bad RGB triple {rgb}")
        unknown = [k for k in self.omit if k not in KEYWORDS]
        if unknown:
            raise InvalidSpec(f"cannot omit unknown attributes {unknown}")

    @property
    def number_of_frames(self) -> int:
        return -(-self.total_columns // self.frame_columns) * -(-self.total_rows // self.frame_rows)

    def uid(self, role: str) -> str:
        explicit = getattr(self, f"{role}_instance_uid")
        if explicit:
            return explicit
        seed = repr(dataclasses.astuple(self)) + role
        return "2.25." + str(int(hashlib.sha256(seed.encode()).hexdigest()[:30], 16))

    # Plain key=value text, as accepted by the ``fixture`` CLI command.

    @classmethod
    def from_text(cls, text: str) -> "FixtureSpec":
        values: dict[str, object] = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise InvalidSpec(f"line {lineno}: unknown or malformed entry {line!r}")
            default = types[key].default
            try:
                if isinstance(default, bool):
                    values[key] = raw.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    values[key] = int(raw)
                elif isinstance(default, float):
                    values[key] = float(raw)
                elif isinstance(default, tuple):
                    parts = [p.strip() for p in raw.split(",") if p.strip()]
                    values[key] = tuple(p if key == "omit" else int(p) for p in parts)
                else:
                    values[key] = raw
            except ValueError as exc:
                raise InvalidSpec(f"line {lineno}: {exc}") from None
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


def _pad(value: bytes, vr: str) -> bytes:
    if len(value) % 2:
        value += b"\0" if vr in ("UI", "OB", "UN") else b" "
    return value


def _encode_element(tag: Tag, vr: str, value: bytes, explicit: bool) -> bytes:
    value = _pad(value, vr)
    head = struct.pack("<HH", *tag)
    if not explicit:
        return head + struct.pack("<I", len(value)) + value
    if vr in LONG_VRS:
        return head + vr.encode() + b"\0\0" + struct.pack("<I", len(value)) + value
    return head + vr.encode() + struct.pack("<H", len(value)) + value


def _encode_sequence(tag: Tag, items: list[bytes], explicit: bool, undefined: bool) -> bytes:
    head = struct.pack("<HH", *tag) + (b"SQ\0\0" if explicit else b"")
    if undefined:
        body = b"".join(struct.pack("<HHI", 0xFFFE, 0xE000, 0xFFFFFFFF) + it + struct.pack("<HHI", 0xFFFE, 0xE00D, 0) for it in items)
        return head + struct.pack("<I", 0xFFFFFFFF) + body + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)
    body = b"".join(struct.pack("<HHI", 0xFFFE, 0xE000, len(it)) + it for it in items)
    return head + struct.pack("<I", len(body)) + body


def _value(keyword: str, value) -> tuple[Tag, str, bytes]:
    tag = KEYWORDS[keyword]
    vr = DICTIONARY[tag][0]
    if vr == "US":
        raw = struct.pack("<H", value)
    elif vr == "UL":
        raw = struct.pack("<I", value)
    elif vr == "OB":
        raw = bytes(value)
    else:
        raw = str(value).encode("latin-1")
    return tag, vr, raw


def _ds(value: float) -> str:
    text = repr(float(value))
    return text if len(text) <= 16 else f"{value:.10g}"


def render_matrix(spec: FixtureSpec) -> np.ndarray:
    """Full ``(rows, columns, 3)`` pixel matrix for matrix-level patterns."""
    shape = (spec.total_rows, spec.total_columns, 3)
    if spec.pattern == "solid":
        return np.full(shape, spec.fill_value, dtype=np.uint8)
    if spec.pattern == "checkerboard":
        yy, xx = np.indices(shape[:2])
        board = np.where((xx + yy) % 2 == 0, 0, 255).astype(np.uint8)
        return np.repeat(board[:, :, None], 3, axis=2)
    if spec.pattern == "tissue_blob":
        image = np.empty(shape, dtype=np.uint8)
        image[:] = np.asarray(spec.background_rgb, dtype=np.uint8)
        cells_x = spec.total_columns // spec.cell_px
        cells_y = spec.total_rows // spec.cell_px
        rng = np.random.default_rng(spec.noise_seed)
        painted = max(1, int(round(spec.cell_px * spec.blob_fraction)))
        for cell in sorted(set(spec.blob_cells)):
            if not 0 <= cell < cells_x * cells_y:
                raise InvalidSpec(f"blob cell {cell} outside {cells_x}x{cells_y} cell grid")
            cy, cx = divmod(cell, cells_x)
            y0, x0 = cy * spec.cell_px, cx * spec.cell_px
            block = np.broadcast_to(np.asarray(spec.tissue_rgb, dtype=np.int16), (spec.cell_px, painted, 3))
            if spec.noise:
                block = block + rng.integers(-spec.noise, spec.noise + 1, size=block.shape, dtype=np.int16)
            image[y0 : y0 + spec.cell_px, x0 : x0 + painted] = np.clip(block, 0, 255).astype(np.uint8)
        return image
    raise InvalidSpec(f"pattern {spec.pattern!r} is frame-level")


def render_frames(spec: FixtureSpec) -> list[np.ndarray]:
    """Frames in TILED_FULL order; edge frames padded with zeros."""
    fr, fc = spec.frame_rows, spec.frame_columns
    per_row = -(-spec.total_columns // fc)
    if spec.pattern == "frame_index":
        return [np.full((fr, fc, 3), k % 256, dtype=np.uint8) for k in range(spec.number_of_frames)]
    matrix = render_matrix(spec)
    frames = []
    for k in range(spec.number_of_frames):
        row, col = divmod(k, per_row)
        frame = np.zeros((fr, fc, 3), dtype=np.uint8)
        part = matrix[row * fr : (row + 1) * fr, col * fc : (col + 1) * fc]
        frame[: part.shape[0], : part.shape[1]] = part
        frames.append(frame)
    return frames


def _encapsulate(fragments: list[bytes], with_offset_table: bool) -> bytes:
    fragments = [_pad(f, "OB") for f in fragments]
    offsets, pos = [], 0
    for frag in fragments:
        offsets.append(pos)
        pos += 8 + len(frag)
    table = struct.pack(f"<{len(offsets)}I", *offsets) if with_offset_table else b""
    out = struct.pack("<HH", 0x7FE0, 0x0010) + b"OB\0\0" + struct.pack("<I", 0xFFFFFFFF)
    out += struct.pack("<HHI", 0xFFFE, 0xE000, len(table)) + table
    for frag in fragments:
        out += struct.pack("<HHI", 0xFFFE, 0xE000, len(frag)) + frag
    return out + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)


def write_synthetic_wsi(spec: FixtureSpec) -> bytes:
    """Serialize ``spec`` to Part-10 bytes; identical specs give identical bytes."""
    spec.validate()
    ts_uid = TRANSFER_SYNTAXES[spec.transfer_syntax]
    declared = spec.declared_transfer_syntax or ts_uid
    explicit = spec.transfer_syntax != "implicit"
    sop_uid = spec.uid("sop")

    meta_body = b"".join(
        _encode_element(*_value(kw, v), explicit=True)
        for kw, v in [
            ("FileMetaInformationVersion", b"\x00\x01"),
            ("MediaStorageSOPClassUID", spec.sop_class_uid),
            ("MediaStorageSOPInstanceUID", sop_uid),
            ("TransferSyntaxUID", declared),
            ("ImplementationClassUID", IMPLEMENTATION_UID),
        ]
    )
    meta = _encode_element(*_value("FileMetaInformationGroupLength", len(meta_body)), explicit=True) + meta_body

    frames = render_frames(spec)
    jpeg = spec.transfer_syntax == "jpeg"
    attributes = {
        "ImageType": f"DERIVED\\PRIMARY\\{spec.flavor}\\NONE",
        "SOPClassUID": spec.sop_class_uid,
        "SOPInstanceUID": sop_uid,
        "Modality": spec.modality,
        "PatientID": spec.patient_id,
        "StudyInstanceUID": spec.uid("study"),
        "SeriesInstanceUID": spec.uid("series"),
        "DimensionOrganizationType": spec.dimension_organization,
        "SamplesPerPixel": 3,
        "PhotometricInterpretation": "YBR_FULL" if jpeg else "RGB",
        "PlanarConfiguration": 0,
        "NumberOfFrames": str(spec.number_of_frames),
        "Rows": spec.frame_rows,
        "Columns": spec.frame_columns,
        "BitsAllocated": 8,
        "BitsStored": 8,
        "HighBit": 7,
        "PixelRepresentation": 0,
        "TotalPixelMatrixColumns": spec.total_columns,
        "TotalPixelMatrixRows": spec.total_rows,
    }
    chunks: list[tuple[Tag, bytes]] = []
    for kw, v in attributes.items():
        if kw in spec.omit:
            continue
        tag, vr, raw = _value(kw, v)
        chunks.append((tag, _encode_element(tag, vr, raw, explicit)))

    if "PixelSpacing" not in spec.omit:
        spacing = _ds(spec.pixel_spacing_mm)
        measures = b"".join(
            _encode_element(*_value(kw, v), explicit=explicit)
            for kw, v in [("SliceThickness", "0.001"), ("PixelSpacing", f"{spacing}\\{spacing}")]
        )
        inner = _encode_sequence(KEYWORDS["PixelMeasuresSequence"], [measures], explicit, undefined=False)
        shared = _encode_sequence(KEYWORDS["SharedFunctionalGroupsSequence"], [inner], explicit, undefined=True)
        chunks.append((KEYWORDS["SharedFunctionalGroupsSequence"], shared))

    if "PixelData" not in spec.omit:
        if jpeg:
            codec = PillowJpegCodec()
            pixel = _encapsulate([codec.encode(f) for f in frames], spec.offset_table)
        else:
            raw = b"".join(f.tobytes() for f in frames)
            pixel = _encode_element((0x7FE0, 0x0010), "OB" if explicit else "OW", raw, explicit)
        chunks.append(((0x7FE0, 0x0010), pixel))

    chunks.sort(key=lambda c: c[0])
    return b"\0" * 128 + b"DICM" + meta + b"".join(c for _, c in chunks)
