"""Part-10 DICOM parsing: preamble, file meta, explicit/implicit VR little endian.

Pixel data is kept as a zero-copy view into the input buffer; encapsulated
pixel data is split into its Basic Offset Table and fragments but never
decoded here.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Iterator, Union

from ..errors import WsiReproError

Tag = tuple[int, int]

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE = "1.2.840.10008.1.2"
JPEG_BASELINE = "1.2.840.10008.1.2.4.50"
SUPPORTED_TRANSFER_SYNTAXES = frozenset({EXPLICIT_VR_LE, IMPLICIT_VR_LE, JPEG_BASELINE})

UNDEFINED_LENGTH = 0xFFFFFFFF
ITEM = (0xFFFE, 0xE000)
ITEM_DELIMITER = (0xFFFE, 0xE00D)
SEQUENCE_DELIMITER = (0xFFFE, 0xE0DD)
PIXEL_DATA = (0x7FE0, 0x0010)
TRANSFER_SYNTAX_UID = (0x0002, 0x0010)

# VRs whose explicit encoding uses 2 reserved bytes and a 32-bit length.
LONG_VRS = frozenset({"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"})
STRING_VRS = frozenset({"AE", "AS", "CS", "DA", "DS", "DT", "IS", "LO", "LT", "PN", "SH", "ST", "TM", "UC", "UI", "UR", "UT"})
_NUMERIC_FORMATS = {"US": "H", "UL": "I", "SS": "h", "SL": "i", "FL": "f", "FD": "d", "SV": "q", "UV": "Q"}

MAX_DEPTH = 16

# Dictionary for the attributes this package reads; anything else seen in an
# implicit VR stream is kept as opaque UN bytes.
DICTIONARY: dict[Tag, tuple[str, str]] = {
    (0x0002, 0x0000): ("UL", "FileMetaInformationGroupLength"),
    (0x0002, 0x0001): ("OB", "FileMetaInformationVersion"),
    (0x0002, 0x0002): ("UI", "MediaStorageSOPClassUID"),
    (0x0002, 0x0003): ("UI", "MediaStorageSOPInstanceUID"),
    (0x0002, 0x0010): ("UI", "TransferSyntaxUID"),
    (0x0002, 0x0012): ("UI", "ImplementationClassUID"),
    (0x0008, 0x0008): ("CS", "ImageType"),
    (0x0008, 0x0016): ("UI", "SOPClassUID"),
    (0x0008, 0x0018): ("UI", "SOPInstanceUID"),
    (0x0008, 0x0060): ("CS", "Modality"),
    (0x0010, 0x0020): ("LO", "PatientID"),
    (0x0018, 0x0050): ("DS", "SliceThickness"),
    (0x0020, 0x000D): ("UI", "StudyInstanceUID"),
    (0x0020, 0x000E): ("UI", "SeriesInstanceUID"),
    (0x0020, 0x9311): ("CS", "DimensionOrganizationType"),
    (0x0028, 0x0002): ("US", "SamplesPerPixel"),
    (0x0028, 0x0004): ("CS", "PhotometricInterpretation"),
    (0x0028, 0x0006): ("US", "PlanarConfiguration"),
    (0x0028, 0x0008): ("IS", "NumberOfFrames"),
    (0x0028, 0x0010): ("US", "Rows"),
    (0x0028, 0x0011): ("US", "Columns"),
    (0x0028, 0x0030): ("DS", "PixelSpacing"),
    (0x0028, 0x0100): ("US", "BitsAllocated"),
    (0x0028, 0x0101): ("US", "BitsStored"),
    (0x0028, 0x0102): ("US", "HighBit"),
    (0x0028, 0x0103): ("US", "PixelRepresentation"),
    (0x0028, 0x9110): ("SQ", "PixelMeasuresSequence"),
    (0x0048, 0x0006): ("UL", "TotalPixelMatrixColumns"),
    (0x0048, 0x0007): ("UL", "TotalPixelMatrixRows"),
    (0x5200, 0x9229): ("SQ", "SharedFunctionalGroupsSequence"),
    (0x7FE0, 0x0010): ("OB", "PixelData"),
}
KEYWORDS: dict[str, Tag] = {kw: tag for tag, (_, kw) in DICTIONARY.items()}


class DicomError(WsiReproError):
    """Base class for DICOM parsing and decoding failures."""


class MissingMagic(DicomError):
    pass


class UnsupportedTransferSyntax(DicomError):
    pass


class TruncatedElement(DicomError):
    pass


class MalformedSequence(DicomError):
    pass


class ElementOrderError(DicomError):
    """Tags within one nesting level are duplicated or not ascending."""


class MissingAttribute(DicomError):
    def __init__(self, tag: Tag, detail: str = ""):
        self.tag = tag
        keyword = DICTIONARY.get(tag, ("", ""))[1]
        label = f"({tag[0]:04X},{tag[1]:04X})" + (f" {keyword}" if keyword else "")
        super().__init__(label + (f": {detail}" if detail else ""))


def tag_of(key: Union[str, Tag]) -> Tag:
    if isinstance(key, str):
        try:
            return KEYWORDS[key]
        except KeyError:
            raise KeyError(f"unknown keyword {key!r}") from None
    return key


@dataclass(frozen=True)
class Encapsulated:
    """Encapsulated pixel data: offset table plus raw fragments.

    ``fragment_offsets`` are relative to the first fragment item, matching the
    convention of the Basic Offset Table; ``fragment_positions`` are absolute
    byte positions in the source buffer (for error reports).
    """

    offset_table: tuple[int, ...]
    fragments: tuple[memoryview, ...]
    fragment_offsets: tuple[int, ...]
    fragment_positions: tuple[int, ...]


@dataclass(frozen=True)
class DataElement:
    tag: Tag
    vr: str
    value: Union[memoryview, tuple["Elements", ...], Encapsulated]
    position: int = 0

    @property
    def is_sequence(self) -> bool:
        return isinstance(self.value, tuple)


class Elements(Mapping):
    """Immutable, tag-ordered collection of data elements (one nesting level)."""

    def __init__(self, elements: list[DataElement]):
        self._by_tag = {e.tag: e for e in elements}

    def __getitem__(self, key) -> DataElement:
        return self._by_tag[tag_of(key)]

    def __contains__(self, key) -> bool:
        try:
            return tag_of(key) in self._by_tag
        except KeyError:
            return False

    def __iter__(self) -> Iterator[Tag]:
        return iter(self._by_tag)

    def __len__(self) -> int:
        return len(self._by_tag)

    def __repr__(self) -> str:
        tags = ", ".join(f"({g:04X},{e:04X})" for g, e in self._by_tag)
        return f"Elements([{tags}])"

    # Typed accessors raise MissingAttribute instead of KeyError.

    def _require(self, key) -> DataElement:
        tag = tag_of(key)
        try:
            return self._by_tag[tag]
        except KeyError:
            raise MissingAttribute(tag) from None

    def strings(self, key) -> list[str]:
        elem = self._require(key)
        if elem.is_sequence or isinstance(elem.value, Encapsulated):
            raise MissingAttribute(elem.tag, "not a string value")
        text = bytes(elem.value).decode("latin-1").rstrip("\x00 ")
        return [part.strip("\x00 ") for part in text.split("\\")] if text else []

    def string(self, key, index: int = 0) -> str:
        values = self.strings(key)
        if len(values) <= index:
            raise MissingAttribute(tag_of(key), f"value {index + 1} absent")
        return values[index]

    def numbers(self, key) -> list[float]:
        elem = self._require(key)
        if elem.vr in _NUMERIC_FORMATS:
            fmt = _NUMERIC_FORMATS[elem.vr]
            size = struct.calcsize(fmt)
            raw = bytes(elem.value)
            count = len(raw) // size
            return list(struct.unpack(f"<{count}{fmt}", raw[: count * size]))
        try:
            return [float(v) for v in self.strings(key)]
        except ValueError as exc:
            raise MissingAttribute(elem.tag, f"unparseable number ({exc})") from None

    def number(self, key, index: int = 0) -> float:
        values = self.numbers(key)
        if len(values) <= index:
            raise MissingAttribute(tag_of(key), f"value {index + 1} absent")
        return values[index]

    def integer(self, key, index: int = 0) -> int:
        value = self.number(key, index)
        if not math.isfinite(value) or value != int(value):
            raise MissingAttribute(tag_of(key), f"non-integer value {value}")
        return int(value)

    def sequence(self, key) -> tuple["Elements", ...]:
        elem = self._require(key)
        if not elem.is_sequence:
            raise MissingAttribute(elem.tag, "not a sequence")
        return elem.value


@dataclass(frozen=True)
class DataSet:
    file_meta: Elements
    elements: Elements
    transfer_syntax: str
    preamble: bytes = b""

    def __getattr__(self, name):
        # Convenience: ds.Modality -> first string/number value.
        if name.startswith("_") or name not in KEYWORDS:
            raise AttributeError(name)
        tag = KEYWORDS[name]
        holder = self.file_meta if tag[0] == 0x0002 else self.elements
        vr = DICTIONARY[tag][0]
        if vr in _NUMERIC_FORMATS or vr in ("IS", "DS"):
            values = holder.numbers(tag)
            return values[0] if len(values) == 1 else values
        if vr == "SQ":
            return holder.sequence(tag)
        values = holder.strings(tag)
        return values[0] if len(values) == 1 else values


class _Reader:
    def __init__(self, buf: memoryview, explicit: bool):
        self.buf = buf
        self.explicit = explicit

    def _need(self, pos: int, n: int, what: str) -> None:
        if n < 0 or pos + n > len(self.buf):
            raise TruncatedElement(f"{what} at offset {pos} needs {n} bytes, {max(len(self.buf) - pos, 0)} remain")

    def header(self, pos: int) -> tuple[Tag, str, int, int]:
        """Return (tag, vr, length, value_start) for the element at ``pos``."""
        self._need(pos, 8, "element header")
        group, elem = struct.unpack_from("<HH", self.buf, pos)
        tag = (group, elem)
        if group == 0xFFFE:
            (length,) = struct.unpack_from("<I", self.buf, pos + 4)
            return tag, "", length, pos + 8
        if not self.explicit:
            (length,) = struct.unpack_from("<I", self.buf, pos + 4)
            vr = DICTIONARY.get(tag, ("UN", ""))[0]
            if tag == PIXEL_DATA:
                vr = "OW"
            return tag, vr, length, pos + 8
        vr = bytes(self.buf[pos + 4 : pos + 6]).decode("latin-1")
        if not (len(vr) == 2 and vr.isalpha() and vr.isupper()):
            raise MalformedSequence(f"invalid VR {vr!r} at offset {pos + 4}")
        if vr in LONG_VRS:
            self._need(pos, 12, "element header")
            (length,) = struct.unpack_from("<I", self.buf, pos + 8)
            return tag, vr, length, pos + 12
        (length,) = struct.unpack_from("<H", self.buf, pos + 6)
        return tag, vr, length, pos + 8

    def dataset(self, pos: int, end: int, depth: int, stop_at_item_delimiter: bool) -> tuple[Elements, int]:
        """Parse elements from ``pos`` up to ``end`` (or an item delimiter)."""
        elements: list[DataElement] = []
        last: Tag | None = None
        while pos < end:
            tag, vr, length, start = self.header(pos)
            if tag == ITEM_DELIMITER:
                if not stop_at_item_delimiter:
                    raise MalformedSequence(f"unexpected item delimiter at offset {pos}")
                return Elements(elements), start
            if tag[0] == 0xFFFE:
                raise MalformedSequence(f"unexpected delimiter ({tag[0]:04X},{tag[1]:04X}) at offset {pos}")
            if last is not None and tag <= last:
                raise ElementOrderError(f"tag ({tag[0]:04X},{tag[1]:04X}) at offset {pos} not ascending")
            last = tag
            elem, pos = self.element(tag, vr, length, start, depth)
            elements.append(elem)
            if pos > end:
                raise TruncatedElement(f"element ({tag[0]:04X},{tag[1]:04X}) overruns its container at offset {start}")
        if stop_at_item_delimiter:
            raise MalformedSequence(f"item without delimiter ending at offset {end}")
        return Elements(elements), pos

    def element(self, tag: Tag, vr: str, length: int, start: int, depth: int) -> tuple[DataElement, int]:
        if vr == "SQ" or (length == UNDEFINED_LENGTH and vr == "UN"):
            items, pos = self.sequence(start, length, depth + 1)
            return DataElement(tag, "SQ", items, start), pos
        if length == UNDEFINED_LENGTH:
            if tag == PIXEL_DATA:
                return self.encapsulated(tag, vr, start)
            raise MalformedSequence(f"undefined length on non-sequence ({tag[0]:04X},{tag[1]:04X})")
        self._need(start, length, f"value of ({tag[0]:04X},{tag[1]:04X})")
        return DataElement(tag, vr, self.buf[start : start + length], start), start + length

    def sequence(self, pos: int, length: int, depth: int) -> tuple[tuple[Elements, ...], int]:
        if depth > MAX_DEPTH:
            raise MalformedSequence(f"sequence nesting deeper than {MAX_DEPTH}")
        undefined = length == UNDEFINED_LENGTH
        if not undefined:
            self._need(pos, length, "sequence")
        end = len(self.buf) if undefined else pos + length
        items: list[Elements] = []
        while True:
            if pos >= end:
                if undefined:
                    raise MalformedSequence(f"sequence missing delimiter at offset {pos}")
                if pos != end:
                    raise MalformedSequence(f"sequence items overrun length at offset {pos}")
                return tuple(items), pos
            tag, _, item_len, start = self.header(pos)
            if tag == SEQUENCE_DELIMITER:
                if not undefined:
                    raise MalformedSequence(f"delimiter inside defined-length sequence at offset {pos}")
                return tuple(items), start
            if tag != ITEM:
                raise MalformedSequence(f"expected item tag at offset {pos}, got ({tag[0]:04X},{tag[1]:04X})")
            if item_len == UNDEFINED_LENGTH:
                item, pos = self.dataset(start, end, depth, stop_at_item_delimiter=True)
            else:
                self._need(start, item_len, "sequence item")
                if start + item_len > end:
                    raise MalformedSequence(f"item at offset {pos} overruns its sequence")
                item, pos = self.dataset(start, start + item_len, depth, stop_at_item_delimiter=False)
            items.append(item)

    def encapsulated(self, tag: Tag, vr: str, pos: int) -> tuple[DataElement, int]:
        fragments: list[memoryview] = []
        offsets: list[int] = []
        positions: list[int] = []
        offset_table: tuple[int, ...] | None = None
        first_fragment_pos: int | None = None
        while True:
            if pos >= len(self.buf):
                raise MalformedSequence("encapsulated pixel data missing sequence delimiter")
            item_tag, _, length, start = self.header(pos)
            if item_tag == SEQUENCE_DELIMITER:
                break
            if item_tag != ITEM or length == UNDEFINED_LENGTH:
                raise MalformedSequence(f"bad fragment item at offset {pos}")
            self._need(start, length, "pixel data fragment")
            value = self.buf[start : start + length]
            if offset_table is None:
                if length % 4:
                    raise MalformedSequence("basic offset table length not a multiple of 4")
                offset_table = struct.unpack(f"<{length // 4}I", bytes(value))
            else:
                if first_fragment_pos is None:
                    first_fragment_pos = pos
                fragments.append(value)
                offsets.append(pos - first_fragment_pos)
                positions.append(start)
            pos = start + length
        if offset_table is None:
            raise MalformedSequence("encapsulated pixel data without basic offset table item")
        value = Encapsulated(offset_table, tuple(fragments), tuple(offsets), tuple(positions))
        return DataElement(tag, vr, value, pos), start


def parse_part10(data) -> DataSet:
    """Parse a DICOM Part-10 byte buffer into a :class:`DataSet`.

    ``data`` may be any buffer-protocol object (``bytes``, ``mmap``...); value
    bytes are exposed as memoryviews into it, so no pixel data is copied.
    """
    buf = memoryview(data).cast("B")
    if len(buf) < 132 or bytes(buf[128:132]) != b"DICM":
        raise MissingMagic("input lacks the 128-byte preamble and DICM prefix")

    meta_reader = _Reader(buf, explicit=True)
    meta: list[DataElement] = []
    pos = 132
    group_end: int | None = None
    while pos < len(buf):
        meta_reader._need(pos, 2, "element header")
        (group,) = struct.unpack_from("<H", buf, pos)
        if group != 0x0002:
            break
        tag, vr, length, start = meta_reader.header(pos)
        elem, pos = meta_reader.element(tag, vr, length, start, 0)
        meta.append(elem)
        if tag == (0x0002, 0x0000):
            (group_length,) = struct.unpack("<I", bytes(elem.value)[:4].ljust(4, b"\0"))
            group_end = pos + group_length
    if group_end is not None and pos != group_end:
        if pos < group_end:
            raise TruncatedElement(f"file meta group ends at {pos}, group length promises {group_end}")
        raise MalformedSequence(f"file meta group overruns its declared length at {group_end}")
    file_meta = Elements(meta)
    if TRANSFER_SYNTAX_UID not in file_meta:
        raise MissingAttribute(TRANSFER_SYNTAX_UID)
    ts = file_meta.string(TRANSFER_SYNTAX_UID)
    if ts not in SUPPORTED_TRANSFER_SYNTAXES:
        raise UnsupportedTransferSyntax(ts)

    reader = _Reader(buf, explicit=ts != IMPLICIT_VR_LE)
    elements, _ = reader.dataset(pos, len(buf), 0, stop_at_item_delimiter=False)
    return DataSet(file_meta=file_meta, elements=elements, transfer_syntax=ts, preamble=bytes(buf[:128]))
