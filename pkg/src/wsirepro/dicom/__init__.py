"""DICOM Part-10 parsing and Slide Microscopy frame access."""

from .dataset import (
    EXPLICIT_VR_LE,
    IMPLICIT_VR_LE,
    JPEG_BASELINE,
    DataElement,
    DataSet,
    DicomError,
    ElementOrderError,
    Elements,
    Encapsulated,
    MalformedSequence,
    MissingAttribute,
    MissingMagic,
    TruncatedElement,
    UnsupportedTransferSyntax,
    parse_part10,
)
from .fixtures import FixtureSpec, InvalidSpec, render_frames, render_matrix, write_synthetic_wsi
from .wsi import (
    WSI_SOP_CLASS_UID,
    CodecRegistry,
    CodecUnavailable,
    DecodeFailure,
    FrameCodec,
    FrameImage,
    FrameOutOfRange,
    InconsistentGeometry,
    NotSlideMicroscopy,
    OutOfGrid,
    PillowJpegCodec,
    UnsupportedOrganization,
    WsiInstanceInfo,
    default_codecs,
    extract_wsi_info,
    frame_for_tile,
    read_frame,
)

__all__ = [name for name in dir() if not name.startswith("_")]
