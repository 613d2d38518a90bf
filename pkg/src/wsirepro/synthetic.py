"""Synthetic cohorts: DICOM slides plus a catalog manifest pointing at them.

Each class gets its own tissue colour family, so the reference classifier can
separate them; per-slide jitter and per-pixel noise keep tiles distinct.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import CLASSES, CatalogRecord, write_catalog
from .dicom import FixtureSpec, write_synthetic_wsi
from .evaluation import SUBSETS, make_split

CLASS_RGB = {"normal": (228, 150, 196), "LUAD": (168, 88, 178), "LSCC": (112, 48, 128)}
_COLLECTION = {"LUAD": ("SYN-LUAD", "01"), "LSCC": ("SYN-LUSC", "01")}


@dataclass(frozen=True)
class SyntheticSlide:
    patient_id: str
    reference_class: str
    seed: int


def balanced_classes(patient_ids: Sequence[str], proportions, seed: int) -> dict[str, str]:
    """Classes for ``patient_ids`` cycling through CLASSES within each split subset.

    The split depends only on the patient IDs and the seed, so assigning classes
    after splitting yields subsets whose class counts differ by at most one.
    """
    split = make_split(patient_ids, proportions, seed)
    classes: dict[str, str] = {}
    for subset in SUBSETS:
        for i, patient in enumerate(split.patients(subset)):
            classes[patient] = CLASSES[i % len(CLASSES)]
    return classes


def build_cohort(directory, slides: Sequence[SyntheticSlide], *, version_id: str = "idc_v11",
                 matrix_px: int = 512, frame_px: int = 256, spacing_mm: float = 0.001,
                 extra_levels: Sequence[float] = (), noise: int = 18, jitter: int = 10) -> Path:
    """Write one DICOM series per slide under ``directory`` and return the catalog path.

    ``extra_levels`` adds further VOLUME instances per series at the given
    spacings (mm/px), each covering the same physical area.  ``jitter`` bounds
    the per-slide shift of the tissue colour; large values make classes overlap.
    """
    directory = Path(directory)
    (directory / "slides").mkdir(parents=True, exist_ok=True)
    records: list[CatalogRecord] = []
    for n, slide in enumerate(slides):
        rng = np.random.default_rng(slide.seed)
        base = np.asarray(CLASS_RGB[slide.reference_class])
        tissue = tuple(int(v) for v in np.clip(base + rng.integers(-jitter, jitter + 1, size=3), 0, 210))
        cells = (matrix_px // 256) ** 2
        blob_cells = tuple(sorted(rng.choice(cells, size=int(rng.integers(max(1, cells // 2), cells + 1)), replace=False).tolist()))
        if slide.reference_class == "normal":
            collection = ("SYN-LUAD", "SYN-LUSC")[n % 2]
            code = "11"
        else:
            collection, code = _COLLECTION[slide.reference_class]
        series_uid = f"2.25.{900000 + n}"
        study_uid = f"2.25.{800000 + n}"
        for level, spacing in enumerate((spacing_mm, *extra_levels)):
            factor = spacing_mm / spacing
            size = int(round(matrix_px * factor))
            cell = int(round(256 * factor))
            frame = min(frame_px, size)
            spec = FixtureSpec(
                total_columns=size, total_rows=size, frame_columns=frame, frame_rows=frame,
                pixel_spacing_mm=spacing, pattern="tissue_blob", tissue_rgb=tissue, blob_cells=blob_cells,
                cell_px=cell, noise=noise, noise_seed=slide.seed * 16 + level, patient_id=slide.patient_id,
                study_instance_uid=study_uid, series_instance_uid=series_uid,
                sop_instance_uid=f"{series_uid}.{level + 1}",
            )
            name = f"slides/{spec.sop_instance_uid}.dcm"
            (directory / name).write_bytes(write_synthetic_wsi(spec))
            records.append(CatalogRecord(
                collection_id=collection, patient_id=slide.patient_id, study_instance_uid=study_uid,
                series_instance_uid=series_uid, sop_instance_uid=spec.sop_instance_uid, modality="SM",
                gcs_url=f"local://{name}", image_type_flavor="VOLUME", sample_type_code=code,
                pixel_spacing_mm=spacing, extra=(("stain", "HE"),),
            ))
    catalog = directory / "catalog.tsv"
    write_catalog(catalog, version_id, records)
    return catalog


def cohort_for_split(directory, n_patients: int, proportions, split_seed: int, **kwargs) -> Path:
    """Cohort of one slide per patient with classes balanced inside every subset."""
    patients = [f"SYN-{i:04d}" for i in range(n_patients)]
    classes = balanced_classes(patients, proportions, split_seed)
    slides = [SyntheticSlide(p, classes[p], seed=1000 + i) for i, p in enumerate(patients)]
    return build_cohort(directory, slides, **kwargs)


def cohort_per_class(directory, per_class: int, seed: int = 0, **kwargs) -> Path:
    slides = []
    for c, cls in enumerate(CLASSES):
        for i in range(per_class):
            slides.append(SyntheticSlide(f"SYN-{cls}-{i:03d}", cls, seed=seed * 10007 + c * 1000 + i))
    return build_cohort(directory, slides, **kwargs)
