"""Declarative experiment manifests, full pipeline runs, and cross-run comparison."""

from __future__ import annotations

import contextlib
import dataclasses
import datetime as _dt
import functools
import json
import logging
import os
import platform
import shlex
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import __version__, canonical
from .catalog import (
    CLASSES,
    CatalogRecord,
    SortSpec,
    derive_reference_class,
    load_catalog,
    parse_where,
    query,
    subsample_stratified,
    to_sql,
)
from .classifier import (
    N_FEATURES,
    ExternalRunner,
    LabeledTile,
    ReferenceModel,
    TrainConfig,
    ValidationSlide,
    classify_external,
    extract_features,
    predict_features,
    select_best_epoch,
    train_reference,
)
from .errors import WsiReproError
from .evaluation import AucWithCi, EvalReport, SlideResult, aggregate_slide, build_report, make_split
from .storage import DEFAULT_ENDPOINT, ObjectUrl, TileCache, fetch_object, parse_url
from .tiling import NoVolumeInstance, TilingParams, _level_key, iterate_tiles, open_slide, open_slide_file

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class ReproError(WsiReproError):
    pass


class InvalidManifest(ReproError):
    pass


class ManifestMismatch(ReproError):
    pass


class RunLocked(ReproError):
    pass


class PipelineError(ReproError):
    """A stage failed; ``cause`` holds the original domain error."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r}: {type(cause).__name__}: {cause}")


# -- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentManifest:
    catalog_path: str
    expected_version: str
    where: str
    order_by: str
    tiling: TilingParams = TilingParams()
    classifier: Mapping[str, Any] = field(default_factory=dict)
    eval_rounds: int = 1000
    eval_level: float = 0.95
    eval_seed: int = 0
    aggregation: str = "mean"
    subsample: Optional[tuple[int, int]] = None  # (per_class_n, seed)
    split: Optional[tuple[tuple[float, float, float], int]] = None  # (proportions, seed)
    mode: str = "stream"
    run_seed: int = 0
    name: str = ""
    base_dir: str = "."
    manifest_version: int = MANIFEST_VERSION

    def __post_init__(self):
        sources = [k for k in ("model_path", "external_command", "train") if k in self.classifier]
        if len(sources) != 1:
            raise InvalidManifest("classifier needs exactly one of model_path, external_command, train")
        if "train" in self.classifier and self.split is None:
            raise InvalidManifest("training requires a split")
        if self.mode not in ("stream", "precache"):
            raise InvalidManifest(f"mode {self.mode!r}")
        if self.manifest_version != MANIFEST_VERSION:
            raise InvalidManifest(f"manifest_version {self.manifest_version} unsupported")
        try:
            parse_where(self.where)
            SortSpec.parse(self.order_by)
        except WsiReproError as exc:
            raise InvalidManifest(f"query: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "manifest_version": self.manifest_version,
            "name": self.name,
            "catalog": {"path": self.catalog_path, "expected_version": self.expected_version},
            "query": {"where": self.where, "order_by": self.order_by},
            "subsample": None if self.subsample is None else {"per_class_n": self.subsample[0], "seed": self.subsample[1]},
            "split": None if self.split is None else {"proportions": list(self.split[0]), "seed": self.split[1]},
            "tiling": self.tiling.to_dict(),
            "classifier": dict(self.classifier),
            "eval": {"rounds": self.eval_rounds, "level": self.eval_level, "seed": self.eval_seed,
                     "aggregation": self.aggregation},
            "mode": self.mode,
            "run_seed": self.run_seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str = ".") -> "ExperimentManifest":
        required = ("manifest_version", "catalog", "query", "tiling", "classifier", "eval", "mode", "run_seed")
        missing = [k for k in required if k not in data]
        if missing:
            raise InvalidManifest(f"missing keys {missing}")
        ev = data["eval"]
        for key in ("rounds", "level", "seed"):
            if key not in ev:
                raise InvalidManifest(f"eval.{key} must be explicit")
        clf = dict(data["classifier"])
        if "train" in clf:
            try:
                TrainConfig(**clf["train"])
            except (TypeError, ValueError) as exc:
                raise InvalidManifest(f"classifier.train: {exc}") from None
        sub, split = data.get("subsample"), data.get("split")
        try:
            return cls(
                manifest_version=int(data["manifest_version"]),
                name=str(data.get("name", "")),
                catalog_path=data["catalog"]["path"],
                expected_version=data["catalog"]["expected_version"],
                where=data["query"]["where"],
                order_by=data["query"]["order_by"],
                subsample=None if sub is None else (int(sub["per_class_n"]), int(sub["seed"])),
                split=None if split is None else (tuple(float(p) for p in split["proportions"]), int(split["seed"])),
                tiling=TilingParams.from_dict(data["tiling"]),
                classifier=clf,
                eval_rounds=int(ev["rounds"]),
                eval_level=float(ev["level"]),
                eval_seed=int(ev["seed"]),
                aggregation=ev.get("aggregation", "mean"),
                mode=data["mode"],
                run_seed=int(data["run_seed"]),
                base_dir=base_dir,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidManifest(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidManifest(f"{path}: {exc}") from None
        return cls.from_dict(data, base_dir=str(path.parent.resolve()))

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())

    @property
    def digest(self) -> str:
        return canonical.digest(self.to_dict())

    def resolve(self, relative: str) -> Path:
        path = Path(relative).expanduser()
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def train_config(self) -> Optional[TrainConfig]:
        return TrainConfig(**self.classifier["train"]) if "train" in self.classifier else None


# -- environment ---------------------------------------------------------------


def _cpu_model() -> str:
    with contextlib.suppress(OSError):
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    return platform.processor() or platform.machine()


@functools.lru_cache(maxsize=None)
def environment_fingerprint(threads: int = 1) -> dict:
    """Platform details stored in every run record."""
    return {
        "os": platform.system(),
        "os_release": platform.release(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_model": _cpu_model(),
        "logical_cores": os.cpu_count() or 1,
        "artifact_version": __version__,
        "threads": threads,
    }


# -- run records -------------------------------------------------------------


@dataclass(frozen=True)
class RunRecord:
    manifest_digest: str
    report: EvalReport
    slide_results_digest: str = ""
    slide_results: tuple[SlideResult, ...] = ()
    environment: Mapping[str, Any] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    wall_time_s: float = 0.0
    training: Mapping[str, Any] = field(default_factory=dict)
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "manifest_digest": self.manifest_digest,
            "label": self.label,
            "report": self.report.to_dict(),
            "slide_results_digest": self.slide_results_digest,
            "slide_results": [r.to_dict() for r in self.slide_results],
            "environment": dict(self.environment),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "wall_time_s": self.wall_time_s,
            "training": dict(self.training),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunRecord":
        return cls(
            manifest_digest=data["manifest_digest"],
            label=data.get("label", ""),
            report=EvalReport.from_dict(data["report"]),
            slide_results_digest=data.get("slide_results_digest", ""),
            slide_results=tuple(SlideResult.from_dict(r) for r in data.get("slide_results", ())),
            environment=dict(data.get("environment", {})),
            started_at=data.get("started_at", ""),
            finished_at=data.get("finished_at", ""),
            wall_time_s=float(data.get("wall_time_s", 0.0)),
            training=dict(data.get("training", {})),
        )

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def slide_results_digest(results: Sequence[SlideResult]) -> str:
    return canonical.digest([r.to_dict() for r in sorted(results, key=lambda r: r.sop_instance_uid)])


def _write_once(path: Path, text: str) -> None:
    """Atomically create ``path``; never overwrite an existing record."""
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_text(text)
    try:
        os.link(tmp, path)
    finally:
        tmp.unlink()


@contextlib.contextmanager
def _run_lock(directory: Path):
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{lock} exists; another run is active in {directory}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- pipeline ------------------------------------------------------------------


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except WsiReproError as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class _SlideTiles:
    record: CatalogRecord
    tile_count: int
    features: np.ndarray
    pixels: list  # only filled for external runners


def select_series_levels(records: Sequence[CatalogRecord], target_spacing_um: float) -> list[CatalogRecord]:
    """One record per series: the VOLUME instance nearest the target spacing."""
    by_series: dict[str, list[CatalogRecord]] = {}
    for r in records:
        by_series.setdefault(r.series_instance_uid, []).append(r)
    chosen = []
    for series, members in by_series.items():
        volumes = [r for r in members if r.image_type_flavor == "VOLUME" and r.pixel_spacing_mm > 0]
        if not volumes:
            raise NoVolumeInstance(f"series {series} has no VOLUME instance with a spacing")
        chosen.append(min(volumes, key=lambda r: _level_key(r.pixel_spacing_mm * 1000.0, target_spacing_um, r.sop_instance_uid)))
    position = {id(r): i for i, r in enumerate(records)}
    return sorted(chosen, key=lambda r: position[id(r)])


class _Pipeline:
    """Stages shared by full runs and standalone training."""

    def __init__(self, manifest: ExperimentManifest, catalog, workdir: Path, *, threads: int = 1,
                 cache_root=None, endpoint: str = DEFAULT_ENDPOINT):
        self.m = manifest
        self.catalog = catalog
        self.threads = threads
        self.endpoint = endpoint
        self.cache = None
        if manifest.mode == "precache":
            self.cache = TileCache(Path(cache_root).expanduser() if cache_root else workdir / "cache")
        self.catalog_dir = manifest.resolve(manifest.catalog_path).parent
        self.slides: list[CatalogRecord] = []
        self.subsets: dict[str, str] = {}
        self.tiled: dict[str, _SlideTiles] = {}

    def open(self, record: CatalogRecord):
        url = parse_url(record.gcs_url, self.endpoint)
        if url.scheme == "local":
            path = Path(url.key)
            if not path.is_absolute():
                path = self.catalog_dir / path
            fetch_object(ObjectUrl("local", "", "", str(path)), (0, 0))  # NotFound before mmap
            return open_slide_file(path)
        return open_slide(fetch_object(url))

    def select(self) -> None:
        m = self.m
        with _stage("query"):
            records = [derive_reference_class(r) for r in query(self.catalog, parse_where(m.where), SortSpec.parse(m.order_by))]
        with _stage("level"):
            slides = select_series_levels(records, m.tiling.target_spacing_um)
        with _stage("subsample"):
            if m.subsample is not None:
                chosen = {r.sop_instance_uid for r in subsample_stratified(slides, *m.subsample)}
                slides = [r for r in slides if r.sop_instance_uid in chosen]
        self.slides = slides
        self.subsets = {r.sop_instance_uid: "test" for r in slides}
        if m.split is not None:
            with _stage("split"):
                split = make_split(slides, *m.split)
                self.subsets = {r.sop_instance_uid: split.subset_of(r.patient_id) for r in slides}

    def tile(self, subsets: Sequence[str], keep_pixels: bool = False) -> None:
        with _stage("tile"):
            for r in self.slides:
                uid = r.sop_instance_uid
                if self.subsets[uid] not in subsets or uid in self.tiled:
                    continue
                sequence = iterate_tiles(self.open(r), self.m.tiling, self.m.mode, self.cache, self.threads)
                features, pixels = [], []
                for tile in sequence:
                    features.append(extract_features(tile))
                    if keep_pixels:
                        pixels.append(tile.pixels)
                feats = np.stack(features) if features else np.empty((0, N_FEATURES))
                self.tiled[uid] = _SlideTiles(r, len(features), feats, pixels)

    def train(self) -> tuple[ReferenceModel, dict]:
        cfg = self.m.train_config
        self.tile(("train", "val"))
        with _stage("train"):
            train_tiles, val_slides = [], []
            for uid, t in self.tiled.items():
                subset, cls = self.subsets[uid], t.record.reference_class
                if subset == "train":
                    train_tiles += [LabeledTile(uid, i, cls, f) for i, f in enumerate(t.features)]
                elif subset == "val":
                    val_slides.append(ValidationSlide(uid, t.record.patient_id, cls, t.features))
            model, history = train_reference(train_tiles, val_slides, cfg)
        training = {
            "history": [h.to_dict() for h in history],
            "best_epoch": select_best_epoch(history),
            "model_digest": model.version_digest,
            "train_slides": sum(1 for uid in self.tiled if self.subsets[uid] == "train"),
            "train_tiles": len(train_tiles),
            "val_slides": len(val_slides),
        }
        return model, training

    def classify(self, model: Optional[ReferenceModel]) -> tuple[list[SlideResult], list[str]]:
        external = "external_command" in self.m.classifier
        self.tile(("test",), keep_pixels=external)
        results: list[SlideResult] = []
        excluded: list[str] = []
        with _stage("classify"):
            runner = None
            if external:
                command = self.m.classifier["external_command"]
                runner = ExternalRunner(shlex.split(command) if isinstance(command, str) else command).start()
            try:
                for r in self.slides:
                    uid = r.sop_instance_uid
                    if self.subsets[uid] != "test":
                        continue
                    t = self.tiled[uid]
                    if t.tile_count == 0:
                        excluded.append(uid)
                        continue
                    if runner is not None:
                        probs = np.stack(classify_external(runner, t.pixels))
                    else:
                        probs = predict_features(model, t.features)
                    agg = aggregate_slide(probs, self.m.aggregation)
                    # Quantize to the persisted precision: reloaded records equal in-memory
                    # ones, and ulp noise from averaging cannot split genuine ties.
                    results.append(SlideResult(uid, r.patient_id, r.reference_class,
                                               tuple(float(f"{p:.12g}") for p in agg), t.tile_count))
            finally:
                if runner is not None:
                    runner.close()
        return results, excluded


def train_model(manifest: ExperimentManifest, *, threads: int = 1, cache_root=None,
                endpoint: str = DEFAULT_ENDPOINT, workdir=None) -> tuple[ReferenceModel, dict]:
    """Run only query, split and training from a manifest whose classifier is ``train``."""
    if manifest.train_config is None:
        raise InvalidManifest("manifest does not describe a training run")
    catalog = load_catalog(manifest.resolve(manifest.catalog_path), manifest.expected_version)
    with contextlib.ExitStack() as stack:
        if workdir is None:
            workdir = stack.enter_context(tempfile.TemporaryDirectory(prefix="wsirepro-train-"))
        pipe = _Pipeline(manifest, catalog, Path(workdir), threads=threads, cache_root=cache_root, endpoint=endpoint)
        pipe.select()
        return pipe.train()


def run_experiment(manifest: ExperimentManifest, out_dir, *, threads: int = 1, cache_root=None,
                   endpoint: str = DEFAULT_ENDPOINT) -> tuple[RunRecord, Path]:
    """Execute ``manifest`` end to end and persist a :class:`RunRecord` under ``out_dir``.

    A trained model is stored next to the record under ``models/``.  On
    failure nothing is left behind but the (unchanged) output directory.
    """
    out_dir = Path(out_dir).expanduser()
    out_dir.mkdir(parents=True, exist_ok=True)
    # Version pinning is checked before anything else is touched.
    catalog = load_catalog(manifest.resolve(manifest.catalog_path), manifest.expected_version)

    with _run_lock(out_dir):
        started = _dt.datetime.now(_dt.timezone.utc)
        t0 = time.perf_counter()
        staging = out_dir / f".staging-{os.getpid()}"
        staging.mkdir()
        try:
            record, model = _execute(manifest, catalog, staging, threads, cache_root, endpoint)
            wall = time.perf_counter() - t0
            finished = _dt.datetime.now(_dt.timezone.utc)
            record = dataclasses.replace(
                record,
                environment=environment_fingerprint(threads),
                started_at=started.isoformat(timespec="microseconds"),
                finished_at=finished.isoformat(timespec="microseconds"),
                wall_time_s=round(wall, 6),
            )
            if record.training:
                models = out_dir / "models"
                models.mkdir(exist_ok=True)
                model_path = models / f"{model.version_digest[:16]}.json"
                if not model_path.exists():
                    _write_once(model_path, model.to_json())
            runs = out_dir / "runs"
            runs.mkdir(exist_ok=True)
            stamp = started.strftime("%Y%m%dT%H%M%S%fZ")
            path = runs / f"{manifest.digest[:16]}_{stamp}.json"
            _write_once(path, record.to_json() + "\n")
            return record, path
        finally:
            shutil.rmtree(staging, ignore_errors=True)


def model_path_for(run_dir, record: RunRecord) -> Path:
    """Where :func:`run_experiment` stored the model trained by ``record``."""
    return Path(run_dir) / "models" / f"{record.training['model_digest'][:16]}.json"


def _execute(m: ExperimentManifest, catalog, staging: Path, threads: int, cache_root,
             endpoint: str) -> tuple[RunRecord, Optional[ReferenceModel]]:
    pipe = _Pipeline(m, catalog, staging, threads=threads, cache_root=cache_root, endpoint=endpoint)
    pipe.select()
    training: dict[str, Any] = {}
    model: Optional[ReferenceModel] = None
    if m.train_config is not None:
        model, training = pipe.train()
    elif "model_path" in m.classifier:
        with _stage("model"):
            model = ReferenceModel.load(m.resolve(m.classifier["model_path"]))
    results, excluded = pipe.classify(model)

    with _stage("evaluate"):
        meta = {
            "catalog_version": catalog.version_id,
            "catalog_digest": catalog.source_digest,
            "manifest_digest": m.digest,
            "query_sql": to_sql(parse_where(m.where), SortSpec.parse(m.order_by), catalog.version_id),
            "model_digest": model.version_digest if model is not None else "external",
            "aggregation": m.aggregation,
        }
        report = build_report(results, meta, rounds=m.eval_rounds, level=m.eval_level, seed=m.eval_seed,
                              excluded=excluded)
        report = dataclasses.replace(report, seeds=_seed_inventory(m))
    ordered = tuple(sorted(results, key=lambda r: r.sop_instance_uid))
    return RunRecord(m.digest, report, slide_results_digest(ordered), ordered, training=training, label=m.name), model


def _seed_inventory(m: ExperimentManifest) -> dict:
    seeds = {"bootstrap": m.eval_seed, "run": m.run_seed}
    if m.subsample is not None:
        seeds["subsample"] = m.subsample[1]
    if m.split is not None:
        seeds["split"] = m.split[1]
    if m.train_config is not None:
        seeds["train"] = m.train_config.seed
    return seeds


# -- comparison ----------------------------------------------------------------


@dataclass(frozen=True)
class ClassDeviation:
    min_auc: float
    max_auc: float
    max_deviation: float


@dataclass(frozen=True)
class ComparisonReport:
    run_count: int
    per_class: Mapping[str, ClassDeviation]
    overall_max_deviation: float
    bitwise_identical: bool

    def to_dict(self) -> dict:
        return {
            "run_count": self.run_count,
            "per_class": {c: dataclasses.asdict(d) for c, d in self.per_class.items()},
            "overall_max_deviation": self.overall_max_deviation,
            "bitwise_identical": self.bitwise_identical,
        }

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())


def compare_runs(records: Sequence[RunRecord]) -> ComparisonReport:
    """Spread (max - min) of each class's point AUC over repeated runs of one manifest."""
    if len(records) < 2:
        raise ManifestMismatch("need at least two run records to compare")
    digests = {r.manifest_digest for r in records}
    if len(digests) != 1:
        raise ManifestMismatch(f"records come from {len(digests)} different manifests")
    per_class = {}
    for cls in CLASSES:
        aucs = [r.report.per_class[cls].auc for r in records]
        per_class[cls] = ClassDeviation(min(aucs), max(aucs), max(aucs) - min(aucs))
    slide_digests = {r.slide_results_digest for r in records}
    bitwise = len(slide_digests) == 1 and "" not in slide_digests
    overall = max(d.max_deviation for d in per_class.values())
    return ComparisonReport(len(records), per_class, overall, bitwise)


def group_by_manifest(records: Sequence[RunRecord]) -> dict[str, list[RunRecord]]:
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.manifest_digest, []).append(r)
    return groups


def format_comparison(records: Sequence[RunRecord], comparison: ComparisonReport, title: str = "") -> str:
    """Fixed-width table: one row per run with AUC and CI per class, then deviations."""
    header = f"{'Run':<24}" + "".join(f"{cls + ' AUC':>12}{'CI':>18}" for cls in CLASSES)
    lines = [title] if title else []
    lines += [header, "-" * len(header)]
    for i, r in enumerate(records, 1):
        cells = ""
        for cls in CLASSES:
            a = r.report.per_class[cls]
            cells += f"{a.auc:>12.3f}{f'[{a.ci_low:.3f}, {a.ci_high:.3f}]':>18}"
        lines.append(f"{(r.label or str(i)):<24}" + cells)
    lines.append("-" * len(header))
    lines.append(f"{'max deviation':<24}" + "".join(f"{comparison.per_class[c].max_deviation:>12.3f}{'':>18}" for c in CLASSES))
    lines.append(f"overall max deviation: {comparison.overall_max_deviation:.3f}")
    lines.append(f"bitwise identical: {'yes' if comparison.bitwise_identical else 'no'}")
    return "\n".join(line.rstrip() for line in lines)


def table1_records() -> dict[str, list[RunRecord]]:
    """The published multi-run AUC table as run records, keyed by experiment."""
    data = json.loads(resources.files("wsirepro.data").joinpath("table1.json").read_text())
    out: dict[str, list[RunRecord]] = {}
    for run in data["runs"]:
        per_class = {c: AucWithCi(run[c]["auc"], run[c]["ci"][0], run[c]["ci"][1]) for c in CLASSES}
        report = EvalReport(per_class, 0, {c: 0 for c in CLASSES}, {"source": "table1"})
        label = f"{run['service']} #{run['run']}"
        out.setdefault(run["experiment"], []).append(
            RunRecord(manifest_digest=f"table1:{run['experiment']}", report=report, label=label)
        )
    return out


# -- miniature experiments -----------------------------------------------------

MINI_PROPORTIONS = (0.25, 0.25, 0.5)
MINI_SPLIT_SEED = 7
MINI_WHERE = "modality = 'SM' AND collection_id IN ('SYN-LUAD', 'SYN-LUSC') AND stain = 'HE'"
MINI_ORDER = "patient_id, sop_instance_uid"


def _write_manifest(path: Path, data: dict) -> Path:
    path.write_text(canonical.dumps(data) + "\n")
    return path


def _base_manifest(name: str, mode: str, rounds: int, eval_seed: int) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "name": name,
        "catalog": {"path": "cohort/catalog.tsv", "expected_version": "idc_v11"},
        "query": {"where": MINI_WHERE, "order_by": MINI_ORDER},
        "subsample": None,
        "split": None,
        "tiling": TilingParams().to_dict(),
        "eval": {"rounds": rounds, "level": 0.95, "seed": eval_seed, "aggregation": "mean"},
        "mode": mode,
        "run_seed": 0,
    }


def miniature_experiment1(directory, *, n_slides: int = 12, epochs: int = 5, proportions=MINI_PROPORTIONS,
                          split_seed: int = MINI_SPLIT_SEED, train_seed: int = 11, rounds: int = 200,
                          mode: str = "stream", **cohort_kw) -> Path:
    """Synthetic cohort plus a manifest that trains the reference model and tests it."""
    from .synthetic import cohort_for_split

    directory = Path(directory)
    cohort_for_split(directory / "cohort", n_slides, proportions, split_seed, **cohort_kw)
    data = _base_manifest("miniature experiment 1", mode, rounds, eval_seed=3)
    data["split"] = {"proportions": list(proportions), "seed": split_seed}
    data["classifier"] = {"train": TrainConfig(epochs=epochs, batch_size=8, learning_rate=0.01, seed=train_seed).to_dict()}
    return _write_manifest(directory / "experiment1.json", data)


def miniature_experiment2(directory, model_path, *, per_class: int = 3, cohort_seed: int = 5, rounds: int = 200,
                          mode: str = "stream", **cohort_kw) -> Path:
    """Synthetic cohort plus a manifest applying an existing model without training."""
    from .synthetic import cohort_per_class

    directory = Path(directory)
    cohort_per_class(directory / "cohort", per_class, cohort_seed, **cohort_kw)
    data = _base_manifest("miniature experiment 2", mode, rounds, eval_seed=4)
    data["classifier"] = {"model_path": os.path.relpath(Path(model_path).resolve(), directory.resolve())}
    return _write_manifest(directory / "experiment2.json", data)


def run_demo(workdir, *, threads: int = 1) -> tuple[RunRecord, RunRecord]:
    """Train on one synthetic cohort, then evaluate the frozen model on a second one."""
    workdir = Path(workdir).expanduser()
    exp1 = miniature_experiment1(workdir / "experiment1")
    trained, _ = run_experiment(ExperimentManifest.load(exp1), workdir / "experiment1" / "out", threads=threads)
    model = model_path_for(workdir / "experiment1" / "out", trained)
    # The second cohort is deliberately shifted in colour, so the frozen model is imperfect on it.
    exp2 = miniature_experiment2(workdir / "experiment2", model, jitter=35)
    evaluated, _ = run_experiment(ExperimentManifest.load(exp2), workdir / "experiment2" / "out", threads=threads)
    return trained, evaluated
