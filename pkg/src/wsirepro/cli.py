"""Command-line entry point: one subcommand per pipeline stage.

Data goes to stdout, diagnostics to stderr.  Exit status is 0 on success,
1 on a domain error (printed as ``ErrorName: message``) and 2 on a usage
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shlex
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, canonical
from .catalog import CLASSES, SortSpec, catalog_version, cohort_summary, derive_reference_class, load_catalog, parse_where, query, to_sql
from .classifier import ExternalRunner, ReferenceModel, TrainConfig, classify_external, extract_features, predict_features
from .dicom import FixtureSpec, write_synthetic_wsi
from .errors import WsiReproError
from .evaluation import SlideResult, aggregate_slide, build_report, make_split, roc_csv
from .repro import (
    ExperimentManifest,
    RunRecord,
    compare_runs,
    format_comparison,
    group_by_manifest,
    run_demo,
    run_experiment,
    table1_records,
    train_model,
)
from .storage import DEFAULT_ENDPOINT, TileCache, fetch_object, parse_url
from .tiling import TilingParams, iterate_tiles, open_slide

ENV_PREFIX = "WSIREPRO_"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class CliConfig:
    cache_root: Path = Path("~/.cache/wsirepro")
    endpoint: str = DEFAULT_ENDPOINT
    threads: int = 1
    log_level: str = "WARNING"

    def __post_init__(self):
        if self.threads < 1:
            raise UsageError("--threads must be >= 1")
        object.__setattr__(self, "cache_root", Path(os.path.expandvars(str(self.cache_root))).expanduser())


def resolve_config(args: argparse.Namespace, environ: Optional[dict] = None) -> CliConfig:
    """Flags beat environment variables, which beat the ``--config`` file."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {config_path}: {exc}") from None
        values.update(loaded)
    fields = {f.name: f.type for f in dataclasses.fields(CliConfig)}
    for name in fields:
        env = environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = env
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    unknown = set(values) - set(fields)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    try:
        if "threads" in values:
            values["threads"] = int(values["threads"])
    except ValueError:
        raise UsageError(f"threads must be an integer, got {values['threads']!r}") from None
    return CliConfig(**values)


def _proportions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three proportions")
    return parts


def _byte_range(text: str) -> tuple[int, int]:
    start, sep, end = text.partition("-")
    try:
        first, last = int(start), int(end)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected FIRST-LAST byte offsets, got {text!r}") from None
    if not sep or last < first or first < 0:
        raise argparse.ArgumentTypeError(f"bad byte range {text!r}")
    return first, last - first + 1


def _tiling(args) -> TilingParams:
    try:
        return TilingParams(args.tile_px, args.target_spacing_um, args.tissue_threshold, args.background_min)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write(data: str) -> None:
    sys.stdout.write(data if data.endswith("\n") else data + "\n")


def _load_records(args):
    version = args.catalog_version or catalog_version(args.catalog)
    catalog = load_catalog(args.catalog, version)
    expr = parse_where(args.where)
    sort = SortSpec.parse(args.order_by)
    return catalog, expr, sort, [derive_reference_class(r) for r in query(catalog, expr, sort)]


# -- subcommands -------------------------------------------------------------


def cmd_fixture(args, cfg: CliConfig) -> int:
    text = Path(args.spec).read_text() if args.spec else ""
    text += "".join(f"{item}\n" for item in args.set)
    spec = FixtureSpec.from_text(text)
    Path(args.out).write_bytes(write_synthetic_wsi(spec))
    _write(f"{args.out}\t{spec.uid('sop')}\t{spec.number_of_frames}")
    return 0


def cmd_catalog_query(args, cfg: CliConfig) -> int:
    catalog, expr, sort, records = _load_records(args)
    if args.sql:
        _write(to_sql(expr, sort, catalog.version_id))
    elif args.summary:
        _write(canonical.dumps(cohort_summary(records)))
    else:
        for r in records:
            _write(r.to_line())
    return 0


def cmd_fetch(args, cfg: CliConfig) -> int:
    data = fetch_object(parse_url(args.url, cfg.endpoint), args.range)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    return 0


def cmd_tile(args, cfg: CliConfig) -> int:
    slide = open_slide(fetch_object(parse_url(args.slide, cfg.endpoint)))
    cache = TileCache(cfg.cache_root) if args.mode == "precache" else None
    tiles = iterate_tiles(slide, _tiling(args), args.mode, cache, cfg.threads)
    if args.png_dir:
        from PIL import Image

        out = Path(args.png_dir)
        out.mkdir(parents=True, exist_ok=True)
        for tile in tiles:
            Image.fromarray(tile.pixels).save(out / f"{tile.index:06d}.png")
    _write(tiles.manifest_text())
    return 0


def cmd_split(args, cfg: CliConfig) -> int:
    _, _, _, records = _load_records(args)
    split = make_split(records, args.proportions, args.seed)
    for patient, subset in split.assignment.items():
        _write(f"{patient}\t{subset}")
    return 0


def _training_manifest(args) -> ExperimentManifest:
    cfg = TrainConfig(args.epochs, args.batch_size, args.learning_rate, args.rho, args.epsilon, args.seed)
    return ExperimentManifest(
        catalog_path=str(Path(args.catalog).resolve()),
        expected_version=args.catalog_version or catalog_version(args.catalog),
        where=args.where,
        order_by=args.order_by,
        tiling=_tiling(args),
        classifier={"train": cfg.to_dict()},
        split=(args.proportions, args.split_seed),
        mode=args.mode,
        eval_seed=0,
    )


def cmd_train_ref(args, cfg: CliConfig) -> int:
    try:
        manifest = _training_manifest(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, training = train_model(manifest, threads=cfg.threads, cache_root=cfg.cache_root, endpoint=cfg.endpoint)
    model.save(args.out)
    _write(canonical.dumps(training))
    return 0


def cmd_infer(args, cfg: CliConfig) -> int:
    if (args.model is None) == (args.external is None):
        raise UsageError("give exactly one of --model or --external")
    slide = open_slide(fetch_object(parse_url(args.slide, cfg.endpoint)))
    tiles = list(iterate_tiles(slide, _tiling(args), "stream", None, cfg.threads))
    if args.model:
        model = ReferenceModel.load(args.model)
        probs = predict_features(model, np.stack([extract_features(t) for t in tiles])) if tiles else np.empty((0, 3))
    else:
        with ExternalRunner(shlex.split(args.external)) as runner:
            probs = np.stack(classify_external(runner, tiles)) if tiles else np.empty((0, 3))
    if args.tiles:
        for tile, p in zip(tiles, probs):
            sys.stderr.write(f"{tile.index}\t" + "\t".join(f"{v:.6f}" for v in p) + "\n")
    info = slide.info
    result = SlideResult(info.sop_instance_uid, info.patient_id, args.true_class,
                         tuple(float(v) for v in aggregate_slide(probs, args.aggregation)), len(tiles))
    _write(canonical.dumps(result.to_dict()))
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    results = []
    for path in args.results:
        for line in Path(path).read_text().splitlines():
            if line.strip():
                results.append(SlideResult.from_dict(json.loads(line)))
    if args.roc:
        _write(roc_csv(results, args.roc).rstrip("\n"))
        return 0
    report = build_report(results, rounds=args.rounds, level=args.level, seed=args.seed)
    _write(report.to_json())
    return 0


def cmd_run(args, cfg: CliConfig) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    record, path = run_experiment(manifest, args.out, threads=cfg.threads, cache_root=cfg.cache_root,
                                  endpoint=cfg.endpoint)
    logging.getLogger(__name__).info("run record written to %s", path)
    sys.stderr.write(f"run record: {path}\n")
    _write(record.report.to_json())
    return 0


def cmd_repro_compare(args, cfg: CliConfig) -> int:
    if bool(args.records) == bool(args.table1):
        raise UsageError("give run record files or --table1, not both")
    if args.table1:
        groups = table1_records()
        titles = {"experiment1": "Experiment 1", "experiment2": "Experiment 2"}
    else:
        records = [RunRecord.load(p) for p in args.records]
        groups = group_by_manifest(records)
        titles = {d: f"manifest {d[:16]}" for d in groups}
    overall = 0.0
    blocks = []
    for key, records in groups.items():
        comparison = compare_runs(records)
        overall = max(overall, comparison.overall_max_deviation)
        blocks.append(format_comparison(records, comparison, titles[key]))
    _write("\n\n".join(blocks))
    _write(f"\noverall max deviation across experiments: {overall:.3f}")
    return 0


def cmd_demo(args, cfg: CliConfig) -> int:
    with tempfile.TemporaryDirectory(prefix="wsirepro-demo-") as tmp:
        workdir = Path(args.workdir) if args.workdir else Path(tmp)
        trained, evaluated = run_demo(workdir, threads=cfg.threads)
    sys.stderr.write(f"trained reference model {trained.training['model_digest'][:16]} "
                     f"(best epoch {trained.training['best_epoch']})\n")
    rows = [f"{'class':<8}{'AUC':>8}{'CI':>18}"]
    for cls in CLASSES:
        a = evaluated.report.per_class[cls]
        rows.append(f"{cls:<8}{a.auc:>8.3f}{f'[{a.ci_low:.3f}, {a.ci_high:.3f}]':>18}")
    _write("\n".join(rows))
    _write(evaluated.report.to_json())
    return 0


# -- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _catalog_args(p) -> None:
    p.add_argument("--catalog", "--manifest", dest="catalog", required=True, help="catalog manifest (TSV)")
    p.add_argument("--catalog-version", help="expected catalog version, e.g. idc_v11 (default: accept the header)")
    p.add_argument("--where", required=True, help="filter, e.g. \"modality = 'SM' AND collection_id LIKE 'TCGA%%'\"")
    p.add_argument("--order-by", default="sop_instance_uid")


def _tiling_args(p) -> None:
    p.add_argument("--tile-px", type=int, default=256)
    p.add_argument("--target-spacing-um", type=float, default=1.0)
    p.add_argument("--tissue-threshold", type=float, default=0.5)
    p.add_argument("--background-min", type=int, default=220)


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset copy of a flag from clobbering the top-level one.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with cache_root, endpoint, threads, log_level")
    common.add_argument("--cache-root", dest="cache_root")
    common.add_argument("--endpoint")
    common.add_argument("--threads", type=int)
    common.add_argument("--log-level", dest="log_level")

    parser = _Parser(prog="wsirepro", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"wsirepro {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fixture", parents=[common], help="write a synthetic DICOM WSI")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="key=value spec file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_fixture)

    cat = sub.add_parser("catalog", parents=[common], help="catalog operations")
    cat_sub = cat.add_subparsers(dest="catalog_command", required=True, parser_class=_Parser)
    p = cat_sub.add_parser("query", parents=[common], help="filter and sort catalog records")
    _catalog_args(p)
    out = p.add_mutually_exclusive_group()
    out.add_argument("--sql", "--emit-sql", dest="sql", action="store_true", help="print the equivalent BigQuery SQL")
    out.add_argument("--summary", action="store_true", help="print per-class counts")
    p.set_defaults(func=cmd_catalog_query)

    p = sub.add_parser("fetch", parents=[common], help="download an object (whole or a byte range)")
    p.add_argument("url")
    p.add_argument("--range", type=_byte_range, metavar="FIRST-LAST")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("tile", parents=[common], help="tile one slide and print the tile index")
    p.add_argument("slide", help="slide URL (gs://, s3http://, s3https://, local://)")
    _tiling_args(p)
    p.add_argument("--mode", choices=("stream", "precache"), default="stream")
    p.add_argument("--png-dir", help="also write kept tiles as PNG files")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("split", parents=[common], help="patient-disjoint train/val/test split")
    _catalog_args(p)
    p.add_argument("--proportions", type=_proportions, default=(0.70, 0.15, 0.15))
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-ref", parents=[common], help="train the reference classifier")
    _catalog_args(p)
    _tiling_args(p)
    p.add_argument("--proportions", type=_proportions, default=(0.70, 0.15, 0.15))
    p.add_argument("--split-seed", type=int, required=True)
    p.add_argument("--seed", type=int, required=True, help="training shuffle seed")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--epsilon", type=float, default=1e-7)
    p.add_argument("--mode", choices=("stream", "precache"), default="stream")
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=cmd_train_ref)

    p = sub.add_parser("infer", parents=[common], help="classify one slide")
    p.add_argument("slide")
    _tiling_args(p)
    p.add_argument("--model", help="reference model JSON")
    p.add_argument("--external", help="external runner command line")
    p.add_argument("--true-class", choices=CLASSES + ("unknown",), default="unknown")
    p.add_argument("--aggregation", choices=("mean", "median", "majority"), default="mean")
    p.add_argument("--tiles", action="store_true", help="per-tile probabilities to stderr")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="AUCs with bootstrap CIs from slide results (JSON lines)")
    p.add_argument("results", nargs="+")
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--roc", choices=CLASSES, help="print the ROC curve of one class instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="execute an experiment manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="run directory (records go to OUT/runs)")
    p.set_defaults(func=cmd_run)

    rep = sub.add_parser("repro", parents=[common], help="reproducibility analysis")
    rep_sub = rep.add_subparsers(dest="repro_command", required=True, parser_class=_Parser)
    p = rep_sub.add_parser("compare", parents=[common], help="AUC deviation across repeated runs")
    p.add_argument("records", nargs="*", help="run record JSON files")
    p.add_argument("--table1", action="store_true", help="use the bundled published multi-run AUC table")
    p.set_defaults(func=cmd_repro_compare)

    p = sub.add_parser("demo", parents=[common], help="synthetic end-to-end demo")
    p.add_argument("--workdir", help="keep generated files here instead of a temporary directory")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        sys.stderr.write(f"wsirepro: error: {exc}\n")
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=cfg.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"wsirepro: error: {exc}\n")
        return 2
    except WsiReproError as exc:
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
