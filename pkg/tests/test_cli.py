import argparse
import json
import sys
from pathlib import Path

import pytest

from wsirepro.cli import CliConfig, UsageError, main, resolve_config
from wsirepro.repro import MINI_WHERE

ECHO = f"{sys.executable} -m wsirepro.classifier.echo_runner 0.2 0.3 0.5"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def blob_slide(tmp_path_factory):
    path = tmp_path_factory.mktemp("slide") / "slide.dcm"
    assert main(["fixture", "--out", str(path), "--set", "total_columns=1024", "--set", "total_rows=768",
                 "--set", "frame_columns=256", "--set", "frame_rows=256", "--set", "pattern=tissue_blob",
                 "--set", "blob_cells=0,3,5,6,11", "--set", "noise=4"]) == 0
    return path


@pytest.fixture(scope="module")
def catalog(mini_exp1):
    return mini_exp1.parent / "cohort" / "catalog.tsv"


@pytest.fixture(scope="module")
def trained_model(catalog, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.json"
    code = main(["train-ref", "--catalog", str(catalog), "--where", MINI_WHERE, "--proportions", "0.25,0.25,0.5",
                 "--split-seed", "7", "--seed", "11", "--epochs", "3", "--batch-size", "8",
                 "--learning-rate", "0.01", "--out", str(path)])
    assert code == 0
    return path


def test_fixture_prints_uid_and_frames(tmp_path, capsys):
    code, out, _ = run(capsys, "fixture", "--out", tmp_path / "f.dcm")
    path, uid, frames = out.strip().split("\t")
    assert code == 0 and frames == "12" and uid.startswith("2.25.")
    assert Path(path).stat().st_size > 0


def test_fixture_bad_key_is_domain_error(tmp_path, capsys):
    code, out, err = run(capsys, "fixture", "--out", tmp_path / "f.dcm", "--set", "colour=red")
    assert code == 1 and out == "" and err.startswith("InvalidSpec:")


def test_catalog_query_lines_summary_and_sql(catalog, capsys):
    code, out, _ = run(capsys, "catalog", "query", "--catalog", catalog, "--where", MINI_WHERE)
    assert code == 0 and len(out.splitlines()) == 12
    code, out, _ = run(capsys, "catalog", "query", "--catalog", catalog, "--where", MINI_WHERE, "--summary")
    assert json.loads(out)["total"] == 12
    code, out, _ = run(capsys, "catalog", "query", "--manifest", catalog, "--catalog-version", "idc_v11",
                       "--where", MINI_WHERE, "--emit-sql")
    assert "`bigquery-public-data.idc_v11.dicom_all`" in out


def test_catalog_version_mismatch_exit_1(catalog, capsys):
    code, out, err = run(capsys, "catalog", "query", "--catalog", catalog, "--catalog-version", "idc_v10",
                         "--where", MINI_WHERE)
    assert code == 1 and out == "" and err.startswith("VersionMismatch:")


def test_catalog_bad_where_exit_1(catalog, capsys):
    code, _, err = run(capsys, "catalog", "query", "--catalog", catalog, "--where", "modality =")
    assert code == 1 and err.startswith("QuerySyntaxError:")


def test_fetch_local_range(tmp_path, capsys):
    (tmp_path / "blob").write_bytes(bytes(range(100)))
    code, _, _ = run(capsys, "fetch", f"local://{tmp_path / 'blob'}", "--range", "10-29", "--out", tmp_path / "part")
    assert code == 0 and (tmp_path / "part").read_bytes() == bytes(range(10, 30))


def test_fetch_from_object_server(object_server, tmp_path, capsys):
    endpoint, store = object_server
    store.objects["/idc-open/x.dcm"] = b"0123456789"
    code, _, _ = run(capsys, "--endpoint", endpoint, "fetch", "gs://idc-open/x.dcm", "--out", tmp_path / "x")
    assert code == 0 and (tmp_path / "x").read_bytes() == b"0123456789"
    code, _, err = run(capsys, "fetch", "gs://idc-open/missing.dcm", "--endpoint", endpoint)
    assert code == 1 and err.startswith("NotFound:")


def test_fetch_bad_range_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "fetch", "local:///x", "--range", "9-2")
    assert code == 2 and "--range" in err


def test_tile_manifest_and_modes(blob_slide, tmp_path, capsys):
    code, stream, _ = run(capsys, "tile", f"local://{blob_slide}", "--png-dir", tmp_path / "png")
    assert code == 0
    lines = stream.splitlines()
    assert len(lines) == 13
    assert [l.split("\t")[0] for l in lines[1:] if l.split("\t")[3] == "1"] == ["0", "3", "5", "6", "11"]
    assert sorted(p.name for p in (tmp_path / "png").iterdir())[0] == "000000.png"
    code, cached, _ = run(capsys, "--cache-root", tmp_path / "cache", "tile", f"local://{blob_slide}",
                          "--mode", "precache", "--threads", "2")
    assert code == 0 and cached == stream


def test_tile_bad_params_usage_error(blob_slide, capsys):
    code, _, err = run(capsys, "tile", f"local://{blob_slide}", "--tissue-threshold", "0")
    assert code == 2 and "tissue_threshold" in err


def test_split(catalog, capsys):
    code, out, _ = run(capsys, "split", "--catalog", catalog, "--where", MINI_WHERE, "--proportions", "0.5,0.25,0.25",
                       "--seed", "3")
    rows = [l.split("\t") for l in out.splitlines()]
    assert code == 0 and len(rows) == 12
    assert sorted(s for _, s in rows).count("train") == 6


def test_split_requires_seed(catalog, capsys):
    code, _, err = run(capsys, "split", "--catalog", catalog, "--where", MINI_WHERE)
    assert code == 2 and "--seed" in err


def test_train_ref_writes_model(trained_model):
    data = json.loads(trained_model.read_text())
    assert len(data["weights"]) == 3 and len(data["version_digest"]) == 64


def test_infer_with_model_and_external(trained_model, blob_slide, capsys):
    code, out, err = run(capsys, "infer", f"local://{blob_slide}", "--model", trained_model, "--true-class", "LUAD",
                         "--tiles")
    result = json.loads(out)
    assert code == 0 and result["kept_tile_count"] == 5 and result["true_class"] == "LUAD"
    assert abs(sum(result["probs"]) - 1) < 1e-9
    assert len(err.splitlines()) == 5
    code, out, _ = run(capsys, "infer", f"local://{blob_slide}", "--external", ECHO)
    assert code == 0 and json.loads(out)["probs"] == pytest.approx([0.2, 0.3, 0.5], abs=1e-7)


def test_infer_needs_exactly_one_classifier(blob_slide, trained_model, capsys):
    assert run(capsys, "infer", f"local://{blob_slide}")[0] == 2
    assert run(capsys, "infer", f"local://{blob_slide}", "--model", trained_model, "--external", ECHO)[0] == 2


def results_file(tmp_path):
    lines = []
    for k, cls in enumerate(("normal", "LUAD", "LSCC")):
        for i in range(4):
            probs = [0.2, 0.2, 0.2]
            probs[k] = 0.6 - 0.05 * i
            probs[(k + 1) % 3] += 0.05 * i
            lines.append(json.dumps({"sop_instance_uid": f"1.{k}.{i}", "patient_id": f"P{k}{i}", "true_class": cls,
                                     "probs": probs, "kept_tile_count": 2}))
    path = tmp_path / "results.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_eval_report_and_roc(tmp_path, capsys):
    path = results_file(tmp_path)
    code, out, _ = run(capsys, "eval", path, "--rounds", "100", "--seed", "1")
    report = json.loads(out)
    assert code == 0 and report["class_counts"] == {"LSCC": 4, "LUAD": 4, "normal": 4}
    assert report["per_class"]["normal"]["bootstrap_rounds"] == 100
    code, out, _ = run(capsys, "eval", path, "--seed", "1", "--roc", "LUAD")
    assert out.splitlines()[0] == "fpr,tpr" and out.splitlines()[-1] == "1,1"


def test_eval_requires_seed(tmp_path, capsys):
    code, _, err = run(capsys, "eval", results_file(tmp_path))
    assert code == 2 and "--seed" in err


def test_run_manifest(mini_exp1, tmp_path, capsys):
    code, out, err = run(capsys, "run", mini_exp1, "--out", tmp_path / "out")
    assert code == 0
    assert set(json.loads(out)["per_class"]) == {"normal", "LUAD", "LSCC"}
    assert "run record:" in err
    records = list((tmp_path / "out" / "runs").glob("*.json"))
    assert len(records) == 1
    code, out2, _ = run(capsys, "run", mini_exp1, "--out", tmp_path / "out")
    assert out2 == out
    code, cmp, _ = run(capsys, "repro", "compare", *sorted((tmp_path / "out" / "runs").glob("*.json")))
    assert code == 0 and "bitwise identical: yes" in cmp
    assert cmp.rstrip().endswith("overall max deviation across experiments: 0.000")


def test_repro_compare_table1(capsys):
    code, out, _ = run(capsys, "repro", "compare", "--table1")
    assert code == 0
    assert "overall max deviation: 0.045" in out
    assert out.rstrip().endswith("overall max deviation across experiments: 0.045")
    assert out.count("Vertex AI") >= 1


def test_repro_compare_usage(capsys):
    assert run(capsys, "repro", "compare")[0] == 2


def test_demo_is_deterministic(capsys):
    code, first, err = run(capsys, "demo")
    assert code == 0
    lines = first.splitlines()
    assert lines[0].split() == ["class", "AUC", "CI"]
    report = json.loads(lines[-1])
    assert report["class_counts"] == {"LSCC": 3, "LUAD": 3, "normal": 3}
    assert "trained reference model" in err
    assert run(capsys, "demo")[1] == first


def test_unknown_subcommand_exit_2(capsys):
    code, out, err = run(capsys, "frobnicate")
    assert code == 2 and out == "" and "usage:" in err


def test_version_and_help(capsys):
    assert run(capsys, "--version")[0] == 0
    assert run(capsys, "--help")[0] == 0


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"threads": 2, "endpoint": "http://file", "cache_root": "~/c"}))
    args = argparse.Namespace(config=str(cfg_file), threads=None, endpoint=None, cache_root=None, log_level=None)
    cfg = resolve_config(args, {})
    assert (cfg.threads, cfg.endpoint) == (2, "http://file")
    assert cfg.cache_root == Path("~/c").expanduser()
    cfg = resolve_config(args, {"WSIREPRO_THREADS": "3", "WSIREPRO_ENDPOINT": "http://env"})
    assert (cfg.threads, cfg.endpoint) == (3, "http://env")
    args.threads = 4
    assert resolve_config(args, {"WSIREPRO_THREADS": "3"}).threads == 4


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    with pytest.raises(UsageError):
        resolve_config(argparse.Namespace(config=str(bad)), {})
    with pytest.raises(UsageError):
        resolve_config(argparse.Namespace(), {"WSIREPRO_THREADS": "many"})
    with pytest.raises(UsageError):
        CliConfig(threads=0)


def test_zero_threads_exit_2(capsys):
    assert run(capsys, "--threads", "0", "repro", "compare", "--table1")[0] == 2
