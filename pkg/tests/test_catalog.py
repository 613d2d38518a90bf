import dataclasses
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from wsirepro.catalog import (
    And,
    CatalogRecord,
    DuplicateSop,
    Eq,
    Exists,
    In,
    InsufficientClass,
    MalformedRecord,
    Not,
    Or,
    Prefix,
    QuerySyntaxError,
    SortSpec,
    UnknownAttribute,
    UnmappableRecord,
    VersionMismatch,
    catalog_version,
    cohort_summary,
    derive_reference_class,
    load_catalog,
    parse_catalog,
    parse_where,
    query,
    subsample_stratified,
    to_sql,
    write_catalog,
)


def record(i, collection="TCGA-LUAD", modality="SM", code="01", **kw):
    return CatalogRecord(
        collection_id=collection, patient_id=f"P{i // 2}", study_instance_uid=f"1.{i}",
        series_instance_uid=f"2.{i}", sop_instance_uid=f"3.{i:03d}", modality=modality,
        gcs_url=f"gs://idc-open/{i}.dcm", sample_type_code=code, pixel_spacing_mm=0.00025 * (1 + i % 3), **kw,
    )


MIXED = [
    record(0, "TCGA-LUAD"),
    record(1, "TCGA-LUSC"),
    record(2, "TCGA-BRCA"),
    record(3, "TCGA-LUSC", code="11"),
    record(4, "TCGA-LUAD", modality="CT"),
    record(5, "TCGA-LUAD", extra=(("stain", "HE"),)),
]


@pytest.fixture
def mixed(tmp_path):
    path = tmp_path / "catalog.tsv"
    write_catalog(path, "idc_v11", reversed(MIXED))
    return load_catalog(path, "idc_v11")


def test_load_three_records(tmp_path):
    path = tmp_path / "c.tsv"
    write_catalog(path, "idc_v11", MIXED[:3])
    cat = load_catalog(path, "idc_v11")
    assert len(cat.records) == 3
    assert cat.records == tuple(MIXED[:3])
    assert load_catalog(path, "idc_v11") == cat
    assert len(cat.source_digest) == 64
    assert catalog_version(path) == "idc_v11"


def test_version_mismatch(tmp_path):
    path = tmp_path / "c.tsv"
    write_catalog(path, "idc_v10", MIXED[:1])
    with pytest.raises(VersionMismatch):
        load_catalog(path, "idc_v11")


def test_duplicate_sop(tmp_path):
    path = tmp_path / "c.tsv"
    write_catalog(path, "idc_v11", [MIXED[0], dataclasses.replace(MIXED[1], sop_instance_uid=MIXED[0].sop_instance_uid)])
    with pytest.raises(DuplicateSop):
        load_catalog(path, "idc_v11")


def test_malformed_record_reports_line():
    text = "#catalog-version:idc_v11\n" + MIXED[0].to_line() + "\nnot a record\n"
    with pytest.raises(MalformedRecord) as err:
        parse_catalog(text, "idc_v11")
    assert err.value.line == 3
    with pytest.raises(MalformedRecord):
        parse_catalog("collection_id=x\n", "idc_v11")


def test_escaping_round_trip():
    odd = dataclasses.replace(MIXED[0], extra=(("note", "tab\there\\back\nline"),))
    cat = parse_catalog("#catalog-version:v\n" + odd.to_line() + "\n", "v")
    assert cat.records[0] == odd
    assert cat.records[0].get("note") == "tab\there\\back\nline"


def test_figure4_query_shape(mixed):
    expr = And(Eq("modality", "SM"), In("collection_id", frozenset({"TCGA-LUAD", "TCGA-LUSC"})))
    hits = query(mixed, expr, SortSpec((("collection_id", True),)))
    assert [r.sop_instance_uid for r in hits] == ["3.000", "3.005", "3.001", "3.003"]


def test_vacuous_predicate(mixed):
    assert len(query(mixed, Not(Exists("nonexistent_key")), SortSpec.parse("sop_instance_uid"))) == 6


def test_sort_spec_must_be_nonempty():
    with pytest.raises(ValueError):
        SortSpec(())
    with pytest.raises(QuerySyntaxError):
        SortSpec.parse(" , ")


def test_unknown_attribute(mixed):
    with pytest.raises(UnknownAttribute):
        query(mixed, Eq("colour", "red"), SortSpec.parse("sop_instance_uid"))
    with pytest.raises(UnknownAttribute):
        query(mixed, Exists("modality"), SortSpec.parse("colour"))


def test_extra_attributes_and_descending(mixed):
    assert [r.sop_instance_uid for r in query(mixed, Eq("stain", "HE"), SortSpec.parse("patient_id"))] == ["3.005"]
    hits = query(mixed, Prefix("collection_id", "TCGA-LU"), SortSpec.parse("patient_id DESC"))
    assert [r.patient_id for r in hits] == ["P2", "P2", "P1", "P0", "P0"]
    # tiebreak inside equal patient ids is ascending SOP UID
    assert [r.sop_instance_uid for r in hits][:2] == ["3.004", "3.005"]


def test_numeric_comparison(mixed):
    hits = query(mixed, Eq("pixel_spacing_mm", 0.00025), SortSpec.parse("sop_instance_uid"))
    assert [r.sop_instance_uid for r in hits] == ["3.000", "3.003"]


def test_parse_where():
    expr = parse_where("modality = 'SM' AND (collection_id IN ('TCGA-LUAD', 'TCGA-LUSC') OR NOT EXISTS(stain)) "
                       "AND collection_id LIKE 'TCGA%'")
    assert isinstance(expr, And)
    assert Eq("modality", "SM") in expr.terms
    assert Prefix("collection_id", "TCGA") in expr.terms
    assert any(isinstance(t, Or) for t in expr.terms)
    assert parse_where("a = 'it''s'") == Eq("a", "it's")
    for bad in ("modality =", "modality = 'SM' AND", "x LIKE 'a%b%'", "(a = 1", "a IN ()"):
        with pytest.raises(QuerySyntaxError):
            parse_where(bad)


def test_to_sql():
    expr = And(Eq("Modality", "SM"), In("collection_id", frozenset({"TCGA-LUSC", "TCGA-LUAD"})))
    sql = to_sql(expr, SortSpec.parse("PatientID"), "idc_v11")
    assert "`bigquery-public-data.idc_v11.dicom_all`" in sql
    assert "Modality = 'SM' AND collection_id IN ('TCGA-LUAD', 'TCGA-LUSC')" in sql
    assert sql.endswith("ORDER BY\n  PatientID ASC, sop_instance_uid ASC")


@pytest.mark.parametrize("collection, code, expected", [
    ("TCGA-LUAD", "01", "LUAD"),
    ("TCGA-LUSC", "11", "normal"),
    ("CPTAC-LSCC", "", "LSCC"),
    ("TCGA-LUAD", "14", "normal"),
])
def test_derive_reference_class(collection, code, expected):
    assert derive_reference_class(record(0, collection, code=code)).reference_class == expected


def test_derive_reference_class_preset_and_unmappable():
    preset = dataclasses.replace(record(0, "FOO-BAR", code=""), reference_class="LSCC")
    assert derive_reference_class(preset).reference_class == "LSCC"
    with pytest.raises(UnmappableRecord):
        derive_reference_class(record(0, "FOO-BAR", code=""))


def test_cohort_summary():
    assert cohort_summary([]) == {"normal": 0, "LUAD": 0, "LSCC": 0, "total": 0}
    six = [dataclasses.replace(record(i), reference_class=c) for i, c in enumerate(["normal", "LUAD", "LSCC"] * 2)]
    assert cohort_summary(six) == {"normal": 2, "LUAD": 2, "LSCC": 2, "total": 6}
    with pytest.raises(UnmappableRecord):
        cohort_summary([record(0)])


def thirty():
    return [dataclasses.replace(record(i), reference_class=["normal", "LUAD", "LSCC"][i % 3]) for i in range(30)]


def test_subsample_stratified():
    chosen = subsample_stratified(thirty(), 3, 42)
    assert len(chosen) == 9
    assert cohort_summary(chosen)["normal"] == 3
    assert subsample_stratified(thirty(), 3, 42) == chosen
    assert [r.sop_instance_uid for r in chosen] == sorted(r.sop_instance_uid for r in chosen)
    with pytest.raises(InsufficientClass) as err:
        subsample_stratified(thirty(), 11, 42)
    assert (err.value.have, err.value.need) == (10, 11)


@given(st.randoms(use_true_random=False), st.integers(0, 2**64 - 1))
def test_subsample_invariant_to_input_order(rnd, seed):
    records = thirty()
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert subsample_stratified(shuffled, 4, seed) == subsample_stratified(records, 4, seed)


leaf = st.one_of(
    st.builds(Eq, st.sampled_from(["modality", "collection_id", "sample_type_code"]),
              st.sampled_from(["SM", "CT", "TCGA-LUAD", "TCGA-LUSC", "01", "11"])),
    st.builds(Prefix, st.sampled_from(["collection_id", "gcs_url"]), st.sampled_from(["TCGA-LU", "gs://", "x"])),
    st.builds(Exists, st.sampled_from(["stain", "modality", "nothing"])),
)
exprs = st.recursive(leaf, lambda inner: st.one_of(
    st.builds(And, inner, inner),
    st.builds(Or, inner, inner),
    st.builds(Not, inner),
), max_leaves=6)


@given(exprs, exprs)
def test_monotone_filtering(mixed_catalog, e1, e2):
    sort = SortSpec.parse("sop_instance_uid")
    both = {r.sop_instance_uid for r in query(mixed_catalog, And(e1, e2), sort)}
    assert both <= {r.sop_instance_uid for r in query(mixed_catalog, e1, sort)}


@given(exprs)
def test_query_deterministic_across_loads(tmp_path_factory, e):
    path = tmp_path_factory.mktemp("q") / "c.tsv"
    records = list(MIXED)
    random.Random(0).shuffle(records)
    write_catalog(path, "v", records)
    sort = SortSpec.parse("collection_id DESC, patient_id")
    a = [r.to_line() for r in query(load_catalog(path, "v"), e, sort)]
    b = [r.to_line() for r in query(load_catalog(path, "v"), e, sort)]
    assert a == b


@pytest.fixture(scope="module")
def mixed_catalog(tmp_path_factory):
    path = tmp_path_factory.mktemp("cat") / "catalog.tsv"
    write_catalog(path, "idc_v11", MIXED)
    return load_catalog(path, "idc_v11")
