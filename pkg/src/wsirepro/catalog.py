"""Versioned slide-metadata catalog with deterministic predicate queries.

A catalog is a local manifest file mirroring rows of the IDC ``dicom_all``
table.  Queries are predicate trees evaluated in-process; every query must be
ordered, with ``sop_instance_uid`` as the final tiebreak.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

from ._rng import SplitMix64, fisher_yates, hash64
from .errors import WsiReproError

CLASSES = ("normal", "LUAD", "LSCC")
REFERENCE_CLASSES = CLASSES + ("unknown",)
NORMAL_SAMPLE_CODES = frozenset({"10", "11", "12", "13", "14"})
VERSION_HEADER = "#catalog-version:"


class CatalogError(WsiReproError):
    pass


class VersionMismatch(CatalogError):
    pass


class MalformedRecord(CatalogError):
    def __init__(self, line: int, detail: str):
        self.line = line
        super().__init__(f"line {line}: {detail}")


class DuplicateSop(CatalogError):
    pass


class UnknownAttribute(CatalogError):
    pass


class UnmappableRecord(CatalogError):
    pass


class InsufficientClass(CatalogError):
    def __init__(self, cls: str, have: int, need: int):
        self.cls, self.have, self.need = cls, have, need
        super().__init__(f"class {cls}: have {have}, need {need}")


class QuerySyntaxError(CatalogError):
    pass


@dataclass(frozen=True)
class CatalogRecord:
    collection_id: str
    patient_id: str
    study_instance_uid: str
    series_instance_uid: str
    sop_instance_uid: str
    modality: str
    gcs_url: str
    image_type_flavor: str = "VOLUME"
    sample_type_code: str = ""
    reference_class: str = "unknown"
    pixel_spacing_mm: float = 0.0
    extra: tuple[tuple[str, str], ...] = ()

    def get(self, attr: str, default: Any = None) -> Any:
        if attr in RECORD_FIELDS:
            return getattr(self, attr)
        return dict(self.extra).get(attr, default)

    def to_line(self) -> str:
        pairs = [(name, getattr(self, name)) for name in RECORD_FIELDS]
        pairs += list(self.extra)
        return "\t".join(f"{k}={_escape(_text(v))}" for k, v in pairs)


RECORD_FIELDS = tuple(f.name for f in dataclasses.fields(CatalogRecord) if f.name != "extra")
_REQUIRED = ("collection_id", "patient_id", "study_instance_uid", "series_instance_uid", "sop_instance_uid", "modality", "gcs_url")


def _text(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"t": "\t", "n": "\n"}.get(m.group(1), m.group(1)), text)


@dataclass(frozen=True)
class Catalog:
    version_id: str
    records: tuple[CatalogRecord, ...]
    source_digest: str

    def attribute_names(self) -> set[str]:
        names = set(RECORD_FIELDS)
        for record in self.records:
            names.update(k for k, _ in record.extra)
        return names


def parse_catalog(text: str, expected_version: str, source_digest: str = "") -> Catalog:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(VERSION_HEADER):
        raise MalformedRecord(1, f"first line must be {VERSION_HEADER}<id>")
    version = lines[0][len(VERSION_HEADER):].strip()
    if version != expected_version:
        raise VersionMismatch(f"catalog is {version!r}, expected {expected_version!r}")
    records: list[CatalogRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip() or line.startswith("#"):
            continue
        values: dict[str, str] = {}
        for pair in line.split("\t"):
            key, sep, value = pair.partition("=")
            if not sep or not key:
                raise MalformedRecord(lineno, f"expected key=value, got {pair!r}")
            if key in values:
                raise MalformedRecord(lineno, f"repeated key {key!r}")
            values[key] = _unescape(value)
        missing = [k for k in _REQUIRED if not values.get(k)]
        if missing:
            raise MalformedRecord(lineno, f"missing {', '.join(missing)}")
        kwargs: dict[str, Any] = {k: values.pop(k) for k in RECORD_FIELDS if k in values}
        if "pixel_spacing_mm" in kwargs:
            try:
                kwargs["pixel_spacing_mm"] = float(kwargs["pixel_spacing_mm"])
            except ValueError:
                raise MalformedRecord(lineno, "pixel_spacing_mm is not a number") from None
        if kwargs.get("reference_class", "unknown") not in REFERENCE_CLASSES:
            raise MalformedRecord(lineno, f"unknown reference_class {kwargs['reference_class']!r}")
        record = CatalogRecord(**kwargs, extra=tuple(sorted(values.items())))
        if record.sop_instance_uid in seen:
            raise DuplicateSop(record.sop_instance_uid)
        seen.add(record.sop_instance_uid)
        records.append(record)
    return Catalog(version, tuple(records), source_digest)


def catalog_version(manifest_path: Union[str, Path]) -> str:
    """Version id from a manifest's header line."""
    with open(manifest_path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    if not first.startswith(VERSION_HEADER):
        raise MalformedRecord(1, f"first line must be {VERSION_HEADER}<id>")
    return first[len(VERSION_HEADER):].strip()


def load_catalog(manifest_path: Union[str, Path], expected_version: str) -> Catalog:
    raw = Path(manifest_path).read_bytes()
    return parse_catalog(raw.decode("utf-8"), expected_version, hashlib.sha256(raw).hexdigest())


def write_catalog(path: Union[str, Path], version_id: str, records: Iterable[CatalogRecord]) -> None:
    body = "".join(r.to_line() + "\n" for r in records)
    Path(path).write_text(f"{VERSION_HEADER}{version_id}\n{body}", encoding="utf-8")


# -- predicate AST ---------------------------------------------------------


@dataclass(frozen=True)
class Eq:
    attr: str
    value: Any


@dataclass(frozen=True)
class In:
    attr: str
    values: frozenset


@dataclass(frozen=True)
class Prefix:
    attr: str
    prefix: str


@dataclass(frozen=True)
class Exists:
    attr: str


@dataclass(frozen=True)
class And:
    terms: tuple["QueryExpr", ...]

    def __init__(self, *terms):
        object.__setattr__(self, "terms", tuple(terms))


@dataclass(frozen=True)
class Or:
    terms: tuple["QueryExpr", ...]

    def __init__(self, *terms):
        object.__setattr__(self, "terms", tuple(terms))


@dataclass(frozen=True)
class Not:
    term: "QueryExpr"


QueryExpr = Union[Eq, In, Prefix, Exists, And, Or, Not]


@dataclass(frozen=True)
class SortSpec:
    keys: tuple[tuple[str, bool], ...]  # (attr, ascending)

    def __post_init__(self):
        if not self.keys:
            raise ValueError("SortSpec needs at least one key; queries must be ordered")

    @classmethod
    def parse(cls, text: str) -> "SortSpec":
        keys = []
        for part in text.split(","):
            words = part.split()
            if not words:
                continue
            if len(words) > 2 or (len(words) == 2 and words[1].upper() not in ("ASC", "DESC")):
                raise QuerySyntaxError(f"bad ORDER BY term {part.strip()!r}")
            keys.append((words[0], len(words) == 1 or words[1].upper() == "ASC"))
        if not keys:
            raise QuerySyntaxError("empty ORDER BY")
        return cls(tuple(keys))

    def __str__(self) -> str:
        return ", ".join(f"{a} {'ASC' if asc else 'DESC'}" for a, asc in self.keys)


def _coerce(record_value: Any, query_value: Any) -> Any:
    if isinstance(record_value, float) and not isinstance(query_value, float):
        try:
            return float(query_value)
        except (TypeError, ValueError):
            return query_value
    if isinstance(record_value, str) and not isinstance(query_value, str):
        return _text(query_value)
    return query_value


def _check_attrs(expr: QueryExpr, known: set[str]) -> None:
    if isinstance(expr, (And, Or)):
        for term in expr.terms:
            _check_attrs(term, known)
    elif isinstance(expr, Not):
        _check_attrs(expr.term, known)
    elif isinstance(expr, (Eq, In, Prefix)) and expr.attr not in known:
        raise UnknownAttribute(expr.attr)


def matches(record: CatalogRecord, expr: QueryExpr) -> bool:
    if isinstance(expr, Eq):
        value = record.get(expr.attr)
        return value is not None and value == _coerce(value, expr.value)
    if isinstance(expr, In):
        value = record.get(expr.attr)
        return value is not None and any(value == _coerce(value, v) for v in expr.values)
    if isinstance(expr, Prefix):
        value = record.get(expr.attr)
        return value is not None and _text(value).startswith(expr.prefix)
    if isinstance(expr, Exists):
        return record.get(expr.attr) is not None
    if isinstance(expr, And):
        return all(matches(record, t) for t in expr.terms)
    if isinstance(expr, Or):
        return any(matches(record, t) for t in expr.terms)
    if isinstance(expr, Not):
        return not matches(record, expr.term)
    raise TypeError(f"not a query expression: {expr!r}")


def query(catalog: Catalog, expr: QueryExpr, sort: SortSpec) -> list[CatalogRecord]:
    """Records satisfying ``expr`` in ``sort`` order, tiebroken by SOP UID."""
    known = catalog.attribute_names()
    _check_attrs(expr, known)
    for attr, _ in sort.keys:
        if attr not in known:
            raise UnknownAttribute(attr)
    selected = [r for r in catalog.records if matches(r, expr)]
    selected.sort(key=lambda r: r.sop_instance_uid)
    for attr, ascending in reversed(sort.keys):
        # Missing extras sort first when ascending.
        selected.sort(key=lambda r: (r.get(attr) is not None, r.get(attr) if r.get(attr) is not None else ""),
                      reverse=not ascending)
    return selected


# -- textual WHERE clauses ---------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<str>'(?:[^']|'')*')|(?P<num>-?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)|(?P<op>[(),=])|(?P<word>[A-Za-z_][A-Za-z0-9_.]*))"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "str":
            value = value[1:-1].replace("''", "'")
        elif kind == "word" and value.upper() in ("AND", "OR", "NOT", "IN", "LIKE", "EXISTS", "IS"):
            kind, value = "kw", value.upper()
        tokens.append((kind, value))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str]:
        return self.tokens[self.i] if self.i < len(self.tokens) else ("end", "")

    def take(self, kind: str, value: str | None = None) -> str:
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise QuerySyntaxError(f"expected {value or kind}, got {tok[1] or 'end of input'!r}")
        self.i += 1
        return tok[1]

    def parse(self) -> QueryExpr:
        expr = self.disjunction()
        if self.peek()[0] != "end":
            raise QuerySyntaxError(f"trailing input at {self.peek()[1]!r}")
        return expr

    def disjunction(self) -> QueryExpr:
        terms = [self.conjunction()]
        while self.peek() == ("kw", "OR"):
            self.i += 1
            terms.append(self.conjunction())
        return terms[0] if len(terms) == 1 else Or(*terms)

    def conjunction(self) -> QueryExpr:
        terms = [self.unary()]
        while self.peek() == ("kw", "AND"):
            self.i += 1
            terms.append(self.unary())
        return terms[0] if len(terms) == 1 else And(*terms)

    def unary(self) -> QueryExpr:
        if self.peek() == ("kw", "NOT"):
            self.i += 1
            return Not(self.unary())
        if self.peek() == ("op", "("):
            self.i += 1
            expr = self.disjunction()
            self.take("op", ")")
            return expr
        if self.peek() == ("kw", "EXISTS"):
            self.i += 1
            self.take("op", "(")
            attr = self.take("word")
            self.take("op", ")")
            return Exists(attr)
        attr = self.take("word")
        kind, value = self.peek()
        if (kind, value) == ("op", "="):
            self.i += 1
            return Eq(attr, self.literal())
        if (kind, value) == ("kw", "IN"):
            self.i += 1
            self.take("op", "(")
            values = [self.literal()]
            while self.peek() == ("op", ","):
                self.i += 1
                values.append(self.literal())
            self.take("op", ")")
            return In(attr, frozenset(values))
        if (kind, value) == ("kw", "LIKE"):
            self.i += 1
            pattern = self.take("str")
            if not pattern.endswith("%") or "%" in pattern[:-1] or "_" in pattern:
                raise QuerySyntaxError("only prefix patterns of the form 'abc%' are supported")
            return Prefix(attr, pattern[:-1])
        raise QuerySyntaxError(f"expected =, IN or LIKE after {attr!r}")

    def literal(self) -> Any:
        kind, value = self.peek()
        if kind == "str":
            self.i += 1
            return value
        if kind == "num":
            self.i += 1
            return float(value) if any(c in value for c in ".eE") else int(value)
        raise QuerySyntaxError(f"expected literal, got {value or 'end of input'!r}")


def parse_where(text: str) -> QueryExpr:
    """Parse a WHERE-clause subset: =, IN (...), LIKE 'prefix%', EXISTS(attr), AND/OR/NOT."""
    return _Parser(text).parse()


def _sql_literal(value: Any) -> str:
    if isinstance(value, str):
        return "'" + value.replace("'", "''") + "'"
    return _text(value)


def to_sql(expr: QueryExpr, sort: SortSpec | None = None, version_id: str = "idc_v11",
           select: Sequence[str] = ("gcs_url",)) -> str:
    """Render ``expr`` as the equivalent BigQuery statement over ``dicom_all``."""

    def render(e: QueryExpr) -> str:
        if isinstance(e, Eq):
            return f"{e.attr} = {_sql_literal(e.value)}"
        if isinstance(e, In):
            values = ", ".join(sorted(_sql_literal(v) for v in e.values))
            return f"{e.attr} IN ({values})"
        if isinstance(e, Prefix):
            return f"{e.attr} LIKE {_sql_literal(e.prefix + '%')}"
        if isinstance(e, Exists):
            return f"{e.attr} IS NOT NULL"
        if isinstance(e, And):
            return " AND ".join(f"({render(t)})" if isinstance(t, Or) else render(t) for t in e.terms)
        if isinstance(e, Or):
            return " OR ".join(render(t) for t in e.terms)
        if isinstance(e, Not):
            return f"NOT ({render(e.term)})"
        raise TypeError(f"not a query expression: {e!r}")

    lines = [
        "SELECT",
        "  " + ",\n  ".join(select),
        "FROM",
        f"  `bigquery-public-data.{version_id}.dicom_all`",
        "WHERE",
        "  " + render(expr),
    ]
    if sort is not None:
        keys = list(sort.keys)
        if all(a != "sop_instance_uid" for a, _ in keys):
            keys.append(("sop_instance_uid", True))
        lines += ["ORDER BY", "  " + ", ".join(f"{a} {'ASC' if asc else 'DESC'}" for a, asc in keys)]
    return "\n".join(lines)


# -- classes and cohorts -----------------------------------------------------


def derive_reference_class(record: CatalogRecord) -> CatalogRecord:
    """Fill ``reference_class`` from sample type and collection; presets win."""
    if record.reference_class != "unknown":
        return record
    code = record.sample_type_code.strip()
    collection = record.collection_id.upper()
    if code in NORMAL_SAMPLE_CODES:
        cls = "normal"
    elif collection.endswith("-LUAD"):
        cls = "LUAD"
    elif collection.endswith("-LUSC") or collection.endswith("-LSCC"):
        cls = "LSCC"
    else:
        raise UnmappableRecord(f"{record.sop_instance_uid}: collection {record.collection_id!r}, code {code!r}")
    return dataclasses.replace(record, reference_class=cls)


def cohort_summary(records: Iterable[CatalogRecord]) -> dict[str, int]:
    counts = {cls: 0 for cls in CLASSES}
    for record in records:
        if record.reference_class not in counts:
            raise UnmappableRecord(f"{record.sop_instance_uid} has class {record.reference_class!r}")
        counts[record.reference_class] += 1
    counts["total"] = sum(counts[c] for c in CLASSES)
    return counts


def subsample_stratified(records: Sequence[CatalogRecord], per_class_n: int, seed: int) -> list[CatalogRecord]:
    """Seeded per-class subsample, invariant to the input order of ``records``."""
    chosen: list[CatalogRecord] = []
    for cls in CLASSES:
        members = sorted((r for r in records if r.reference_class == cls), key=lambda r: r.sop_instance_uid)
        if len(members) < per_class_n:
            raise InsufficientClass(cls, len(members), per_class_n)
        fisher_yates(members, SplitMix64(seed ^ hash64(cls)))
        chosen.extend(members[:per_class_n])
    return sorted(chosen, key=lambda r: r.sop_instance_uid)
