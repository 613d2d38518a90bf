"""Patient-disjoint splits, slide aggregation, one-vs-rest AUC and bootstrap CIs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import canonical
from ._rng import SplitMix64, fisher_yates, splitmix64_block
from .catalog import CLASSES
from .errors import WsiReproError

SUBSETS = ("train", "val", "test")
DEFAULT_PROPORTIONS = (0.70, 0.15, 0.15)
AGGREGATIONS = ("mean", "median", "majority")


class EvaluationError(WsiReproError):
    pass


class BadProportions(EvaluationError):
    pass


class TooFewPatients(EvaluationError):
    pass


class NoTiles(EvaluationError):
    pass


class DegenerateLabels(EvaluationError):
    pass


class InsufficientClassMembers(EvaluationError):
    pass


class TooManyDegenerateRounds(EvaluationError):
    pass


class EmptyEvaluation(EvaluationError):
    pass


# -- splitting ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Mapping[str, str]
    proportions: tuple[float, float, float]
    seed: int

    def patients(self, subset: str) -> list[str]:
        return sorted(p for p, s in self.assignment.items() if s == subset)

    def sizes(self) -> tuple[int, int, int]:
        return tuple(sum(1 for s in self.assignment.values() if s == name) for name in SUBSETS)

    def subset_of(self, patient_id: str) -> str:
        return self.assignment[patient_id]


def apportion(total: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; equal remainders favour earlier subsets."""
    quotas = [p * total for p in proportions]
    sizes = [int(math.floor(q + 1e-9)) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    for i in sorted(range(len(sizes)), key=lambda i: (-round(remainders[i], 9), i))[: total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def make_split(records: Iterable, proportions: Sequence[float] = DEFAULT_PROPORTIONS, seed: int = 0) -> SplitAssignment:
    """Assign each patient to train/val/test; all slides of a patient share a subset.

    ``records`` may be catalog records (anything with ``patient_id``) or plain
    patient-id strings.
    """
    proportions = tuple(float(p) for p in proportions)
    if len(proportions) != 3 or any(p < 0 or not math.isfinite(p) for p in proportions) or abs(sum(proportions) - 1) > 1e-9:
        raise BadProportions(f"proportions {proportions} must be three non-negative values summing to 1")
    patients = sorted({r if isinstance(r, str) else r.patient_id for r in records})
    if len(patients) < 3:
        raise TooFewPatients(f"{len(patients)} distinct patients; need at least 3")
    fisher_yates(patients, SplitMix64(seed))
    sizes = apportion(len(patients), proportions)
    assignment: dict[str, str] = {}
    start = 0
    for name, size in zip(SUBSETS, sizes):
        for patient in patients[start : start + size]:
            assignment[patient] = name
        start += size
    return SplitAssignment(dict(sorted(assignment.items())), proportions, seed)


# -- aggregation ---------------------------------------------------------------


def aggregate_slide(tile_probs, method: str = "mean") -> np.ndarray:
    """Combine per-tile class probabilities into one slide-level vector."""
    probs = np.asarray(tile_probs, dtype=np.float64)
    if probs.size == 0:
        raise NoTiles("slide has no kept tiles")
    probs = probs.reshape(-1, probs.shape[-1])
    if method == "mean":
        combined = probs.mean(axis=0)
    elif method == "median":
        combined = np.median(probs, axis=0)
    elif method == "majority":
        votes = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1])
        combined = votes.astype(np.float64)
    else:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    total = combined.sum()
    if not total > 0:
        return np.full(probs.shape[1], 1.0 / probs.shape[1])
    return combined / total


def predicted_label(probs) -> int:
    """Argmax with lowest-index tiebreak."""
    return int(np.argmax(np.asarray(probs)))


# -- AUC and ROC ---------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_values = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_ovr(scores, positive_flags) -> float:
    """Mann-Whitney AUC with midranks: P(s+ > s-) + P(s+ = s-)/2."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(positive_flags, dtype=bool)
    if scores.shape != flags.shape:
        raise ValueError("scores and flags differ in length")
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"{n_pos} positives, {n_neg} negatives")
    rank_sum = _midranks(scores)[flags].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, positive_flags) -> list[tuple[float, float]]:
    """ROC points from (0, 0) to (1, 1), one per distinct threshold, collinear points dropped."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(positive_flags, dtype=bool)
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"{n_pos} positives, {n_neg} negatives")
    order = np.argsort(-scores, kind="mergesort")
    s, f = scores[order], flags[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tps = np.r_[0, np.cumsum(f)[last_of_group]]
    fps = np.r_[0, np.cumsum(~f)[last_of_group]]
    keep = [0]
    for k in range(1, len(tps) - 1):
        a, b = keep[-1], k + 1
        # Integer cross product: exact collinearity test.
        cross = (fps[k] - fps[a]) * (tps[b] - tps[k]) - (tps[k] - tps[a]) * (fps[b] - fps[k])
        if cross != 0:
            keep.append(k)
    keep.append(len(tps) - 1)
    return [(fps[k] / n_neg, tps[k] / n_pos) for k in keep]


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


# -- bootstrap ---------------------------------------------------------------


@dataclass(frozen=True)
class AucWithCi:
    auc: float
    ci_low: float
    ci_high: float
    bootstrap_rounds: int = 1000
    level: float = 0.95
    skipped_rounds: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "bootstrap_rounds": self.bootstrap_rounds,
            "level": self.level,
            "skipped_rounds": self.skipped_rounds,
        }


def percentile(sorted_values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics (Hyndman-Fan type 7)."""
    n = len(sorted_values)
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    weight = pos - lo
    return float(sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * weight)


def _batch_auc(scores: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Row-wise midrank AUC of ``(rounds, n)`` arrays; NaN where a row is single-class."""
    n_pos = flags.sum(axis=1)
    n_neg = flags.shape[1] - n_pos
    ranks = rankdata(scores, method="average", axis=1)
    rank_sum = np.where(flags, ranks, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    auc[(n_pos == 0) | (n_neg == 0)] = np.nan
    return auc


def bootstrap_auc(scores, positive_flags, rounds: int = 1000, level: float = 0.95, seed: int = 0,
                  max_redraws: int = 100) -> AucWithCi:
    """Percentile bootstrap CI of the one-vs-rest AUC.

    Round ``r`` draws indices from the SplitMix64 stream seeded ``seed ^ r``
    (index = output mod N).  A single-class resample is redrawn from the next
    N outputs of the same stream, at most ``max_redraws`` times, after which
    the round is skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(positive_flags, dtype=bool)
    n = len(scores)
    n_pos = int(flags.sum())
    if n_pos < 2 or n - n_pos < 2:
        raise InsufficientClassMembers(f"{n_pos} positives, {n - n_pos} negatives; need 2 of each")
    if rounds < 1 or not 0 < level < 1:
        raise ValueError("rounds must be >= 1 and level in (0, 1)")
    point = auc_ovr(scores, flags)

    seeds = np.bitwise_xor(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.arange(rounds, dtype=np.uint64))
    idx = (splitmix64_block(seeds, 0, n) % np.uint64(n)).astype(np.intp)
    aucs = _batch_auc(scores[idx], flags[idx])
    skipped = 0
    for r in np.flatnonzero(np.isnan(aucs)):
        for attempt in range(1, max_redraws + 1):
            redraw = (splitmix64_block(seeds[r : r + 1], attempt * n, n)[0] % np.uint64(n)).astype(np.intp)
            sub = flags[redraw]
            if sub.any() and not sub.all():
                aucs[r] = auc_ovr(scores[redraw], sub)
                break
        else:
            skipped += 1
    if skipped > 0.1 * rounds:
        raise TooManyDegenerateRounds(f"{skipped} of {rounds} rounds skipped")
    realized = np.sort(aucs[~np.isnan(aucs)])
    alpha = (1.0 - level) / 2.0
    return AucWithCi(point, percentile(realized, alpha), percentile(realized, 1.0 - alpha), rounds, level, skipped)


@dataclass(frozen=True)
class SlideResult:
    sop_instance_uid: str
    patient_id: str
    true_class: str
    probs: tuple[float, float, float]
    kept_tile_count: int

    @property
    def predicted_class(self) -> str:
        return CLASSES[predicted_label(self.probs)]

    def to_dict(self) -> dict:
        return {
            "sop_instance_uid": self.sop_instance_uid,
            "patient_id": self.patient_id,
            "true_class": self.true_class,
            "probs": list(self.probs),
            "kept_tile_count": self.kept_tile_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SlideResult":
        return cls(data["sop_instance_uid"], data["patient_id"], data["true_class"],
                   tuple(float(p) for p in data["probs"]), int(data["kept_tile_count"]))


def bootstrap_ci(slide_results: Sequence[SlideResult], cls: str, rounds: int = 1000, level: float = 0.95,
                 seed: int = 0) -> AucWithCi:
    column = CLASSES.index(cls)
    scores = [r.probs[column] for r in slide_results]
    flags = [r.true_class == cls for r in slide_results]
    return bootstrap_auc(scores, flags, rounds, level, seed)


def macro_auc(slide_results: Sequence[SlideResult]) -> tuple[float, tuple[float, float, float]]:
    """Macro-average of the defined one-vs-rest AUCs; NaN entries where a class is degenerate."""
    per_class = []
    for column, cls in enumerate(CLASSES):
        flags = [r.true_class == cls for r in slide_results]
        try:
            per_class.append(auc_ovr([r.probs[column] for r in slide_results], flags))
        except DegenerateLabels:
            per_class.append(float("nan"))
    defined = [a for a in per_class if not math.isnan(a)]
    return (sum(defined) / len(defined) if defined else float("nan")), tuple(per_class)


# -- report ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    per_class: Mapping[str, AucWithCi]
    slide_count: int
    class_counts: Mapping[str, int]
    meta: Mapping[str, object] = field(default_factory=dict)
    seeds: Mapping[str, int] = field(default_factory=dict)
    excluded: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "per_class": {c: self.per_class[c].to_dict() for c in CLASSES},
            "slide_count": self.slide_count,
            "class_counts": dict(self.class_counts),
            "meta": dict(self.meta),
            "seeds": dict(self.seeds),
            "excluded": list(self.excluded),
        }

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            per_class={c: AucWithCi(**v) for c, v in data["per_class"].items()},
            slide_count=int(data["slide_count"]),
            class_counts=dict(data["class_counts"]),
            meta=dict(data.get("meta", {})),
            seeds=dict(data.get("seeds", {})),
            excluded=tuple(data.get("excluded", ())),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def build_report(slide_results: Sequence[SlideResult], meta: Optional[Mapping[str, object]] = None, *,
                 rounds: int = 1000, level: float = 0.95, seed: int = 0,
                 excluded: Sequence[str] = ()) -> EvalReport:
    """Three one-vs-rest AUCs with bootstrap CIs over slide-level results."""
    counts = {c: sum(1 for r in slide_results if r.true_class == c) for c in CLASSES}
    missing = [c for c, n in counts.items() if n == 0]
    if missing:
        raise EmptyEvaluation(f"no scored slides for {', '.join(missing)}")
    ordered = sorted(slide_results, key=lambda r: r.sop_instance_uid)
    per_class = {c: bootstrap_ci(ordered, c, rounds, level, seed) for c in CLASSES}
    return EvalReport(per_class, len(ordered), counts, dict(meta or {}), {"bootstrap": seed}, tuple(sorted(excluded)))


def roc_csv(slide_results: Sequence[SlideResult], cls: str) -> str:
    column = CLASSES.index(cls)
    points = roc_curve([r.probs[column] for r in slide_results], [r.true_class == cls for r in slide_results])
    return "fpr,tpr\n" + "".join(f"{x:.12g},{y:.12g}\n" for x, y in points)
