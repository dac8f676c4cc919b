"""Evaluation measures for multi-label code prediction.

Conventions that matter:

* Ranking ties break by ascending label index (stable argsort on negated
  scores), so runs are reproducible.
* Ground-truth codes outside the model's label space stay in denominators:
  they count against recall, add false negatives to micro-F1, and are
  excluded from AUC (they have no score to rank).
* Macro averages cover only labels with at least one positive in the
  evaluated records.
* All values live in [0,1]; external reports multiply by 100.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import CODE_RE, Encounter, chapter
from .errors import UndefinedMetricError, ValidationError

# --------------------------------------------------------------------------
# prediction substrate
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRecord:
    """One evaluated document: scores over the label space plus context."""

    probs: np.ndarray
    gt_indices: frozenset[int]
    n_unseen: int = 0  # ground-truth codes with no index in the label space
    dept: str = ""
    first_visit: bool = True
    freq_bucket: str = ""
    encounter: Encounter | None = None

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        object.__setattr__(self, "gt_indices", frozenset(self.gt_indices))

    @property
    def total_gt(self) -> int:
        return len(self.gt_indices) + self.n_unseen


def _require_gt(record: PredictionRecord) -> None:
    if record.total_gt == 0:
        raise UndefinedMetricError("record has no ground-truth labels")


def ranked_indices(probs: np.ndarray) -> np.ndarray:
    """Descending score; equal scores ordered by ascending label index."""
    return np.argsort(-np.asarray(probs), kind="stable")


# --------------------------------------------------------------------------
# per-record measures
# --------------------------------------------------------------------------


def recall_at_k(record: PredictionRecord, k: int = 5) -> float:
    _require_gt(record)
    top = ranked_indices(record.probs)[:k]
    hits = sum(1 for i in top if int(i) in record.gt_indices)
    return hits / record.total_gt


def instance_f1(predicted: set[int], record: PredictionRecord) -> float:
    _require_gt(record)
    if not predicted:
        return 0.0
    tp = len(predicted & record.gt_indices)
    precision = tp / len(predicted)
    recall = tp / record.total_gt
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def mean_recall_at_k(records, k: int = 5) -> float:
    if not records:
        raise UndefinedMetricError("no records")
    return float(np.mean([recall_at_k(r, k) for r in records]))


def mean_instance_f1(records, decision_threshold: float = 0.5) -> float:
    if not records:
        raise UndefinedMetricError("no records")
    vals = [instance_f1(_pred_set(r, decision_threshold), r) for r in records]
    return float(np.mean(vals))


def _pred_set(record: PredictionRecord, threshold: float) -> set[int]:
    return {int(i) for i in np.nonzero(record.probs > threshold)[0]}


# --------------------------------------------------------------------------
# pooled / per-label measures
# --------------------------------------------------------------------------


def micro_f1(records, decision_threshold: float = 0.5) -> float:
    tp = fp = fn = 0
    any_pos = False
    for r in records:
        pred = _pred_set(r, decision_threshold)
        tp += len(pred & r.gt_indices)
        fp += len(pred - r.gt_indices)
        fn += len(r.gt_indices - pred) + r.n_unseen
        any_pos = any_pos or r.total_gt > 0
    if not any_pos:
        raise UndefinedMetricError("micro-F1 undefined without any positive labels")
    return 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def macro_f1(records, decision_threshold: float = 0.5) -> float:
    records = list(records)
    if not records:
        raise UndefinedMetricError("no records")
    n = records[0].probs.shape[0]
    tp = np.zeros(n)
    fp = np.zeros(n)
    fn = np.zeros(n)
    for r in records:
        pred = _pred_set(r, decision_threshold)
        for i in pred & r.gt_indices:
            tp[i] += 1
        for i in pred - r.gt_indices:
            fp[i] += 1
        for i in r.gt_indices - pred:
            fn[i] += 1
    has_pos = (tp + fn) > 0  # labels with ≥1 eval positive
    if not has_pos.any():
        raise UndefinedMetricError("macro-F1 undefined without any positive labels")
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1e-300), 0.0)
    return float(f1[has_pos].mean())


def _rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney AUC; ties count half via average ranks."""
    pos = positives.astype(bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined for single-class data")
    ranks = _rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_micro(records) -> float:
    records = list(records)
    if not records:
        raise UndefinedMetricError("no records")
    scores = np.concatenate([r.probs for r in records])
    ys = np.concatenate([
        np.isin(np.arange(r.probs.shape[0]), sorted(r.gt_indices)) for r in records
    ])
    return _auc(scores, ys)


def auc_macro(records) -> float:
    records = list(records)
    if not records:
        raise UndefinedMetricError("no records")
    n = records[0].probs.shape[0]
    scores = np.stack([r.probs for r in records])  # (m, n)
    ys = np.zeros_like(scores, dtype=bool)
    for row, r in enumerate(records):
        for i in r.gt_indices:
            ys[row, i] = True
    vals = []
    for j in range(n):
        pos = ys[:, j]
        if pos.any() and not pos.all():
            vals.append(_auc(scores[:, j], pos))
    if not vals:
        raise UndefinedMetricError("macro AUC: every label is single-class")
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# oracle upper bounds
# --------------------------------------------------------------------------


def oracle_scores(records, train_counts: dict[int, int] | None, min_count: int = 100,
                  k: int = 5) -> float:
    """Mean Recall@k of a scorer that predicts exactly the ground truth,
    optionally restricted to labels with at least min_count train documents.
    Predictions are treated as perfectly ranked."""
    if not records:
        raise UndefinedMetricError("no records")
    vals = []
    for r in records:
        _require_gt(r)
        if min_count <= 0:
            n_pred = r.total_gt  # unseen labels included: gt ranked perfectly
        else:
            counts = train_counts or {}
            n_pred = sum(1 for i in r.gt_indices if counts.get(int(i), 0) >= min_count)
        vals.append(min(n_pred, k) / r.total_gt)
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# grouped breakdowns
# --------------------------------------------------------------------------

GROUP_KEYS = ("dept", "label_frequency_bucket", "first_visit")


@dataclass(frozen=True)
class GroupReport:
    group: str
    size: int
    recall_at_5: float
    instance_f1: float
    distinct_labels_per_period: float


def _group_value(record: PredictionRecord, key: str) -> str:
    if key == "dept":
        return record.dept
    if key == "label_frequency_bucket":
        return record.freq_bucket
    if key == "first_visit":
        return "first" if record.first_visit else "recurring"
    raise ValidationError(f"unknown group key {key!r}; expected one of {GROUP_KEYS}")


def _distinct_labels_per_period(records) -> float:
    """Mean number of distinct gt codes per calendar year within the group."""
    by_year: dict[int, set[str]] = {}
    for r in records:
        if r.encounter is None:
            continue
        by_year.setdefault(r.encounter.date.year, set()).update(r.encounter.codes)
    if not by_year:
        return 0.0
    return float(np.mean([len(v) for v in by_year.values()]))


def breakdown(records, group_key: str, decision_threshold: float = 0.5,
              k: int = 5) -> list[GroupReport]:
    groups: dict[str, list[PredictionRecord]] = {}
    for r in records:
        groups.setdefault(_group_value(r, group_key), []).append(r)
    out = []
    for name, members in groups.items():
        out.append(GroupReport(
            group=name,
            size=len(members),
            recall_at_5=mean_recall_at_k(members, k),
            instance_f1=mean_instance_f1(members, decision_threshold),
            distinct_labels_per_period=_distinct_labels_per_period(members),
        ))
    out.sort(key=lambda g: (-g.size, g.group))
    return out


def breakdown_csv(reports: list[GroupReport]) -> str:
    lines = ["group,size,recall_at_5,instance_f1,distinct_labels_per_period"]
    for g in reports:
        lines.append(f"{g.group},{g.size},{100 * g.recall_at_5:.2f},"
                     f"{100 * g.instance_f1:.2f},{g.distinct_labels_per_period:.2f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# correlation and histograms
# --------------------------------------------------------------------------


def spearman(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise UndefinedMetricError("spearman needs two equal-length samples of size ≥ 2")
    rx, ry = _rankdata(xs), _rankdata(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("spearman undefined for zero rank variance")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def score_histogram(records, metric: str = "if1", bins: int = 10,
                    decision_threshold: float = 0.5, k: int = 5):
    """Counts per equal-width bin over [0,1] plus the exactly-1 fraction.

    Bins are half-open [i/b, (i+1)/b) except the last, which is closed.
    """
    if bins < 1:
        raise ValidationError("bins must be ≥ 1")
    if metric == "if1":
        vals = [instance_f1(_pred_set(r, decision_threshold), r) for r in records]
    elif metric in ("recall@5", "recall_at_k"):
        vals = [recall_at_k(r, k) for r in records]
    else:
        raise ValidationError(f"unknown histogram metric {metric!r}")
    counts = np.zeros(bins, dtype=np.int64)
    exact_one = 0
    for v in vals:
        counts[min(int(v * bins), bins - 1)] += 1
        exact_one += v == 1.0
    frac = exact_one / len(vals) if vals else 0.0
    return counts, frac


# --------------------------------------------------------------------------
# level-3 consistency
# --------------------------------------------------------------------------


def _remainder(code: str) -> str:
    if not CODE_RE.match(code):
        raise ValidationError(f"malformed code {code!r}")
    return code[3:].replace(".", "")


def codes_inconsistent(a: str, b: str) -> bool:
    """Same chapter, different tail (dots ignored): a level-3 conflict."""
    ra, rb = _remainder(a), _remainder(b)
    return chapter(a) == chapter(b) and ra != rb


@dataclass(frozen=True)
class ConsistencyReport:
    matched_pairs: int
    inconsistent_pairs: int

    @property
    def rate(self) -> float:
        return self.inconsistent_pairs / self.matched_pairs if self.matched_pairs else 0.0


def consistency_check(encounters, window_days: int = 7) -> ConsistencyReport:
    """Chapter-matched code pairs across same-patient visits ≤ window apart."""
    by_patient: dict[str, list[Encounter]] = {}
    for e in encounters:
        by_patient.setdefault(e.patient_id, []).append(e)
    matched = bad = 0
    for seq in by_patient.values():
        seq = sorted(seq, key=lambda e: e.date)
        for i, first in enumerate(seq):
            for second in seq[i + 1:]:
                gap = (second.date - first.date).days
                if gap > window_days:
                    break
                for a in sorted(first.codes):
                    for b in sorted(second.codes):
                        if chapter(a) == chapter(b):
                            matched += 1
                            bad += codes_inconsistent(a, b)
    return ConsistencyReport(matched, bad)


# --------------------------------------------------------------------------
# the headline report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    auc_macro: float | None
    auc_micro: float | None
    f1_macro: float
    f1_micro: float
    f1_instance: float
    recall_at_k: float
    k: int = 5
    n_records: int = 0
    breakdowns: dict = field(default_factory=dict)

    def as_csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{100 * v:.2f}"

        header = f"auc_macro,auc_micro,f1_macro,f1_micro,f1_instance,recall_at_{self.k}"
        row = ",".join([fmt(self.auc_macro), fmt(self.auc_micro), fmt(self.f1_macro),
                        fmt(self.f1_micro), fmt(self.f1_instance), fmt(self.recall_at_k)])
        return header + "\n" + row + "\n"

    def as_text(self) -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{100 * v:5.2f}"

        return (
            f"records        {self.n_records}\n"
            f"AUC   macro    {fmt(self.auc_macro)}\n"
            f"AUC   micro    {fmt(self.auc_micro)}\n"
            f"F1    macro    {fmt(self.f1_macro)}\n"
            f"F1    micro    {fmt(self.f1_micro)}\n"
            f"F1    instance {fmt(self.f1_instance)}\n"
            f"Recall@{self.k}       {fmt(self.recall_at_k)}\n"
        )


def compute_report(records, decision_threshold: float = 0.5, k: int = 5) -> MetricsReport:
    records = list(records)
    try:
        a_macro = auc_macro(records)
    except UndefinedMetricError:
        a_macro = None
    try:
        a_micro = auc_micro(records)
    except UndefinedMetricError:
        a_micro = None
    return MetricsReport(
        auc_macro=a_macro,
        auc_micro=a_micro,
        f1_macro=macro_f1(records, decision_threshold),
        f1_micro=micro_f1(records, decision_threshold),
        f1_instance=mean_instance_f1(records, decision_threshold),
        recall_at_k=mean_recall_at_k(records, k),
        k=k,
        n_records=len(records),
    )
