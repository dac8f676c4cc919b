"""Label-wise isotonic calibration and exact-match automation.

Calibration fits one monotone step function per label on (probability,
outcome) pairs from the development split. Automation selects whole
documents whose prediction the model is confident about: every predicted
label's probability at least t_u, every other label's at most t_l.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import LeakageError, UndefinedMetricError, ValidationError
from .metrics import PredictionRecord, _pred_set

# --------------------------------------------------------------------------
# isotonic regression
# --------------------------------------------------------------------------


def _pav(means: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Pool adjacent violators: least-squares non-decreasing fit.

    Inputs are per-level outcome means (levels already sorted by raw
    probability, ties pooled) and the level weights. Violating neighbours
    merge into their weighted average until the sequence is monotone.
    """
    val: list[float] = []
    wt: list[float] = []
    start: list[int] = []  # first level index covered by each block
    for i, (m, w) in enumerate(zip(means, weights)):
        val.append(float(m))
        wt.append(float(w))
        start.append(i)
        while len(val) > 1 and val[-2] > val[-1]:
            w_hi, m_hi = wt.pop(), val.pop()
            start.pop()
            wt[-1], val[-1] = wt[-1] + w_hi, (wt[-1] * val[-1] + w_hi * m_hi) / (wt[-1] + w_hi)
    fitted = np.empty(len(means), dtype=np.float64)
    bounds = start + [len(means)]
    for b, v in enumerate(val):
        fitted[bounds[b]:bounds[b + 1]] = v
    return fitted


@dataclass(frozen=True)
class IsotonicMap:
    """Per-label piecewise-constant calibration maps.

    Each label holds sorted raw-probability breakpoints with one calibrated
    value per segment; lookups clamp to the first/last segment outside the
    observed range. Labels without a fitted map pass through unchanged.
    """

    n_labels: int
    maps: dict[int, tuple[np.ndarray, np.ndarray]]

    def calibrate_value(self, label: int, p: float) -> float:
        m = self.maps.get(int(label))
        if m is None:
            return float(p)
        xs, vs = m
        idx = int(np.searchsorted(xs, p, side="right")) - 1
        return float(vs[max(idx, 0)])

    def calibrate_probs(self, probs: np.ndarray) -> np.ndarray:
        out = np.array(probs, dtype=np.float64, copy=True)
        for j in range(out.shape[0]):
            m = self.maps.get(j)
            if m is not None:
                xs, vs = m
                out[j] = vs[max(int(np.searchsorted(xs, out[j], side="right")) - 1, 0)]
        return out

    def apply(self, records) -> list[PredictionRecord]:
        return [replace(r, probs=self.calibrate_probs(r.probs)) for r in records]


def fit_isotonic(records) -> IsotonicMap:
    """Fit one isotonic map per label on (raw probability, in-gt) pairs."""
    records = list(records)
    if not records:
        raise ValidationError("cannot fit calibration on zero records")
    n = records[0].probs.shape[0]
    if any(r.probs.shape != (n,) for r in records):
        raise ValidationError("records disagree on label-space size")
    probs = np.stack([r.probs for r in records])
    hits = np.zeros_like(probs)
    for row, r in enumerate(records):
        for i in r.gt_indices:
            hits[row, i] = 1.0
    maps = {}
    for j in range(n):
        xs, inv, cnt = np.unique(probs[:, j], return_inverse=True, return_counts=True)
        level_means = np.bincount(inv, weights=hits[:, j]) / cnt
        maps[j] = (xs, _pav(level_means, cnt.astype(np.float64)))
    return IsotonicMap(n_labels=n, maps=maps)


# --------------------------------------------------------------------------
# expected calibration error
# --------------------------------------------------------------------------


def ece(records, label: int, n_bins: int = 10) -> float:
    """Equal-width-bin ECE for one label over the given records.

    Confidences are clipped into [0,1] before binning so that unclamped
    residual scores still land in a bin.
    """
    records = list(records)
    if not records:
        raise UndefinedMetricError("ECE needs at least one observation")
    n = records[0].probs.shape[0]
    if not 0 <= label < n:
        raise ValidationError(f"label {label} outside the space of {n}")
    conf = np.clip([r.probs[label] for r in records], 0.0, 1.0)
    hit = np.array([label in r.gt_indices for r in records], dtype=np.float64)
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() / len(records) * abs(conf[mask].mean() - hit[mask].mean())
    return float(total)


# --------------------------------------------------------------------------
# exact-match automation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdRule:
    """Select a document iff its predicted labels all score ≥ t_u and every
    other label scores ≤ t_l. `select_none` marks a degenerate search result
    that should select nothing at all."""

    t_u: float
    t_l: float
    decision_threshold: float = 0.5
    fitted_on: str = "dev"
    select_none: bool = False

    def __post_init__(self):
        if not (0.0 <= self.t_u <= 1.0 and 0.0 <= self.t_l <= 1.0):
            raise ValidationError("thresholds must lie in [0, 1]")


@dataclass(frozen=True)
class AutomationResult:
    selected: tuple[int, ...]  # positions within the evaluated record list
    true_positives: int
    false_positives: int

    @property
    def fp_rate(self) -> float:
        return self.false_positives / max(1, len(self.selected))


def decide_exact_match(record: PredictionRecord, rule: ThresholdRule) -> bool:
    if rule.select_none:
        return False
    pred = record.probs > rule.decision_threshold
    if not pred.any():
        return False  # an empty prediction can never be an exact match
    if float(record.probs[pred].min()) < rule.t_u:
        return False
    rest = record.probs[~pred]
    return rest.size == 0 or float(rest.max()) <= rule.t_l


def _is_exact(record: PredictionRecord, decision_threshold: float) -> bool:
    """iF1 = 1: the thresholded prediction reproduces the gt set exactly."""
    if record.total_gt == 0 or record.n_unseen:
        return False
    return _pred_set(record, decision_threshold) == set(record.gt_indices)


_GRID = tuple(i / 20 for i in range(21))


def search_thresholds(records, max_fp: float, decision_threshold: float = 0.5,
                      fitted_on: str = "dev") -> tuple[ThresholdRule, AutomationResult]:
    """Exhaustive 0.05-step grid search maximizing dev true positives.

    Feasible points keep fp_rate ≤ max_fp; ties break toward lower fp_rate,
    then higher t_u, then lower t_l. If no feasible point selects anything,
    the returned rule carries select_none=True.
    """
    if not 0.0 < max_fp <= 1.0:
        raise ValidationError("max_fp must lie in (0, 1]")
    records = list(records)
    m = len(records)
    min_pred = np.full(m, -1.0)  # -1 sentinel: empty prediction, never selected
    max_rest = np.full(m, -1.0)  # -1 sentinel: all labels predicted, always ok
    exact = np.zeros(m, dtype=bool)
    for i, r in enumerate(records):
        pred = r.probs > decision_threshold
        if pred.any():
            min_pred[i] = r.probs[pred].min()
        if not pred.all():
            max_rest[i] = r.probs[~pred].max()
        exact[i] = _is_exact(r, decision_threshold)

    best_key = None
    best = None
    for t_u in _GRID:
        sel_u = min_pred >= t_u
        for t_l in _GRID:
            sel = sel_u & (max_rest <= t_l)
            n_sel = int(sel.sum())
            tp = int((sel & exact).sum())
            fp = n_sel - tp
            fpr = fp / max(1, n_sel)
            if fpr > max_fp:
                continue
            key = (tp, -fpr, t_u, -t_l)
            if best_key is None or key > best_key:
                best_key = key
                best = (t_u, t_l, sel, tp, fp)

    if best is None or best[3] == 0:
        # for max_fp < 1 a feasible point with zero TP selects nothing
        rule = ThresholdRule(1.0, 0.0, decision_threshold, fitted_on, select_none=True)
        return rule, AutomationResult((), 0, 0)
    t_u, t_l, sel, tp, fp = best
    rule = ThresholdRule(t_u, t_l, decision_threshold, fitted_on)
    picked = tuple(int(i) for i in np.nonzero(sel)[0])
    return rule, AutomationResult(picked, tp, fp)


def evaluate_automation(records, rule: ThresholdRule,
                        maps: IsotonicMap | None = None) -> tuple[AutomationResult, float]:
    """Apply the rule (after optional calibration) and report the identified
    fraction of exact-match records.

    Exactness and decisions use the same, possibly calibrated, probabilities,
    so the identified fraction never exceeds 1. No exact match anywhere → 0.
    """
    if rule.fitted_on == "test":
        raise LeakageError("automation rule was fitted on the test split")
    records = list(records)
    if maps is not None:
        records = maps.apply(records)
    selected: list[int] = []
    tp = fp = possible = 0
    for i, r in enumerate(records):
        is_exact = _is_exact(r, rule.decision_threshold)
        possible += is_exact
        if decide_exact_match(r, rule):
            selected.append(i)
            tp += is_exact
            fp += not is_exact
    result = AutomationResult(tuple(selected), tp, fp)
    return result, (tp / possible if possible else 0.0)


def automation_sweep(dev_records, test_records, max_fps,
                     maps: IsotonicMap | None = None,
                     decision_threshold: float = 0.5):
    """Fit a rule per false-positive budget on dev, evaluate each on test.

    Returns (max_fp, calibrated?, percent_identified, achieved_fp_rate) rows.
    """
    dev = list(dev_records)
    if maps is not None:
        dev = maps.apply(dev)
    rows = []
    for max_fp in max_fps:
        rule, _ = search_thresholds(dev, max_fp, decision_threshold)
        result, pct = evaluate_automation(test_records, rule, maps)
        rows.append((float(max_fp), maps is not None, pct, result.fp_rate))
    return rows


def sweep_csv(rows) -> str:
    lines = ["max_fp,calibrated,percent_identified,achieved_fp_rate"]
    for max_fp, calibrated, pct, fpr in rows:
        lines.append(f"{max_fp:.2f},{'yes' if calibrated else 'no'},"
                     f"{100 * pct:.2f},{100 * fpr:.2f}")
    return "\n".join(lines) + "\n"
