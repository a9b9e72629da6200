"""Classification metrics and the statistics used by the experiment harness.

Metric conventions, fixed here so every caller agrees:

* hard predictions come from argmax with lowest-index tie-break;
* one-vs-rest AUC uses the rank statistic with ties counted 0.5,
  averaged over classes without weights;
* average precision uses step interpolation at the positive ranks,
  descending score order, ties broken by sample index; mAP weights the
  per-class APs by class sample size, cmAP does not;
* 0/0 cells (never-predicted classes and the like) count as 0 so an
  absent class penalizes the macro average instead of inflating it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .special import betainc_reg, f_sf, student_t_ppf, student_t_cdf


class MetricError(ValueError):
    pass


class EmptyInput(MetricError):
    pass


class DegenerateClass(MetricError):
    def __init__(self, label, why: str):
        self.label = label
        super().__init__(f"class {label}: {why}")


class StatsError(ValueError):
    pass


class ConstantX(StatsError):
    pass


class TooFewPoints(StatsError):
    pass


class TooFewGroups(StatsError):
    pass


class TooFewObservations(StatsError):
    pass


@dataclass
class ScoredPredictions:
    """Per-sample true labels (class indices 0..K-1) and score vectors."""
    y_true: np.ndarray      # (n,) int
    scores: np.ndarray      # (n, K) float

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or len(self.y_true) != len(self.scores):
            raise MetricError("scores must be (n, K) aligned with y_true")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if len(self.y_true) and (self.y_true.min() < 0
                                 or self.y_true.max() >= self.scores.shape[1]):
            raise MetricError("labels outside [0, K)")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def predicted(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)   # first max wins


def accuracy(preds: ScoredPredictions) -> float:
    if len(preds.y_true) == 0:
        raise EmptyInput("no samples")
    return float(np.mean(preds.predicted() == preds.y_true))


def _rank_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """One-vs-rest AUC from average ranks; tied pairs count one half."""
    scores = np.concatenate([pos_scores, neg_scores])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over tie groups
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    n_pos, n_neg = len(pos_scores), len(neg_scores)
    rank_sum = ranks[:n_pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_multiclass(preds: ScoredPredictions) -> float:
    """Unweighted mean of per-class one-vs-rest AUCs."""
    if len(preds.y_true) == 0:
        raise EmptyInput("no samples")
    per_class = []
    for c in range(preds.num_classes):
        mask = preds.y_true == c
        n_pos = int(mask.sum())
        if n_pos == 0:
            raise DegenerateClass(c, "no positive samples for AUC")
        if n_pos == len(preds.y_true):
            raise DegenerateClass(c, "no negative samples for AUC")
        per_class.append(_rank_auc(preds.scores[mask, c], preds.scores[~mask, c]))
    return float(np.mean(per_class))


def average_precision(preds: ScoredPredictions, c: int) -> float:
    """Step-interpolated AP for class c; ties broken by sample index."""
    rel = (preds.y_true == c).astype(np.float64)
    n_pos = rel.sum()
    if n_pos == 0:
        raise DegenerateClass(c, "no positive samples for AP")
    order = np.argsort(-preds.scores[:, c], kind="stable")
    rel = rel[order]
    cum_hits = np.cumsum(rel)
    precision_at = cum_hits / np.arange(1, len(rel) + 1)
    return float((precision_at * rel).sum() / n_pos)


def map_weighted(preds: ScoredPredictions) -> float:
    """Mean AP across classes weighted by class sample sizes."""
    sizes = np.array([(preds.y_true == c).sum() for c in range(preds.num_classes)])
    aps = np.array([average_precision(preds, c) for c in range(preds.num_classes)])
    return float((aps * sizes).sum() / sizes.sum())


def cmap(preds: ScoredPredictions) -> float:
    """Unweighted mean AP across classes."""
    aps = [average_precision(preds, c) for c in range(preds.num_classes)]
    return float(np.mean(aps))


def _confusion_cells(preds: ScoredPredictions) -> np.ndarray:
    """Per-class one-vs-rest (TP, FP, FN, TN) from argmax predictions."""
    y_hat = preds.predicted()
    n = len(preds.y_true)
    cells = np.zeros((preds.num_classes, 4), dtype=np.int64)
    for c in range(preds.num_classes):
        tp = int(np.sum((y_hat == c) & (preds.y_true == c)))
        fp = int(np.sum((y_hat == c) & (preds.y_true != c)))
        fn = int(np.sum((y_hat != c) & (preds.y_true == c)))
        cells[c] = (tp, fp, fn, n - tp - fp - fn)
    return cells


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def per_class_metrics(preds: ScoredPredictions) -> list[dict[str, float]]:
    """precision/recall/specificity/f1 per class, 0/0 defined as 0."""
    if len(preds.y_true) == 0:
        raise EmptyInput("no samples")
    rows = []
    for tp, fp, fn, tn in _confusion_cells(preds):
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        specificity = _safe_div(tn, tn + fp)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        rows.append({"precision": precision, "recall": recall,
                     "specificity": specificity, "f1": f1})
    return rows


def recall_specificity_f1(preds: ScoredPredictions) -> tuple[float, float, float]:
    """Macro-averaged recall, specificity, and f1."""
    rows = per_class_metrics(preds)
    return (float(np.mean([r["recall"] for r in rows])),
            float(np.mean([r["specificity"] for r in rows])),
            float(np.mean([r["f1"] for r in rows])))


@dataclass
class MetricsReport:
    accuracy: float
    map: float
    cmap: float
    auc: float
    recall: float
    specificity: float
    f1: float
    per_class: list[dict[str, float]] = field(default_factory=list)

    SCALARS = ("accuracy", "map", "cmap", "auc", "recall", "specificity", "f1")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.SCALARS}

    def render_flat(self) -> str:
        return "".join(f"{name} {getattr(self, name):.6f}\n" for name in self.SCALARS)

    def render_per_class_csv(self) -> str:
        lines = ["class,precision,recall,specificity,f1"]
        for c, row in enumerate(self.per_class):
            lines.append(f"{c},{row['precision']:.6f},{row['recall']:.6f},"
                         f"{row['specificity']:.6f},{row['f1']:.6f}")
        return "\n".join(lines) + "\n"


def compute_report(preds: ScoredPredictions) -> MetricsReport:
    rec, spec, f1 = recall_specificity_f1(preds)
    return MetricsReport(accuracy=accuracy(preds), map=map_weighted(preds),
                         cmap=cmap(preds), auc=auc_multiclass(preds),
                         recall=rec, specificity=spec, f1=f1,
                         per_class=per_class_metrics(preds))


@dataclass(frozen=True)
class OlsFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    stderr: float
    p_value: float


def ols_ci(x, y, confidence: float = 0.95) -> OlsFit:
    """Least-squares line with a t-based confidence interval on the slope."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise TooFewPoints(f"need >= 3 points, got {n}")
    if len(y) != n:
        raise StatsError("x and y length mismatch")
    sxx = float(np.sum((x - x.mean()) ** 2))
    if sxx == 0.0:
        raise ConstantX("x has no variance")
    sxy = float(np.sum((x - x.mean()) * (y - y.mean())))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    sigma2 = float(np.sum(resid ** 2)) / (n - 2)
    stderr = (sigma2 / sxx) ** 0.5
    tq = student_t_ppf(0.5 + confidence / 2.0, n - 2)
    if stderr > 0:
        p = 2.0 * (1.0 - student_t_cdf(abs(slope) / stderr, n - 2))
    else:
        p = 0.0 if slope != 0 else 1.0
    return OlsFit(slope=slope, intercept=intercept,
                  ci_low=slope - tq * stderr, ci_high=slope + tq * stderr,
                  stderr=stderr, p_value=p)


@dataclass(frozen=True)
class AnovaResult:
    f_stat: float
    df_between: int
    df_within: int
    p_value: float


def anova_oneway(groups) -> AnovaResult:
    """One-way fixed-effects ANOVA over >= 2 groups of >= 2 observations."""
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise TooFewGroups(f"need >= 2 groups, got {len(arrays)}")
    for i, g in enumerate(arrays):
        if len(g) < 2:
            raise TooFewObservations(f"group {i} has {len(g)} observations, need >= 2")
    grand = np.concatenate(arrays).mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in arrays)
    ss_within = sum(float(np.sum((g - g.mean()) ** 2)) for g in arrays)
    df_between = len(arrays) - 1
    df_within = sum(len(g) for g in arrays) - len(arrays)
    if ss_between == 0.0:
        return AnovaResult(0.0, df_between, df_within, 1.0)
    if ss_within == 0.0:
        return AnovaResult(float("inf"), df_between, df_within, 0.0)
    f_stat = (ss_between / df_between) / (ss_within / df_within)
    return AnovaResult(float(f_stat), df_between, df_within,
                       f_sf(float(f_stat), df_between, df_within))


def sign_test_greater(a, b) -> float:
    """One-sided paired sign test p-value for the hypothesis a > b.

    Ties are dropped; p is the binomial tail P(X >= wins | n, 1/2).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise StatsError("paired samples differ in length")
    wins = int(np.sum(a > b))
    losses = int(np.sum(a < b))
    n = wins + losses
    if n == 0:
        return 1.0
    # P(X >= wins) for X ~ Binomial(n, 1/2) via the incomplete beta
    if wins == 0:
        return 1.0
    return betainc_reg(wins, n - wins + 1, 0.5)
