"""Evaluation metrics: balanced accuracy, AUROC/AUPR screening tasks,
confusion matrix, and bootstrap percentile confidence intervals.

Conventions, fixed so an independent reimplementation can match bitwise:

  * predicted class = argmax of the probability row, ties -> lowest index;
  * balanced accuracy = (recall_0 + recall_1 + recall_2) / 3, in that order;
  * AUROC is the Mann-Whitney statistic: P(random positive outranks random
    negative), ties counting 1/2; computed via midranks;
  * AUPR is average precision: sum over distinct thresholds (descending) of
    (R_k - R_{k-1}) * P_k with R_k = TP_k / P computed as a float division
    before the subtraction;
  * bootstrap resampling draws row indices from SplitMix64: the i-th draw
    (i = 1, 2, ...) is mix64(seed + i * 0x9E3779B97F4A7C15) and the index is
    that 64-bit value modulo n; a resample on which the metric is undefined
    is redrawn, consuming further draws, at most 100 times;
  * interval bounds are the empirical 2.5th/97.5th percentiles with linear
    interpolation: pos = q * (n_boot - 1), v = v_lo + (v_hi - v_lo) * frac.

Screening tasks over 3-class probability rows (p0, p1, p2):

  * no_vs_some:   all rows; positive = label in {1, 2}; score = p1 + p2
  * early_vs_sig: rows with label in {1, 2}; positive = label 2;
                  score = p2 / (p1 + p2)
  * sig_vs_nosig: all rows; positive = label 2; score = p2
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, MetricError

N_CLASSES = 3


@dataclass
class PredRow:
    bag_id: str
    true_label: int
    probs: np.ndarray  # [3]


class PredictionSet:
    """Rows of (bag_id, true_label, probability 3-vector); ids unique."""

    def __init__(self, rows):
        self.rows = list(rows)
        ids = set()
        for row in self.rows:
            if row.bag_id in ids:
                raise FormatError(f"duplicate bag id {row.bag_id!r} in predictions")
            ids.add(row.bag_id)
            row.probs = np.asarray(row.probs, dtype=np.float64).reshape(-1)
            if row.probs.size != N_CLASSES:
                raise FormatError(f"bag {row.bag_id!r}: needs 3 probabilities")
            if abs(float(row.probs.sum()) - 1.0) > 1e-6:
                raise FormatError(
                    f"bag {row.bag_id!r}: probabilities sum to {row.probs.sum()!r}"
                )
            if row.true_label not in (0, 1, 2):
                raise FormatError(f"bag {row.bag_id!r}: bad label {row.true_label!r}")

    def __len__(self):
        return len(self.rows)

    def subset(self, indices):
        """Resampled copy; duplicate rows get suffixed ids to keep ids unique."""
        rows = []
        for j, i in enumerate(indices):
            src = self.rows[i]
            rows.append(PredRow(f"{src.bag_id}#{j}", src.true_label, src.probs.copy()))
        return PredictionSet(rows)


def predicted_class(probs):
    return int(np.argmax(probs))  # np.argmax returns the first (lowest) max index


def balanced_accuracy(preds):
    """Mean of per-class recalls; every class must appear among true labels."""
    correct = [0, 0, 0]
    seen = [0, 0, 0]
    for row in preds.rows:
        seen[row.true_label] += 1
        if predicted_class(row.probs) == row.true_label:
            correct[row.true_label] += 1
    for c in range(N_CLASSES):
        if seen[c] == 0:
            raise MetricError(f"class {c} absent from predictions")
    r0 = correct[0] / seen[0]
    r1 = correct[1] / seen[1]
    r2 = correct[2] / seen[2]
    return (r0 + r1 + r2) / 3.0


def auroc(scores, labels):
    """Mann-Whitney AUROC with midranks (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0  # average of 1-based ranks
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def aupr(scores, labels):
    """Average precision over distinct descending thresholds (see module doc)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or int((labels == 0).sum()) == 0:
        raise MetricError("aupr needs both classes present")
    order = np.argsort(-scores, kind="stable")
    ap = 0.0
    recall_prev = 0.0
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        for k in range(i, j + 1):  # everything at this threshold enters together
            if labels[order[k]] == 1:
                tp += 1
            else:
                fp += 1
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - recall_prev) * precision
        recall_prev = recall
        i = j + 1
    return ap


def confusion_matrix(preds):
    """3x3 counts, rows = true label, columns = predicted label."""
    mat = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for row in preds.rows:
        mat[row.true_label, predicted_class(row.probs)] += 1
    return mat


# ---------------------------------------------------------------------------
# bootstrap


_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


class SplitMix64:
    """The documented bootstrap index stream (see module docstring)."""

    def __init__(self, seed):
        self.state = seed & _MASK

    def next(self):
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def indices(self, n, count):
        return [self.next() % n for _ in range(count)]


def percentile_linear(sorted_values, q):
    """Linear-interpolation percentile on an ascending list, q in [0, 100]."""
    n = len(sorted_values)
    pos = (q / 100.0) * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


def bootstrap_ci(metric_fn, preds, n_boot=5000, seed=0):
    """(point, lo, hi): study-level bootstrap percentile interval.

    ``metric_fn`` takes a PredictionSet and may raise MetricError on a
    degenerate resample, which triggers a redraw (at most 100 per resample).
    """
    if n_boot < 1:
        raise MetricError("n_boot must be >= 1")
    point = metric_fn(preds)
    n = len(preds)
    rng = SplitMix64(seed)
    values = []
    for _ in range(n_boot):
        # each attempt consumes exactly n draws; initial draw + up to 100 retries
        for _attempt in range(101):
            sample = preds.subset(rng.indices(n, n))
            try:
                values.append(metric_fn(sample))
                break
            except MetricError:
                continue
        else:
            raise MetricError(
                "bootstrap kept drawing resamples on which the metric is undefined"
            )
    values.sort()
    return point, percentile_linear(values, 2.5), percentile_linear(values, 97.5)


# ---------------------------------------------------------------------------
# screening tasks


@dataclass(frozen=True)
class ScreeningTask:
    name: str
    keep_labels: tuple
    positive_labels: tuple

    def scores_labels(self, preds):
        scores, labels = [], []
        for row in preds.rows:
            if row.true_label not in self.keep_labels:
                continue
            p = row.probs
            if self.name == "no_vs_some":
                scores.append(p[1] + p[2])
            elif self.name == "early_vs_sig":
                scores.append(p[2] / (p[1] + p[2]))
            else:  # sig_vs_nosig
                scores.append(p[2])
            labels.append(1 if row.true_label in self.positive_labels else 0)
        return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64)


SCREENING_TASKS = (
    ScreeningTask("no_vs_some", (0, 1, 2), (1, 2)),
    ScreeningTask("early_vs_sig", (1, 2), (2,)),
    ScreeningTask("sig_vs_nosig", (0, 1, 2), (2,)),
)


def task_metric(task, kind):
    fn = auroc if kind == "auroc" else aupr
    def metric(preds):
        scores, labels = task.scores_labels(preds)
        if len(scores) == 0:
            raise MetricError(f"task {task.name}: no rows after filtering")
        return fn(scores, labels)
    return metric


def compute_report(preds, n_boot=5000, seed=0):
    """Full evaluation report: balanced accuracy, six screening blocks, confusion."""
    report = {}
    point, lo, hi = bootstrap_ci(balanced_accuracy, preds, n_boot, seed)
    report["balanced_accuracy"] = {"point": point, "lo": lo, "hi": hi}
    block = 1
    for task in SCREENING_TASKS:
        for kind in ("auroc", "aupr"):
            point, lo, hi = bootstrap_ci(task_metric(task, kind), preds, n_boot, seed + block)
            report[f"{task.name}_{kind}"] = {"point": point, "lo": lo, "hi": hi}
            block += 1
    report["confusion_matrix"] = confusion_matrix(preds).tolist()
    return report


# ---------------------------------------------------------------------------
# prediction file io

CSV_HEADER = ["bag_id", "true_label", "p0", "p1", "p2"]


def save_predictions(preds, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for row in preds.rows:
            writer.writerow([row.bag_id, row.true_label,
                             repr(float(row.probs[0])), repr(float(row.probs[1])),
                             repr(float(row.probs[2]))])


def load_predictions(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no prediction file at {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty prediction file") from None
        if header != CSV_HEADER:
            raise FormatError(f"{path}: bad header {header!r}")
        rows = []
        for line in reader:
            if len(line) != 5:
                raise FormatError(f"{path}: malformed row {line!r}")
            try:
                rows.append(PredRow(line[0], int(line[1]),
                                    np.array([float(line[2]), float(line[3]), float(line[4])])))
            except ValueError as exc:
                raise FormatError(f"{path}: malformed row {line!r}") from exc
    return PredictionSet(rows)


def save_report(report, path):
    Path(path).write_text(json.dumps(report, indent=1))


def save_confusion_csv(mat, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred", "0", "1", "2"])
        for c in range(N_CLASSES):
            writer.writerow([c, int(mat[c][0]), int(mat[c][1]), int(mat[c][2])])
