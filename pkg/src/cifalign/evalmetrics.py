"""Alignment-quality and analysis metrics plus their file exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .cif import BoundarySet
from .errors import CountMismatch, DegenerateData, EmptyErrors, NonSquare, ShapeMismatch

DEFAULT_CUTOFFS_MS = (50.0, 100.0, 500.0, 1000.0)
REPORT_FIELDS = ("mae_ms", "median_ms", "acc_50", "acc_100", "acc_500", "acc_1000",
                 "diagonality", "recall_weighted", "f1_weighted")


@dataclass
class BoundaryErrors:
    left_err_ms: np.ndarray
    right_err_ms: np.ndarray

    @property
    def pooled(self):
        """Absolute errors of both edges of every token, lefts first."""
        return np.abs(np.concatenate([self.left_err_ms, self.right_err_ms]))

    @classmethod
    def merge(cls, items):
        items = list(items)
        if not items:
            return cls(np.zeros(0), np.zeros(0))
        return cls(np.concatenate([e.left_err_ms for e in items]),
                   np.concatenate([e.right_err_ms for e in items]))


@dataclass
class ToleranceReport:
    cutoffs_ms: tuple
    accuracy: tuple

    def as_dict(self):
        return {f"acc_{int(c) if float(c).is_integer() else c}": a
                for c, a in zip(self.cutoffs_ms, self.accuracy)}


@dataclass
class HeatmapMatrix:
    values: np.ndarray

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]


@dataclass
class PcaProjection:
    points: np.ndarray
    explained_variance: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def lower_median(values):
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise EmptyErrors("median of an empty list")
    return float(values[(values.size - 1) // 2])


def summarize_errors(errors: BoundaryErrors):
    pooled = errors.pooled
    if pooled.size == 0:
        raise EmptyErrors("no boundary errors to summarise")
    return float(pooled.mean()), lower_median(pooled)


def boundary_errors(pred: BoundarySet, gold: BoundarySet):
    """Signed per-token edge errors (pred - gold) with pooled MAE and median."""
    if len(pred) != len(gold):
        raise CountMismatch(f"{len(pred)} predicted tokens vs {len(gold)} gold")
    errors = BoundaryErrors(pred.lefts - gold.lefts, pred.rights - gold.rights)
    if len(pred) == 0:
        return errors, 0.0, 0.0
    mae, median = summarize_errors(errors)
    return errors, mae, median


def tolerance_accuracy(errors, cutoffs=DEFAULT_CUTOFFS_MS) -> ToleranceReport:
    pooled = errors.pooled if isinstance(errors, BoundaryErrors) else np.abs(np.asarray(errors))
    if pooled.size == 0:
        raise EmptyErrors("no errors to score")
    cutoffs = tuple(float(c) for c in cutoffs)
    if any(c <= 0 for c in cutoffs) or list(cutoffs) != sorted(cutoffs):
        raise ValueError("cutoffs must be positive and ascending")
    acc = tuple(float(np.mean(pooled <= c)) for c in cutoffs)
    return ToleranceReport(cutoffs, acc)


def similarity_heatmap(a_hat, l) -> HeatmapMatrix:
    values = dc.cosine_matrix(dc.Tensor(np.asarray(getattr(a_hat, "data", a_hat))),
                              dc.Tensor(np.asarray(getattr(l, "data", l)))).data
    return HeatmapMatrix(np.clip(values, -1.0, 1.0))


def diagonality_score(h) -> float:
    """Mean of the diagonal minus mean of everything off it."""
    values = h.values if isinstance(h, HeatmapMatrix) else np.asarray(h, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise NonSquare(f"heatmap of shape {values.shape} is not square")
    n = values.shape[0]
    diag = np.trace(values) / n
    if n == 1:
        return float(diag)
    off = (values.sum() - np.trace(values)) / (n * n - n)
    return float(diag - off)


def pca_project(x, components=2) -> PcaProjection:
    """Top principal directions by eigen-decomposition of the covariance.

    Each direction is flipped so its first nonzero loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ShapeMismatch("need at least three points in a K x d matrix")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:components]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    if evals[0] <= 1e-12 * max(1.0, np.abs(cov).max()):
        raise DegenerateData("covariance has rank 0")
    for j in range(evecs.shape[1]):
        nz = np.nonzero(np.abs(evecs[:, j]) > 1e-12)[0]
        if nz.size and evecs[nz[0], j] < 0:
            evecs[:, j] = -evecs[:, j]
    if evecs.shape[1] < components:
        pad = components - evecs.shape[1]
        evecs = np.hstack([evecs, np.zeros((x.shape[1], pad))])
        evals = np.concatenate([evals, np.zeros(pad)])
    return PcaProjection(xc @ evecs, evals, evecs, mean)


def weighted_recall_f1(y_true, y_pred, num_classes=3):
    """Support-weighted recall and F1 over classes present in ``y_true``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyErrors("no predictions to score")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    tp = np.diag(conf).astype(np.float64)
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    weights = support / support.sum()
    return float((weights * recall).sum()), float((weights * f1).sum())


# ----------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------
def write_heatmap_csv(h: HeatmapMatrix, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in h.values:
            writer.writerow([f"{v:.6f}" for v in row])


def heatmap_pgm_bytes(h: HeatmapMatrix):
    pix = np.round(255.0 * (np.clip(h.values, -1, 1) + 1.0) / 2.0).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes()


def write_heatmap_pgm(h: HeatmapMatrix, path):
    with open(path, "wb") as fh:
        fh.write(heatmap_pgm_bytes(h))


def write_pca_csv(points, tags, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["point_index", "x", "y", "group_tag"])
        for i, ((x, y), tag) in enumerate(zip(points, tags)):
            writer.writerow([i, f"{x:.6f}", f"{y:.6f}", tag])


def format_report(metrics: dict):
    """Stable JSON text; floats rounded to 6 places, missing fields null."""
    out = {}
    for key in sorted(set(REPORT_FIELDS) | set(metrics)):
        value = metrics.get(key)
        if isinstance(value, (float, np.floating)):
            value = round(float(value), 6)
        elif isinstance(value, np.integer):
            value = int(value)
        out[key] = value
    return json.dumps(out, sort_keys=True, indent=1) + "\n"


def write_report(metrics: dict, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_report(metrics))


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
