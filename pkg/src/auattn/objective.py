"""Class-reweighted binary cross-entropy and the macro-F1 metric.

Labels are integer arrays with entries in {0, 1, -1}; -1 marks an entry
without annotation and is ignored by both the loss and the metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError, DegenerateClassError, DimensionError, EmptyLossError

AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
            "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")

PROB_EPS = 1e-7
INVALID = -1


def as_label_array(labels):
    y = np.asarray(labels)
    if y.ndim == 1:
        y = y[None, :]
    if y.ndim != 2:
        raise DimensionError(f"labels must be 2-D (samples x AUs), got shape {y.shape}")
    if y.size and not np.isin(y, (0, 1, INVALID)).all():
        raise ContractError("label entries must be 0, 1 or -1")
    return y.astype(np.int64, copy=False)


@dataclass
class ClassWeights:
    """Positive-class weights ``w_i = total_i / (2 * positives_i)``.

    ``totals`` counts valid (non -1) entries per AU, so the weight stays
    exact even when some frames are only partly annotated.
    """

    weights: np.ndarray
    totals: np.ndarray
    positives: np.ndarray

    def __len__(self):
        return len(self.weights)

    def fraction(self, i):
        return Fraction(int(self.totals[i]), 2 * int(self.positives[i]))

    def identity_holds(self):
        return all(self.fraction(i) * 2 * int(self.positives[i]) == int(self.totals[i])
                   for i in range(len(self)))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "totals": self.totals.tolist(),
                "positives": self.positives.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=np.float64),
                   np.asarray(d["totals"], dtype=np.int64),
                   np.asarray(d["positives"], dtype=np.int64))


def compute_class_weights(labels, names: Optional[Sequence[str]] = None) -> ClassWeights:
    y = as_label_array(labels)
    valid = y != INVALID
    totals = valid.sum(axis=0).astype(np.int64)
    positives = (y == 1).sum(axis=0).astype(np.int64)
    for i, p in enumerate(positives):
        if p == 0:
            raise DegenerateClassError(i, names[i] if names is not None else None)
    weights = np.array([float(Fraction(int(t), 2 * int(p))) for t, p in zip(totals, positives)])
    return ClassWeights(weights, totals, positives)


def weighted_bce(labels, probs, class_weights):
    """Mean over samples of the per-sample mean over valid AUs of
    ``-[w_i y_i log p_i + (1 - y_i) log(1 - p_i)]``.

    ``probs`` may be a :class:`Tensor` on an active tape; the result is then
    differentiable with respect to it.  ``class_weights`` is a
    :class:`ClassWeights` or a plain length-C sequence.
    """
    y = as_label_array(labels)
    probs = ad.as_tensor(probs)
    if probs.shape != y.shape:
        raise DimensionError(f"labels {y.shape} and predictions {probs.shape} differ in shape")
    w = class_weights.weights if isinstance(class_weights, ClassWeights) else np.asarray(class_weights)
    if w.shape != (y.shape[1],):
        raise DimensionError(f"expected {y.shape[1]} class weights, got {w.shape}")
    valid = y != INVALID
    per_sample = valid.sum(axis=1)
    used = per_sample > 0
    if not used.any():
        raise EmptyLossError("every label in the batch is invalid")
    dtype = probs.dtype
    # coefficient folds the mean over valid AUs and the mean over samples
    coef = np.zeros(y.shape, dtype=dtype)
    coef[used] = 1.0 / per_sample[used, None]
    coef *= valid / used.sum()
    pos = ((y == 1) * w).astype(dtype)
    neg = (y == 0).astype(dtype)
    p = ad.clip(probs, PROB_EPS, 1 - PROB_EPS)
    terms = ad.mul(ad.log(p), pos) + ad.mul(ad.log(ad.sub(1.0, p)), neg)
    return ad.neg(ad.sum(ad.mul(terms, coef)))


def binarize(probs, threshold=0.5):
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    p = probs.data if isinstance(probs, ad.Tensor) else np.asarray(probs)
    return (p >= threshold).astype(np.int64)


@dataclass
class MetricReport:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    names: tuple = AU_NAMES

    @property
    def support(self):
        return self.tp + self.fn

    @property
    def f1(self):
        denom = 2 * self.tp + self.fp + self.fn
        out = np.zeros(len(self.tp), dtype=np.float64)
        nz = denom > 0
        out[nz] = 2 * self.tp[nz] / denom[nz]
        return out

    @property
    def macro_f1(self):
        return float(np.mean(self.f1))

    def __add__(self, other):
        if tuple(self.names) != tuple(other.names):
            raise ContractError("cannot merge reports over different AU sets")
        return MetricReport(self.tp + other.tp, self.fp + other.fp,
                            self.fn + other.fn, self.tn + other.tn, self.names)

    def to_dict(self, counts=False):
        d = {"per_au": {n: float(v) for n, v in zip(self.names, self.f1)},
             "macro_f1": self.macro_f1}
        if counts:
            d["counts"] = {n: {"tp": int(a), "fp": int(b), "fn": int(c), "tn": int(e)}
                           for n, a, b, c, e in zip(self.names, self.tp, self.fp, self.fn, self.tn)}
        return d

    def to_json(self, counts=False):
        return json.dumps(self.to_dict(counts), indent=2)

    def format(self, verbose=False):
        lines = []
        for i, (name, f1) in enumerate(zip(self.names, self.f1)):
            line = f"{name} {f1:.6f}"
            if verbose:
                line += (f" tp={self.tp[i]} fp={self.fp[i]} fn={self.fn[i]}"
                         f" tn={self.tn[i]}")
            lines.append(line)
        lines.append(f"macro_f1 {self.macro_f1:.6f}")
        return "\n".join(lines)


def macro_f1(preds, labels, names: Optional[Sequence[str]] = None) -> MetricReport:
    """Per-AU confusion counts over valid entries and their F1 scores.

    F1 is ``2TP / (2TP + FP + FN)``, taken as 0 when the denominator is 0.
    """
    y = as_label_array(labels)
    p = np.asarray(preds)
    if p.ndim == 1:
        p = p[None, :]
    if p.shape != y.shape:
        raise DimensionError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    valid = y != INVALID
    pos_pred = (p == 1) & valid
    neg_pred = (p != 1) & valid
    tp = (pos_pred & (y == 1)).sum(axis=0)
    fp = (pos_pred & (y == 0)).sum(axis=0)
    fn = (neg_pred & (y == 1)).sum(axis=0)
    tn = (neg_pred & (y == 0)).sum(axis=0)
    if names is None:
        names = AU_NAMES if y.shape[1] == len(AU_NAMES) else tuple(f"AU{i}" for i in range(y.shape[1]))
    return MetricReport(tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64),
                        tn.astype(np.int64), tuple(names))
