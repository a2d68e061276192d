"""Training objectives: cosine baseline, symmetric InfoNCE, subword CE, total."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import IdOutOfRange, NonFiniteComponent, NonPositiveTemperature, ShapeMismatch


class AlignMode(enum.Enum):
    COSINE = "cos"
    INFONCE = "infonce"


class Reduction(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class LossConfig:
    tau: float = 0.1
    align_mode: AlignMode = AlignMode.INFONCE
    weights: tuple = (1.0, 1.0, 1.0)  # (align, quantity, subword)
    cosine_reduction: Reduction = Reduction.SUM
    cross_utterance_negatives: bool = False

    def __post_init__(self):
        self.align_mode = AlignMode(self.align_mode)
        self.cosine_reduction = Reduction(self.cosine_reduction)
        self.weights = tuple(float(w) for w in self.weights)
        if not self.tau > 0:
            raise NonPositiveTemperature(f"tau must be positive, got {self.tau}")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ValueError("loss weights must be three nonnegative reals")


@dataclass
class LossBundle:
    align: Tensor
    quantity: Tensor
    subword: Tensor
    total: Tensor

    def values(self):
        return {k: float(getattr(self, k).data) for k in ("align", "quantity", "subword", "total")}


def _paired(x, y):
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    if x.ndim != 2 or x.shape != y.shape or x.shape[0] < 1:
        raise ShapeMismatch(f"paired rows needed, got {x.shape} and {y.shape}")
    return x, y


def cosine_align_loss(a_hat, l, reduction=Reduction.SUM):
    """sum_i (1 - cos(a_i, l_i)), or the mean over rows."""
    a_hat, l = _paired(a_hat, l)
    cos = dc.tsum(dc.normalize_rows(a_hat) * dc.normalize_rows(l), axis=1)
    per_row = 1.0 - cos
    if Reduction(reduction) is Reduction.MEAN:
        return dc.tmean(per_row)
    return dc.tsum(per_row)


def info_nce(x, y, tau=0.1):
    """Mean over rows i of -log softmax_j(cos(x_i, y_j) / tau)[i].

    Negatives for row i are the other rows of ``y``.
    """
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    x, y = _paired(x, y)
    logits = dc.cosine_matrix(x, y) * (1.0 / tau)
    return dc.softmax_cross_entropy(logits, np.arange(x.shape[0]))


def aligned_token_similarity_loss(a_hat, l, tau=0.1):
    return 0.5 * info_nce(a_hat, l, tau) + 0.5 * info_nce(l, a_hat, tau)


def align_loss(a_hat, l, config: LossConfig):
    if config.align_mode is AlignMode.COSINE:
        return cosine_align_loss(a_hat, l, config.cosine_reduction)
    return aligned_token_similarity_loss(a_hat, l, config.tau)


def subword_loss(top_states, head, gold_ids):
    """Token-averaged cross-entropy of the tied output head.

    ``head`` is the (vocab, d) projection; logits are ``top_states @ head.T``.
    """
    head = dc.as_tensor(head)
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    vocab = head.shape[0]
    if gold_ids.size and (gold_ids.min() < 0 or gold_ids.max() >= vocab):
        raise IdOutOfRange(f"gold id outside [0, {vocab})")
    logits = dc.matmul(top_states, dc.transpose(head))
    return dc.softmax_cross_entropy(logits, gold_ids)


def logits_cross_entropy(logits, gold_ids):
    logits = dc.as_tensor(logits)
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    if gold_ids.size and (gold_ids.min() < 0 or gold_ids.max() >= logits.shape[1]):
        raise IdOutOfRange(f"gold id outside [0, {logits.shape[1]})")
    return dc.softmax_cross_entropy(logits, gold_ids)


def total_loss(align, quantity, subword, config: LossConfig | None = None) -> LossBundle:
    config = LossConfig() if config is None else config
    parts = [dc.as_tensor(x) for x in (align, quantity, subword)]
    for name, part in zip(("align", "quantity", "subword"), parts):
        if not np.isfinite(part.data).all():
            raise NonFiniteComponent(f"{name} loss is not finite")
    w_a, w_q, w_s = config.weights
    total = w_a * parts[0] + w_q * parts[1] + w_s * parts[2]
    return LossBundle(parts[0], parts[1], parts[2], total)
