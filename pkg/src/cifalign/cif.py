"""Serial continuous integrate-and-fire (CIF) aligner.

Frame weights ``alpha_t`` are accumulated left to right; every time the
running total crosses a multiple of the threshold ``beta`` a token-level
vector is emitted.  A frame that straddles a crossing is split between the
token it completes and the next one.

Written in closed form, token ``k`` (1-based) owns the slice
``[(k-1)*beta, k*beta]`` of the cumulative weight axis, and frame ``t`` owns
``[S_{t-1}, S_t]`` with ``S_t = alpha_1 + ... + alpha_t``.  The contribution
of frame ``t`` to token ``k`` is the overlap of those two intervals, which
is what :func:`integrate_and_fire` computes with differentiable clamps.
Firing positions enter only through the clamp masks, so they are locally
constant under differentiation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DegenerateWeights, EmptyOutput, ShapeMismatch


class TailPolicy(enum.Enum):
    FIRE_IF_AT_LEAST_HALF = "fire_if_at_least_half"
    ALWAYS_FIRE = "always_fire"
    DISCARD = "discard"


@dataclass
class CifConfig:
    beta: float = 1.0
    tail_policy: TailPolicy = TailPolicy.FIRE_IF_AT_LEAST_HALF
    epsilon_residual: float = 1e-6

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("firing threshold beta must be positive")
        self.tail_policy = TailPolicy(self.tail_policy)


@dataclass
class FrameSequence:
    features: Tensor
    hop_ms: float
    utterance_id: str = ""

    def __post_init__(self):
        self.features = dc.as_tensor(self.features)
        if self.features.ndim != 2 or min(self.features.shape) < 1:
            raise ShapeMismatch(f"frame features must be M x d_a, got {self.features.shape}")
        if not self.hop_ms > 0:
            raise ValueError("hop_ms must be positive")

    @property
    def num_frames(self):
        return self.features.shape[0]


@dataclass
class AlignmentWeights:
    alpha: Tensor
    scaled: bool = False
    target: int | None = None

    def __post_init__(self):
        self.alpha = dc.as_tensor(self.alpha)
        if self.alpha.ndim != 1:
            raise ShapeMismatch("alpha must be a vector")

    @property
    def total(self):
        return float(self.alpha.data.sum())


@dataclass
class FiredAlignment:
    aligned: Tensor
    contributions: np.ndarray  # (fired_count, M); row k = token k, column t = frame t
    n_predicted: float
    fired_count: int
    hop_ms: float = 0.0

    def contribution_map(self):
        """Sparse view {(t, k): c_tk} over nonzero contributions (0-based)."""
        ks, ts = np.nonzero(self.contributions)
        return {(int(t), int(k)): float(self.contributions[k, t]) for k, t in zip(ks, ts)}

    def firing_frames(self):
        """Index of the last contributing frame of each token."""
        return tuple(int(np.nonzero(row)[0][-1]) for row in self.contributions)


@dataclass
class BoundarySet:
    entries: list = field(default_factory=list)  # (token_index, left_ms, right_ms)

    def __len__(self):
        return len(self.entries)

    @property
    def lefts(self):
        return np.array([e[1] for e in self.entries], dtype=np.float64)

    @property
    def rights(self):
        return np.array([e[2] for e in self.entries], dtype=np.float64)

    def to_text(self):
        return "".join(f"{k}\t{left:.3f}\t{right:.3f}\n" for k, left, right in self.entries)

    @classmethod
    def from_text(cls, text):
        entries = []
        for line in text.splitlines():
            if not line.strip():
                continue
            k, left, right = line.split("\t")
            entries.append((int(k), float(left), float(right)))
        return cls(entries)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


class WeightPredictor:
    """conv1d (kernel 3, width-preserving) -> layer norm -> linear -> sigmoid."""

    def __init__(self, dim, rng=None, init_scale=None):
        rng = np.random.default_rng(0) if rng is None else rng
        scale = 1.0 / math.sqrt(3 * dim) if init_scale is None else init_scale
        self.dim = dim
        self.params = {
            "conv_w": Tensor(rng.normal(0.0, scale, (3, dim, dim)), requires_grad=True),
            "conv_b": Tensor(np.zeros(dim), requires_grad=True),
            "ln_g": Tensor(np.ones(dim), requires_grad=True),
            "ln_b": Tensor(np.zeros(dim), requires_grad=True),
            "out_w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), dim), requires_grad=True),
            "out_b": Tensor(np.zeros(()), requires_grad=True),
        }

    @classmethod
    def zeros(cls, dim):
        pred = cls(dim)
        for p in pred.params.values():
            p.data[...] = 0.0
        return pred

    def named_parameters(self, prefix="predictor."):
        return {prefix + k: v for k, v in self.params.items()}


def predict_weights(frames: FrameSequence, predictor: WeightPredictor) -> AlignmentWeights:
    p = predictor.params
    if frames.features.shape[1] != predictor.dim:
        raise ShapeMismatch(f"predictor width {predictor.dim} vs frames {frames.features.shape[1]}")
    h = dc.conv1d(frames.features, p["conv_w"], p["conv_b"], stride=1, padding=1)
    h = dc.layer_norm(h, p["ln_g"], p["ln_b"])
    logits = dc.matmul(h, p["out_w"]) + p["out_b"]
    return AlignmentWeights(dc.sigmoid(logits), scaled=False)


def scale_weights(alpha: AlignmentWeights, n_target: int, beta=1.0) -> AlignmentWeights:
    """Rescale so the weights sum to ``n_target * beta`` (teacher forcing)."""
    total = dc.tsum(alpha.alpha)
    if not total.item() >= 1e-9:
        raise DegenerateWeights(f"weight mass {total.item():.3g} too small to rescale")
    if n_target < 1:
        raise ValueError("n_target must be a positive integer")
    return AlignmentWeights(alpha.alpha * (float(n_target) * beta) / total,
                            scaled=True, target=int(n_target))


def quantity_loss(alpha: AlignmentWeights, n_target) -> Tensor:
    """|sum(alpha) - N| on pre-scaling weights."""
    return dc.tabs(dc.tsum(alpha.alpha) - float(n_target))


def _token_intervals(total, n_full, config: CifConfig, target):
    beta = config.beta
    if target is not None:
        count = target
        lo = beta * np.arange(count, dtype=np.float64)
        hi = beta * np.arange(1, count + 1, dtype=np.float64)
        hi[-1] = np.inf  # absorbs a rounding-level residual
        return lo, hi
    residual = total - n_full * beta
    policy = config.tail_policy
    fire_tail = (
        (policy is TailPolicy.FIRE_IF_AT_LEAST_HALF and residual >= beta / 2)
        or (policy is TailPolicy.ALWAYS_FIRE and residual > config.epsilon_residual)
    )
    count = n_full + int(fire_tail)
    lo = beta * np.arange(count, dtype=np.float64)
    hi = beta * np.arange(1, count + 1, dtype=np.float64)
    if fire_tail:
        hi[-1] = np.inf
    return lo, hi


def integrate_and_fire(frames: FrameSequence, alpha: AlignmentWeights,
                       config: CifConfig | None = None) -> FiredAlignment:
    """Fire token vectors from frame vectors.

    With scaled weights carrying a target, exactly ``target`` tokens fire;
    otherwise whole-threshold crossings fire and the tail policy decides
    the leftover mass.
    """
    config = CifConfig() if config is None else config
    a = alpha.alpha
    if a.shape[0] != frames.num_frames:
        raise ShapeMismatch(f"{a.shape[0]} weights for {frames.num_frames} frames")
    cum = dc.cumsum(a)
    total = float(cum.data[-1])
    n_full = int(math.floor(total / config.beta))
    target = alpha.target if alpha.scaled else None
    lo, hi = _token_intervals(total, n_full, config, target)
    if lo.size == 0:
        raise EmptyOutput(f"no token fired (weight mass {total:.4f}, beta {config.beta})")

    prev = dc.concat([Tensor(np.zeros(1)), cum[:-1]])
    lo_col, hi_col = lo[:, None], hi[:, None]
    upper = dc.clip(dc.reshape(cum, (1, -1)), lo_col, hi_col)
    lower = dc.clip(dc.reshape(prev, (1, -1)), lo_col, hi_col)
    contrib = upper - lower
    aligned = dc.matmul(contrib, frames.features)
    return FiredAlignment(aligned, contrib.data.copy(), total, int(lo.size), frames.hop_ms)


def firing_signature(alpha_values, config: CifConfig | None = None, target=None):
    """Discrete firing pattern for a weight vector: which frame completes
    which token, plus the fired count.  Used to exclude finite-difference
    probes that cross a threshold."""
    config = CifConfig() if config is None else config
    cum = np.cumsum(np.asarray(alpha_values, dtype=np.float64))
    total = float(cum[-1])
    n_full = int(math.floor(total / config.beta))
    lo, hi = _token_intervals(total, n_full, config, target)
    finite_hi = hi[np.isfinite(hi)]
    return (int(lo.size),) + tuple(int(np.searchsorted(cum, h)) for h in finite_hi)


def extract_boundaries(fired: FiredAlignment, hop_ms: float | None = None) -> BoundarySet:
    """Sub-frame token boundaries in milliseconds.

    A frame shared by several tokens is divided in proportion to its weight
    shares, so a token's left edge sits after the shares of earlier tokens
    in its first frame and its right edge after its own share in its last.
    """
    hop = fired.hop_ms if hop_ms is None else hop_ms
    c = fired.contributions
    w = c.sum(axis=0)
    safe_w = np.where(w < 1e-12, np.inf, w)
    before = np.cumsum(c, axis=0) - c  # mass of earlier tokens in each frame
    entries = []
    for k in range(c.shape[0]):
        frames = np.nonzero(c[k] > 0)[0]
        if frames.size == 0:
            continue
        first, last = int(frames[0]), int(frames[-1])
        left = (first + before[k, first] / safe_w[first]) * hop
        right = (last + (before[k, last] + c[k, last]) / safe_w[last]) * hop
        entries.append((k, float(left), float(right)))
    return BoundarySet(entries)
