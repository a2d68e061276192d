"""Toy speech encoder, frozen layered language model, and their graft.

The language model is a stack of twelve position-wise blocks on top of
sinusoidal-position token embeddings, with a weight-tied output head.  It
is frozen at construction; only the speech side and the optional
classifier are ever handed to an optimizer.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .cif import (CifConfig, FiredAlignment, FrameSequence, TailPolicy, WeightPredictor,
                  integrate_and_fire, predict_weights)
from .diffcore import Tensor
from .errors import (CorruptCheckpoint, DepthOutOfRange, DimensionMismatch, IdOutOfRange,
                     TooShortInput)

NUM_LAYERS = 12
GRAFT_DEPTHS = (3, 6, 9, 12)
NUM_CLASSES = 3


class Module:
    """Named parameter container; subclasses fill ``self.params``."""

    def __init__(self):
        self.params = {}

    def named_parameters(self, prefix=""):
        return {prefix + k: v for k, v in self.params.items()}

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None


def _param(value, trainable):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable)


class FeedForwardBlock(Module):
    """Post-norm residual block: LN(x + W2 relu(W1 x + b1) + b2)."""

    def __init__(self, dim, hidden, rng, scale=1.0, trainable=True):
        super().__init__()
        self.params = {
            "w1": _param(rng.normal(0.0, scale / math.sqrt(dim), (dim, hidden)), trainable),
            "b1": _param(np.zeros(hidden), trainable),
            "w2": _param(rng.normal(0.0, scale / math.sqrt(hidden), (hidden, dim)), trainable),
            "b2": _param(np.zeros(dim), trainable),
            "ln_g": _param(np.ones(dim), trainable),
            "ln_b": _param(np.zeros(dim), trainable),
        }

    def __call__(self, x):
        p = self.params
        h = dc.relu(dc.matmul(x, p["w1"]) + p["b1"])
        h = dc.matmul(h, p["w2"]) + p["b2"]
        return dc.layer_norm(x + h, p["ln_g"], p["ln_b"])


class AttentionBlock(Module):
    """Single-head self-attention with residual and post-norm."""

    def __init__(self, dim, rng, scale=1.0, trainable=True):
        super().__init__()
        s = scale / math.sqrt(dim)
        self.params = {name: _param(rng.normal(0.0, s, (dim, dim)), trainable)
                       for name in ("wq", "wk", "wv", "wo")}
        self.params["ln_g"] = _param(np.ones(dim), trainable)
        self.params["ln_b"] = _param(np.zeros(dim), trainable)
        self.dim = dim

    def __call__(self, x):
        p = self.params
        q, k, v = (dc.matmul(x, p[n]) for n in ("wq", "wk", "wv"))
        att = dc.row_softmax(dc.matmul(q, dc.transpose(k)) * (1.0 / math.sqrt(self.dim)))
        h = dc.matmul(dc.matmul(att, v), p["wo"])
        return dc.layer_norm(x + h, p["ln_g"], p["ln_b"])


class LinguisticBlock(Module):
    def __init__(self, dim, hidden, rng, scale, attention=False):
        super().__init__()
        self.attn = AttentionBlock(dim, rng, scale, trainable=False) if attention else None
        self.ffn = FeedForwardBlock(dim, hidden, rng, scale, trainable=False)
        self.params = dict(self.ffn.named_parameters("ffn."))
        if self.attn is not None:
            self.params.update(self.attn.named_parameters("attn."))

    def __call__(self, x):
        if self.attn is not None:
            x = self.attn(x)
        return self.ffn(x)


def sinusoidal_positions(length, dim):
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


class LinguisticModel(Module):
    """Frozen stand-in for a pretrained text encoder.

    ``layer_output(ids, 0)`` is embeddings plus positions; depth ``i`` adds
    blocks ``1..i``.  The head is the transposed embedding table.
    """

    def __init__(self, vocab=32, dim=32, hidden=64, num_layers=NUM_LAYERS, seed=0,
                 max_len=128, block_scale=0.5, attention=False):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab, self.dim, self.hidden = vocab, dim, hidden
        self.num_layers, self.max_len = num_layers, max_len
        self.attention = attention
        self.block_scale = block_scale
        self.embedding = _param(rng.normal(0.0, 1.0, (vocab, dim)), False)
        self.positions = sinusoidal_positions(max_len, dim)
        self.layers = [LinguisticBlock(dim, hidden, rng, block_scale, attention)
                       for _ in range(num_layers)]
        self.params = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers, start=1):
            self.params.update(layer.named_parameters(f"layer{i}."))
        self.frozen = True

    def _check_ids(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise IdOutOfRange("token ids must be a nonempty vector")
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise IdOutOfRange(f"token id outside [0, {self.vocab})")
        if ids.size > self.max_len:
            raise IdOutOfRange(f"sequence longer than {self.max_len}")
        return ids

    def _check_depth(self, depth):
        if not 0 <= depth <= self.num_layers:
            raise DepthOutOfRange(f"depth {depth} outside [0, {self.num_layers}]")

    def embed(self, ids):
        ids = self._check_ids(ids)
        return dc.gather(self.embedding, ids) + self.positions[: ids.size]

    def run_layers(self, x, start, stop):
        """Apply blocks ``start+1 .. stop`` (1-based) to ``x``."""
        self._check_depth(start)
        self._check_depth(stop)
        for layer in self.layers[start:stop]:
            x = layer(x)
        return x

    def layer_output(self, ids, depth):
        self._check_depth(depth)
        return self.run_layers(self.embed(ids), 0, depth)

    def head_logits(self, states):
        return dc.matmul(states, dc.transpose(self.embedding))

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


class AcousticEncoder(Module):
    """Two stride-2 conv blocks then two residual feed-forward blocks."""

    def __init__(self, d_in=16, dim=32, hidden=64, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d_in, self.dim = d_in, dim
        self.params = {
            "conv1_w": _param(rng.normal(0.0, 1.0 / math.sqrt(3 * d_in), (3, d_in, dim)), True),
            "conv1_b": _param(np.zeros(dim), True),
            "conv2_w": _param(rng.normal(0.0, 1.0 / math.sqrt(3 * dim), (3, dim, dim)), True),
            "conv2_b": _param(np.zeros(dim), True),
        }
        self.blocks = [FeedForwardBlock(dim, hidden, rng) for _ in range(2)]
        for i, block in enumerate(self.blocks, start=1):
            self.params.update(block.named_parameters(f"ffn{i}."))

    @classmethod
    def zeros(cls, d_in=16, dim=32, hidden=64):
        enc = cls(d_in, dim, hidden)
        for p in enc.params.values():
            p.data[...] = 0.0
        return enc

    def __call__(self, raw):
        p = self.params
        h = dc.relu(dc.conv1d(raw, p["conv1_w"], p["conv1_b"], stride=2, padding=1))
        h = dc.relu(dc.conv1d(h, p["conv2_w"], p["conv2_b"], stride=2, padding=1))
        for block in self.blocks:
            h = block(h)
        return h


def encoded_length(m_raw):
    return math.ceil(math.ceil(m_raw / 2) / 2)


def encode_acoustic(raw, encoder: AcousticEncoder, raw_hop_ms=5.0, utterance_id=""):
    raw = dc.as_tensor(raw)
    if raw.ndim != 2 or raw.shape[1] != encoder.d_in:
        raise DimensionMismatch(f"raw frames {raw.shape} vs encoder input width {encoder.d_in}")
    if raw.shape[0] < 4:
        raise TooShortInput(f"need at least 4 raw frames, got {raw.shape[0]}")
    return FrameSequence(encoder(raw), 4.0 * raw_hop_ms, utterance_id)


class ClassifierHead(Module):
    """Mean-pool over tokens, then a linear map to three class logits."""

    def __init__(self, dim, seed=0, num_classes=NUM_CLASSES):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.params = {
            "w": _param(rng.normal(0.0, 0.01, (dim, num_classes)), True),
            "b": _param(np.zeros(num_classes), True),
        }

    def __call__(self, states):
        pooled = dc.tmean(states, axis=0)
        return dc.matmul(pooled, self.params["w"]) + self.params["b"]


@dataclass
class TokenSequence:
    states: Tensor
    ids: np.ndarray


class GraftedModel:
    """Speech path grafted onto the frozen model above layer ``graft_depth``."""

    def __init__(self, acoustic: AcousticEncoder, predictor: WeightPredictor,
                 linguistic: LinguisticModel, graft_depth=3, cif_config=None,
                 classifier: ClassifierHead | None = None, raw_hop_ms=5.0):
        if acoustic.dim != linguistic.dim or predictor.dim != acoustic.dim:
            raise DimensionMismatch(
                f"speech width {acoustic.dim} vs text width {linguistic.dim}")
        if graft_depth not in range(0, linguistic.num_layers + 1):
            raise DepthOutOfRange(f"graft depth {graft_depth}")
        self.acoustic = acoustic
        self.predictor = predictor
        self.linguistic = linguistic
        self.graft_depth = int(graft_depth)
        self.cif_config = CifConfig() if cif_config is None else cif_config
        self.classifier = classifier
        self.raw_hop_ms = raw_hop_ms
        self.meta = {}

    @classmethod
    def build(cls, vocab=32, d_in=16, dim=32, hidden=64, graft_depth=3, seed=0,
              lm_seed=None, attention=False, raw_hop_ms=5.0):
        lm_seed = seed if lm_seed is None else lm_seed
        rng = np.random.default_rng([seed, 1])
        model = cls(AcousticEncoder(d_in, dim, hidden, seed=seed),
                    WeightPredictor(dim, rng),
                    LinguisticModel(vocab, dim, hidden, seed=lm_seed, attention=attention),
                    graft_depth=graft_depth, raw_hop_ms=raw_hop_ms)
        model.meta = {"vocab": vocab, "d_in": d_in, "dim": dim, "hidden": hidden,
                      "seed": seed, "lm_seed": lm_seed, "attention": attention}
        return model

    def trainable_parameters(self, include_speech=True, include_classifier=True):
        params = {}
        if include_speech:
            params.update(self.acoustic.named_parameters("acoustic."))
            params.update(self.predictor.named_parameters("predictor."))
        if include_classifier and self.classifier is not None:
            params.update(self.classifier.named_parameters("classifier."))
        return params

    def named_parameters(self):
        params = self.trainable_parameters()
        params.update(self.linguistic.named_parameters("linguistic."))
        return params


def linguistic_targets(model: GraftedModel | LinguisticModel, token_ids, depth=None):
    lm = model.linguistic if isinstance(model, GraftedModel) else model
    if depth is None:
        depth = model.graft_depth
    ids = np.asarray(token_ids, dtype=np.int64)
    states = lm.layer_output(ids, depth)
    return TokenSequence(states.detach(), ids)


def graft_forward(a_hat, model: GraftedModel):
    """Feed aligned speech vectors through frozen blocks above the graft."""
    if isinstance(a_hat, FiredAlignment):
        a_hat = a_hat.aligned
    a_hat = dc.as_tensor(a_hat)
    lm = model.linguistic
    if a_hat.ndim != 2 or a_hat.shape[1] != lm.dim:
        raise DimensionMismatch(f"aligned rows {a_hat.shape} vs model width {lm.dim}")
    top = lm.run_layers(a_hat, model.graft_depth, lm.num_layers)
    return top, lm.head_logits(top)


def top5_candidates(logits_row):
    row = np.asarray(logits_row.data if isinstance(logits_row, Tensor) else logits_row)
    if row.size < 5:
        raise ValueError("need at least five candidates")
    return [int(i) for i in np.argsort(-row, kind="stable")[:5]]


@dataclass
class InferenceResult:
    token_ids: np.ndarray
    class_probs: np.ndarray | None
    fired: FiredAlignment
    logits: np.ndarray


def inference_forward(raw, model: GraftedModel) -> InferenceResult:
    """Speech -> CIF (unscaled) -> frozen blocks above the graft -> ids.

    Blocks ``1..graft_depth`` of the language model are never evaluated.
    """
    frames = encode_acoustic(raw, model.acoustic, model.raw_hop_ms)
    alpha = predict_weights(frames, model.predictor)
    fired = integrate_and_fire(frames, alpha, model.cif_config)
    top, logits = graft_forward(fired, model)
    probs = None
    if model.classifier is not None:
        probs = dc.row_softmax(dc.reshape(model.classifier(top), (1, -1))).data[0]
    return InferenceResult(np.argmax(logits.data, axis=1), probs, fired, logits.data)


# ----------------------------------------------------------------------
# checkpoints: b"WABT", u32 version, u32 header length, JSON header,
# u32 block count, then per block: u32 name length, name, tensor blob
# ----------------------------------------------------------------------
CHECKPOINT_MAGIC = b"WABT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: GraftedModel, path, extra=None):
    header = dict(model.meta)
    header.update({
        "graft_depth": model.graft_depth,
        "raw_hop_ms": model.raw_hop_ms,
        "beta": model.cif_config.beta,
        "tail_policy": model.cif_config.tail_policy.value,
        "epsilon_residual": model.cif_config.epsilon_residual,
        "has_classifier": model.classifier is not None,
    })
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        dc.write_tensor(buf, params[name].data)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> GraftedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)
    try:
        if stream.read(4) != CHECKPOINT_MAGIC:
            raise CorruptCheckpoint(f"{path}: not a checkpoint")
        version, hlen = struct.unpack("<II", stream.read(8))
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"{path}: unsupported version {version}")
        header = json.loads(stream.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", stream.read(4))
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", stream.read(4))
            name = stream.read(nlen).decode("utf-8")
            blocks[name] = dc.read_tensor(stream)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from None

    model = GraftedModel.build(vocab=header["vocab"], d_in=header["d_in"], dim=header["dim"],
                               hidden=header["hidden"], graft_depth=header["graft_depth"],
                               seed=header["seed"], lm_seed=header["lm_seed"],
                               attention=header["attention"], raw_hop_ms=header["raw_hop_ms"])
    model.cif_config = CifConfig(header["beta"], TailPolicy(header["tail_policy"]),
                                 header["epsilon_residual"])
    if header.get("has_classifier"):
        model.classifier = ClassifierHead(model.linguistic.dim)
    params = model.named_parameters()
    if set(params) != set(blocks):
        raise CorruptCheckpoint(f"{path}: parameter names do not match the architecture")
    for name, value in blocks.items():
        if params[name].data.shape != value.shape:
            raise CorruptCheckpoint(f"{path}: shape mismatch for {name}")
        params[name].data = value.copy()
    model.meta.update({k: v for k, v in header.items() if k not in model.meta})
    return model
