"""Deterministic paired speech/text corpus with exact word boundaries.

Each vocabulary entry owns a fixed prototype frame vector; an utterance
realises every token as a run of 3-9 noisy copies of its prototype, so the
gold segmentation is known to the raw frame.  Labels are the sign of the
summed token valences (negative / neutral / positive -> 0 / 1 / 2).

On disk a corpus is a directory with ``manifest.jsonl``, ``corpus.json``
(the generating config), ``frames/<id>.tnsr`` and ``boundaries/<id>.tsv``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .cif import BoundarySet
from .errors import BadFractions, CorruptFile, CorruptTensor, IoFailure

MANIFEST = "manifest.jsonl"
CORPUS_CONFIG = "corpus.json"


@dataclass
class SynthConfig:
    vocab: int = 32
    d_in: int = 16
    frames_per_token: tuple = (3, 9)
    raw_hop_ms: float = 5.0
    noise_sigma: float = 0.1
    tokens_per_utt: tuple = (4, 12)
    sentiment_map: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        self.frames_per_token = tuple(int(x) for x in self.frames_per_token)
        self.tokens_per_utt = tuple(int(x) for x in self.tokens_per_utt)
        for name in ("frames_per_token", "tokens_per_utt"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a nonempty positive range")
        if self.vocab < 8:
            raise ValueError("vocab must be at least 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.sentiment_map is None:
            self.sentiment_map = default_sentiment_map(self.vocab, self.seed)
        self.sentiment_map = tuple(int(v) for v in self.sentiment_map)
        if len(self.sentiment_map) != self.vocab or not set(self.sentiment_map) <= {-1, 0, 1}:
            raise ValueError("sentiment_map needs one value in {-1, 0, 1} per token")


def default_sentiment_map(vocab, seed):
    """vocab/8 negative and vocab/8 positive tokens, the rest neutral.

    That ratio keeps the three label classes near a third each for
    4-12 token utterances.
    """
    n_polar = max(1, vocab // 8)
    values = np.zeros(vocab, dtype=np.int64)
    order = np.random.default_rng([seed, 0xBEEF]).permutation(vocab)
    values[order[:n_polar]] = -1
    values[order[n_polar:2 * n_polar]] = 1
    return tuple(int(v) for v in values)


@dataclass
class Utterance:
    utterance_id: str
    token_ids: np.ndarray
    raw_frames: np.ndarray
    gold_boundaries: BoundarySet
    label: int
    raw_hop_ms: float = 5.0
    frame_counts: np.ndarray = field(default=None, repr=False)


def sentiment_label(token_ids, sentiment_map):
    total = int(sum(sentiment_map[int(t)] for t in token_ids))
    return int(np.sign(total)) + 1


def make_prototypes(config: SynthConfig, max_redraws=100):
    rng = np.random.default_rng([config.seed, 0x5EED])
    for _ in range(max_redraws):
        protos = rng.normal(0.0, 1.0, (config.vocab, config.d_in))
        diff = protos[:, None, :] - protos[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() > 4.0 * config.noise_sigma:
            return protos
    raise ValueError("could not draw well-separated prototypes; lower noise_sigma")


def make_utterance(config: SynthConfig, index, prototypes):
    rng = np.random.default_rng([config.seed, index])
    n = int(rng.integers(config.tokens_per_utt[0], config.tokens_per_utt[1] + 1))
    ids = rng.integers(0, config.vocab, n)
    counts = rng.integers(config.frames_per_token[0], config.frames_per_token[1] + 1, n)
    frames = np.repeat(prototypes[ids], counts, axis=0)
    if config.noise_sigma > 0:
        frames = frames + rng.normal(0.0, config.noise_sigma, frames.shape)
    edges = np.concatenate([[0], np.cumsum(counts)]) * config.raw_hop_ms
    gold = BoundarySet([(k, float(edges[k]), float(edges[k + 1])) for k in range(n)])
    return Utterance(f"utt{index:06d}", ids.astype(np.int64), frames, gold,
                     sentiment_label(ids, config.sentiment_map), config.raw_hop_ms, counts)


def generate_utterances(config: SynthConfig, count):
    if count < 1:
        raise ValueError("count must be at least 1")
    protos = make_prototypes(config)
    return [make_utterance(config, i, protos) for i in range(count)]


def generate_corpus(config: SynthConfig, count, out_dir):
    """Write ``count`` utterances under ``out_dir``; returns them in memory."""
    utts = generate_utterances(config, count)
    try:
        os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "boundaries"), exist_ok=True)
        cfg = asdict(config)
        with open(os.path.join(out_dir, CORPUS_CONFIG), "w", encoding="utf-8") as fh:
            json.dump({"count": count, "config": cfg}, fh, sort_keys=True, indent=1)
        lines = []
        for u in utts:
            frames_rel = f"frames/{u.utterance_id}.tnsr"
            bounds_rel = f"boundaries/{u.utterance_id}.tsv"
            dc.save_tensor(os.path.join(out_dir, frames_rel), u.raw_frames)
            u.gold_boundaries.save(os.path.join(out_dir, bounds_rel))
            lines.append(json.dumps({
                "id": u.utterance_id, "N": int(u.token_ids.size),
                "M_raw": int(u.raw_frames.shape[0]), "label": u.label,
                "token_ids": [int(t) for t in u.token_ids], "raw_hop_ms": u.raw_hop_ms,
                "frames": frames_rel, "boundaries": bounds_rel,
            }, sort_keys=True))
        with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IoFailure(f"writing corpus to {out_dir}: {exc}") from exc
    return utts


def read_corpus_config(path):
    with open(os.path.join(path, CORPUS_CONFIG), encoding="utf-8") as fh:
        return SynthConfig(**json.load(fh)["config"])


def load_corpus(path):
    """Yield utterances from a corpus directory in manifest order."""
    manifest = os.path.join(path, MANIFEST)
    try:
        fh = open(manifest, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot open {manifest}: {exc}") from exc
    with fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames = dc.load_tensor(os.path.join(path, rec["frames"]))
                gold = BoundarySet.load(os.path.join(path, rec["boundaries"]))
                ids = np.asarray(rec["token_ids"], dtype=np.int64)
                if frames.shape[0] != rec["M_raw"] or ids.size != rec["N"] or len(gold) != rec["N"]:
                    raise ValueError("record sizes disagree with stored data")
            except (ValueError, KeyError, TypeError, OSError, CorruptTensor) as exc:
                raise CorruptFile(f"record {index} of {manifest}: {exc}", index) from exc
            yield Utterance(rec["id"], ids, frames, gold, int(rec["label"]), rec["raw_hop_ms"])


def split_corpus(utterances, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffle-and-cut into (train, dev, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions {fractions} must be three nonnegatives summing to 1")
    utterances = list(utterances)
    n = len(utterances)
    n_dev = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_dev - n_test
    order = np.random.default_rng(seed).permutation(n)
    pick = [utterances[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_dev], pick[n_train + n_dev:]
