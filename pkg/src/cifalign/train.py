"""Alignment training, downstream fine-tuning, and checkpoint evaluation."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .cif import extract_boundaries, integrate_and_fire, predict_weights, quantity_loss, scale_weights
from .errors import ConfigError, DivergedLoss, StepOutOfRange
from .evalmetrics import (BoundaryErrors, boundary_errors, diagonality_score, similarity_heatmap,
                          summarize_errors, tolerance_accuracy, weighted_recall_f1)
from .losses import AlignMode, LossConfig, Reduction, align_loss, logits_cross_entropy, total_loss
from .models import (ClassifierHead, GraftedModel, encode_acoustic, graft_forward, inference_forward,
                     linguistic_targets, save_checkpoint)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "align", "quantity", "subword", "total", "lr")


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    warmup_steps: int = 200
    total_steps: int | None = None  # None -> epochs * batches per epoch
    batch_size: int = 16
    epochs: int = 26
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    align_mode: str = "infonce"
    graft_depth: int = 3
    tau: float = 0.1
    loss_weights: tuple = (1.0, 1.0, 1.0)
    cosine_reduction: str = "sum"
    cross_utterance_negatives: bool = False
    seed: int = 0
    finetune_lr: float = 5e-3
    finetune_epochs: int = 60
    finetune_unfreeze_speech: bool = False

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        AlignMode(self.align_mode)
        Reduction(self.cosine_reduction)
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")

    def loss_config(self):
        return LossConfig(tau=self.tau, align_mode=self.align_mode, weights=self.loss_weights,
                          cosine_reduction=self.cosine_reduction,
                          cross_utterance_negatives=self.cross_utterance_negatives)

    def steps_for(self, n_utts):
        if self.total_steps is not None:
            return int(self.total_steps)
        return self.epochs * math.ceil(n_utts / self.batch_size)

    @classmethod
    def field_defaults(cls):
        return {f.name: f.default for f in fields(cls)}


def lr_schedule(step, config: TrainConfig, total_steps=None):
    """Linear warmup to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    total = config.total_steps if total_steps is None else total_steps
    warm = config.warmup_steps
    if total is None:
        raise ConfigError("total_steps unknown")
    if not 0 <= step <= total:
        raise StepOutOfRange(f"step {step} outside [0, {total}]")
    if step <= warm:
        return config.base_lr * step / warm if warm > 0 else config.base_lr
    return config.base_lr * (total - step) / (total - warm)


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr, grads=None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads[name] if grads is not None else p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def clip_gradients(params: dict, max_norm):
    """Scale gradients in place to global norm <= max_norm; returns the pre-clip norm."""
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    norm = math.sqrt(sum(float((g * g).sum()) for k, g in sorted(grads.items())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    checkpoint_path: str | None = None

    def to_csv(self):
        lines = [",".join(LOG_COLUMNS)]
        for row in self.rows:
            lines.append(",".join([str(row["step"])] +
                                  [f"{row[c]:.10g}" for c in LOG_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    def column(self, name):
        return np.array([r[name] for r in self.rows])


class TargetCache:
    """Frozen-model targets per utterance; safe because the model never changes."""

    def __init__(self, model: GraftedModel):
        self.model = model
        self._cache = {}

    def __call__(self, utt):
        key = (utt.utterance_id, self.model.graft_depth)
        if key not in self._cache:
            self._cache[key] = linguistic_targets(self.model, utt.token_ids).states
        return self._cache[key]


def teacher_forced_forward(model: GraftedModel, utt, targets=None):
    """Encode, weigh, rescale to the gold count, and fire."""
    frames = encode_acoustic(utt.raw_frames, model.acoustic, utt.raw_hop_ms, utt.utterance_id)
    alpha = predict_weights(frames, model.predictor)
    n = int(utt.token_ids.size)
    scaled = scale_weights(alpha, n, model.cif_config.beta)
    fired = integrate_and_fire(frames, scaled, model.cif_config)
    return frames, alpha, fired


def utterance_losses(model: GraftedModel, utt, loss_config: LossConfig, targets):
    _, alpha, fired = teacher_forced_forward(model, utt)
    n = int(utt.token_ids.size)
    q = quantity_loss(alpha, n)
    a = align_loss(fired.aligned, targets, loss_config)
    if loss_config.weights[2] > 0:
        _, logits = graft_forward(fired.aligned, model)
        s = logits_cross_entropy(logits, utt.token_ids)
    else:
        s = dc.Tensor(0.0)
    return total_loss(a, q, s, loss_config), fired


def batch_losses(model, batch, loss_config: LossConfig, targets: TargetCache):
    if not loss_config.cross_utterance_negatives:
        bundles = [utterance_losses(model, u, loss_config, targets(u))[0] for u in batch]
        inv = 1.0 / len(bundles)
        parts = {k: dc.tsum(dc.stack([getattr(b, k) for b in bundles])) * inv
                 for k in ("align", "quantity", "subword", "total")}
        return parts
    # one contrastive problem over all tokens of the batch
    aligned, tgt, qs, subs = [], [], [], []
    for u in batch:
        _, alpha, fired = teacher_forced_forward(model, u)
        aligned.append(fired.aligned)
        tgt.append(targets(u))
        qs.append(quantity_loss(alpha, u.token_ids.size))
        if loss_config.weights[2] > 0:
            _, logits = graft_forward(fired.aligned, model)
            subs.append(logits_cross_entropy(logits, u.token_ids))
    inv = 1.0 / len(batch)
    a = align_loss(dc.concat(aligned), dc.concat(tgt), loss_config)
    q = dc.tsum(dc.stack(qs)) * inv
    s = dc.tsum(dc.stack(subs)) * inv if subs else dc.Tensor(0.0)
    b = total_loss(a, q, s, loss_config)
    return {"align": b.align, "quantity": b.quantity, "subword": b.subword, "total": b.total}


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.data = snap[k].copy()


def train_align(utterances, model: GraftedModel, config: TrainConfig, checkpoint_path=None,
                log_path=None, progress=None):
    """Optimise the speech path against the frozen targets at ``graft_depth``."""
    utterances = list(utterances)
    if not utterances:
        raise ConfigError("training corpus is empty")
    model.graft_depth = config.graft_depth
    loss_config = config.loss_config()
    total = config.steps_for(len(utterances))
    if not config.warmup_steps < total:
        raise ConfigError(f"warmup_steps {config.warmup_steps} must be < total steps {total}")
    params = model.trainable_parameters(include_classifier=False)
    opt = AdamW(params, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    targets = TargetCache(model)
    train_log = TrainLog(checkpoint_path=checkpoint_path)
    good = _snapshot(params)

    step, epoch = 0, 0
    while step < total:
        order = np.random.default_rng([config.seed, epoch]).permutation(len(utterances))
        for start in range(0, len(order), config.batch_size):
            if step >= total:
                break
            batch = [utterances[i] for i in order[start:start + config.batch_size]]
            for p in params.values():
                p.grad = None
            parts = batch_losses(model, batch, loss_config, targets)
            values = {k: float(v.data) for k, v in parts.items()}
            if not all(math.isfinite(v) for v in values.values()):
                _restore(params, good)
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path)
                raise DivergedLoss(f"non-finite loss at step {step}: {values}")
            parts["total"].backward()
            grads, _ = clip_gradients(params, config.clip_norm)
            lr = lr_schedule(step + 1, config, total)
            opt.step(lr, grads)
            good = _snapshot(params)
            step += 1
            train_log.rows.append({"step": step, **values, "lr": lr})
            if progress is not None:
                progress(step, total, values)
        epoch += 1

    if log_path:
        train_log.write_csv(log_path)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model, train_log


# ----------------------------------------------------------------------
# downstream classification
# ----------------------------------------------------------------------
def pooled_states(model: GraftedModel, utt, with_alpha=False):
    """Top states on the inference path (no teacher forcing)."""
    frames = encode_acoustic(utt.raw_frames, model.acoustic, utt.raw_hop_ms)
    alpha = predict_weights(frames, model.predictor)
    fired = integrate_and_fire(frames, alpha, model.cif_config)
    top, _ = graft_forward(fired, model)
    return (top, alpha) if with_alpha else top


def finetune_downstream(utterances, model: GraftedModel, config: TrainConfig,
                        permute_labels=False, seed=None):
    """Fit a three-class head on the grafted model; language blocks stay frozen.

    With ``finetune_unfreeze_speech`` the speech path trains too, and the
    quantity loss stays in the objective so the weight mass keeps tracking
    the token count.
    """
    utterances = list(utterances)
    if not utterances:
        raise ConfigError("fine-tuning corpus is empty")
    seed = config.seed if seed is None else seed
    labels = np.array([u.label for u in utterances], dtype=np.int64)
    if permute_labels:
        labels = np.random.default_rng([seed, 0xF00D]).permutation(labels)
    model.classifier = ClassifierHead(model.linguistic.dim, seed=seed)
    unfreeze = config.finetune_unfreeze_speech
    params = model.trainable_parameters(include_speech=unfreeze)
    opt = AdamW(params, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    steps_per_epoch = math.ceil(len(utterances) / config.batch_size)
    total = config.finetune_epochs * steps_per_epoch
    sched = TrainConfig(base_lr=config.finetune_lr, warmup_steps=max(1, total // 10),
                        total_steps=total)
    frozen_states = None if unfreeze else [pooled_states(model, u).detach() for u in utterances]

    losses = []
    step = 0
    for epoch in range(config.finetune_epochs):
        order = np.random.default_rng([seed, 1000 + epoch]).permutation(len(utterances))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in params.values():
                p.grad = None
            logits, quantity = [], []
            for i in idx:
                if frozen_states is not None:
                    states = frozen_states[i]
                else:
                    states, alpha = pooled_states(model, utterances[i], with_alpha=True)
                    quantity.append(quantity_loss(alpha, utterances[i].token_ids.size))
                logits.append(model.classifier(states))
            loss = dc.softmax_cross_entropy(dc.stack(logits), labels[idx])
            if quantity:
                w_q = config.loss_weights[1]
                loss = loss + w_q * dc.tsum(dc.stack(quantity)) * (1.0 / len(quantity))
            if not math.isfinite(float(loss.data)):
                raise DivergedLoss(f"non-finite classification loss at step {step}")
            loss.backward()
            grads, _ = clip_gradients(params, config.clip_norm)
            step += 1
            opt.step(lr_schedule(step, sched), grads)
            losses.append(float(loss.data))
    return model, losses


def classification_loss(model: GraftedModel, utterances):
    logits = dc.stack([model.classifier(pooled_states(model, u)) for u in utterances])
    return float(dc.softmax_cross_entropy(logits, [u.label for u in utterances]).data)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------
def evaluate_checkpoint(utterances, model: GraftedModel, cutoffs=(50.0, 100.0, 500.0, 1000.0)):
    """Boundary, tolerance, diagonality, subword and classification metrics."""
    targets = TargetCache(model)
    errs, diag, top1, top5, tokens, count_match = [], [], 0, 0, 0, 0
    y_true, y_pred = [], []
    for u in utterances:
        _, _, fired = teacher_forced_forward(model, u)
        pred = extract_boundaries(fired)
        errs.append(boundary_errors(pred, u.gold_boundaries)[0])
        diag.append(diagonality_score(similarity_heatmap(fired.aligned.data, targets(u).data)))
        _, logits = graft_forward(fired.aligned.detach(), model)
        ranked = np.argsort(-logits.data, axis=1, kind="stable")
        top1 += int((ranked[:, 0] == u.token_ids).sum())
        top5 += int((ranked[:, :5] == u.token_ids[:, None]).any(axis=1).sum())
        tokens += u.token_ids.size
        res = inference_forward(u.raw_frames, model)
        count_match += int(res.fired.fired_count == u.token_ids.size)
        if res.class_probs is not None:
            y_true.append(u.label)
            y_pred.append(int(np.argmax(res.class_probs)))

    pooled = BoundaryErrors.merge(errs)
    mae, median = summarize_errors(pooled)
    tol = tolerance_accuracy(pooled, cutoffs)
    metrics = {"mae_ms": mae, "median_ms": median, **tol.as_dict(),
               "diagonality": float(np.mean(diag)),
               "top1_acc": top1 / tokens, "top5_acc": top5 / tokens,
               "count_match": count_match / len(utterances), "n_utts": len(utterances),
               "recall_weighted": None, "f1_weighted": None}
    if y_true:
        recall, f1 = weighted_recall_f1(y_true, y_pred)
        metrics["recall_weighted"], metrics["f1_weighted"] = recall, f1
    return metrics


def clone_model(model: GraftedModel):
    return copy.deepcopy(model)
