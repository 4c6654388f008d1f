"""Losses, optimizer, training loop, early stopping, and pseudo-labeling.

Teacher forcing throughout: decoder input [BOS] + tokens, targets
tokens + [EOS]. Head k is scored against the target at offset k, so its last
k positions carry no target and are excluded from its cross-entropy mean.
Cross-entropy means pool positions across the whole batch.

Parameter freezing is enforced structurally: the optimizer holds state only
for parameters the variant's freeze mask marks trainable, so frozen
parameters stay bit-identical no matter how many steps run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .decoding import LengthPenalty, greedy_decode
from .model import (MEDUSA_BLOCK, MEDUSA_LINEAR, N_SPECIAL_TOKENS, ConfigError, Model,
                    freeze_mask)
from .numerics import Tensor


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numeric condition (NaN/Inf loss)."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_steps: int = 1000
    kl_weight: float = 0.01
    head_loss_weights: list[float] | None = None
    early_stop_patience: int = 10
    eval_every: int = 50
    input_corruption_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            problems.append(f"max_steps must be >= 1, got {self.max_steps}")
        if self.kl_weight < 0:
            problems.append(f"kl_weight must be >= 0, got {self.kl_weight}")
        if self.head_loss_weights is not None:
            if abs(sum(self.head_loss_weights) - 1.0) > 1e-9:
                problems.append(f"head_loss_weights must sum to 1, got {self.head_loss_weights}")
        if self.early_stop_patience < 1:
            problems.append(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 <= self.input_corruption_rate < 1.0:
            problems.append(f"input_corruption_rate must be in [0, 1), "
                            f"got {self.input_corruption_rate}")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))


class Adam:
    """Adam over the trainable subset of a model's parameters.

    Moment accumulators exist only for names the freeze mask marks trainable;
    everything else is untouched by construction.
    """

    def __init__(self, model: Model, trainable: dict[str, bool], lr,
                 betas=(0.9, 0.999), eps=1e-8):
        self.model = model
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(model.params[n].data) for n, on in trainable.items() if on}
        self.v = {n: np.zeros_like(model.params[n].data) for n, on in trainable.items() if on}

    def trainable_names(self):
        return list(self.m)

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name in self.m:
            p = self.model.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _teacher_forced(utt, cfg):
    inputs = [cfg.bos_id] + list(utt.tokens)
    targets = list(utt.tokens) + [cfg.eos_id]
    return inputs, targets


def corrupt_inputs(batch, cfg, rate, rng):
    """Teacher-forcing inputs with random token replacements after BOS.

    Targets are never touched. Replacing a fraction of the decoder's input
    tokens removes the prefix-memorization shortcut on tiny corpora, so the
    model has to read the encoder output to drive the loss down; validation
    always runs on clean inputs.
    """
    out = []
    for utt in batch:
        inputs, _ = _teacher_forced(utt, cfg)
        arr = np.asarray(inputs)
        flip = rng.random(len(arr)) < rate
        flip[0] = False
        repl = rng.integers(N_SPECIAL_TOKENS, cfg.vocab_size, size=len(arr))
        out.append(np.where(flip, repl, arr).tolist())
    return out


def _forward_heads(model: Model, utt, inputs=None):
    clean, targets = _teacher_forced(utt, model.config)
    inputs = clean if inputs is None else inputs
    z = model.encode(utt.features)
    hidden = model.decoder_hidden(inputs, z)
    return model.head_logits_list(hidden, z), targets, hidden, z


def _head_ce_pooled(per_utt_logits, per_utt_targets, k):
    """Sum of -log p(target) for head k across a batch, plus the position count."""
    total = None
    count = 0
    for logits_list, targets in zip(per_utt_logits, per_utt_targets):
        t_in = len(targets)
        if t_in - k <= 0:
            continue
        rows = nm.rows(logits_list[k], 0, t_in - k)
        picked = nm.gather_rows(nm.log_softmax(rows), targets[k:])
        s = nm.mul(nm.tsum(picked), -1.0)
        total = s if total is None else total + s
        count += t_in - k
    if total is None:
        raise nm.ContractError(f"head {k} has no valid target positions in this batch")
    return total, count


def teacher_base_distributions(teacher: Model, batch, inputs=None):
    """Frozen model's base-head probabilities per utterance, as plain arrays.

    When `inputs` (per-utterance decoder input token lists) is given, the
    teacher is run on those instead of the clean teacher-forcing inputs, so
    distillation always compares the two models on identical conditions.
    """
    out = []
    with nm.no_grad():
        for i, utt in enumerate(batch):
            toks = inputs[i] if inputs is not None else _teacher_forced(utt, teacher.config)[0]
            z = teacher.encode(utt.features)
            hidden = teacher.decoder_hidden(toks, z)
            logits = teacher.base_logits(hidden).data
            out.append(np.asarray(nm.softmax(Tensor(logits)).data))
    return out


def medusa_linear_loss(model: Model, teacher_base_probs, batch, kl_weight=0.01, inputs=None):
    """Mean of the K+1 per-head cross-entropies plus the weighted distillation KL.

    The KL term is KL(teacher || current base head), averaged over target
    positions pooled across the batch; teacher_base_probs must hold the frozen
    original model's base-head distributions for each utterance in the batch.
    """
    if model.config.variant not in (MEDUSA_LINEAR, None):
        raise nm.ContractError(f"linear-variant loss called on variant {model.config.variant!r}")
    if teacher_base_probs is None or len(teacher_base_probs) != len(batch):
        raise nm.ContractError("missing teacher distributions for the KL term")
    k_heads = model.config.n_medusa_heads
    per_logits, per_targets = [], []
    for i, utt in enumerate(batch):
        logits_list, targets, _, _ = _forward_heads(
            model, utt, inputs[i] if inputs is not None else None)
        per_logits.append(logits_list)
        per_targets.append(targets)

    loss = None
    for k in range(k_heads + 1):
        total, count = _head_ce_pooled(per_logits, per_targets, k)
        term = nm.mul(total, 1.0 / count)
        loss = term if loss is None else loss + term
    loss = nm.mul(loss, 1.0 / (k_heads + 1))

    kl_total = None
    n_positions = 0
    for logits_list, probs in zip(per_logits, teacher_base_probs):
        student = logits_list[0]
        if probs.shape != student.shape:
            raise nm.ShapeError(f"teacher probs shape {probs.shape} != student {student.shape}")
        kl_mean = nm.kl_divergence(student, probs)
        kl_sum = nm.mul(kl_mean, float(student.shape[0]))
        kl_total = kl_sum if kl_total is None else kl_total + kl_sum
        n_positions += student.shape[0]
    loss = loss + nm.mul(kl_total, kl_weight / n_positions)
    return loss


def medusa_block_loss(model: Model, batch, weights, inputs=None):
    """Weighted sum of the K medusa-head cross-entropies; the base head is untouched."""
    if model.config.variant != MEDUSA_BLOCK:
        raise nm.ContractError(f"block-variant loss called on variant {model.config.variant!r}")
    k_heads = model.config.n_medusa_heads
    weights = list(weights)
    if len(weights) != k_heads:
        raise nm.ShapeError(f"expected {k_heads} head weights, got {len(weights)}")
    per_logits, per_targets = [], []
    for i, utt in enumerate(batch):
        logits_list, targets, _, _ = _forward_heads(
            model, utt, inputs[i] if inputs is not None else None)
        per_logits.append(logits_list)
        per_targets.append(targets)
    loss = None
    for k in range(1, k_heads + 1):
        total, count = _head_ce_pooled(per_logits, per_targets, k)
        term = nm.mul(total, weights[k - 1] / count)
        loss = term if loss is None else loss + term
    return loss


def base_cross_entropy_loss(model: Model, batch, inputs=None):
    """Plain next-token cross-entropy of the base head (head-less pretraining)."""
    per_logits, per_targets = [], []
    for i, utt in enumerate(batch):
        logits_list, targets, _, _ = _forward_heads(
            model, utt, inputs[i] if inputs is not None else None)
        per_logits.append(logits_list)
        per_targets.append(targets)
    total, count = _head_ce_pooled(per_logits, per_targets, 0)
    return nm.mul(total, 1.0 / count)


def compute_loss(model: Model, batch, config: TrainConfig, teacher: Model | None = None,
                 corruption_rng=None):
    inputs = None
    if corruption_rng is not None and config.input_corruption_rate > 0:
        inputs = corrupt_inputs(batch, model.config, config.input_corruption_rate,
                                corruption_rng)
    variant = model.config.variant
    if variant == MEDUSA_LINEAR:
        if teacher is None:
            raise nm.ContractError("the linear variant needs the frozen teacher model")
        probs = teacher_base_distributions(teacher, batch, inputs)
        return medusa_linear_loss(model, probs, batch, kl_weight=config.kl_weight,
                                  inputs=inputs)
    if variant == MEDUSA_BLOCK:
        k = model.config.n_medusa_heads
        weights = config.head_loss_weights or [1.0 / k] * k
        return medusa_block_loss(model, batch, weights, inputs=inputs)
    return base_cross_entropy_loss(model, batch, inputs=inputs)


def train_step(model: Model, optimizer: Adam, batch, config: TrainConfig,
               teacher: Model | None = None, corruption_rng=None):
    """One forward/backward/update; only trainable parameters move."""
    model.zero_grads()
    loss = compute_loss(model, batch, config, teacher, corruption_rng)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at optimizer step {optimizer.step_count + 1} "
            f"(variant={model.config.variant!r}, batch={[u.id for u in batch]})"
        )
    nm.backward(loss)
    optimizer.step()
    model.zero_grads()
    return value


@dataclass
class EarlyStopDecision:
    stop: bool
    best_step: int


def early_stop(history, patience) -> EarlyStopDecision:
    """Stop once the running best has not improved for `patience` evaluations.

    best_step is the index of the first minimum in `history`.
    """
    if not history:
        raise nm.ContractError("early_stop requires a non-empty history")
    best = int(np.argmin(history))
    return EarlyStopDecision(stop=(len(history) - 1 - best) >= patience, best_step=best)


def evaluate_loss(model: Model, utterances, config: TrainConfig, teacher: Model | None = None):
    with nm.no_grad():
        total, n = 0.0, 0
        for i in range(0, len(utterances), config.batch_size):
            chunk = utterances[i:i + config.batch_size]
            total += compute_loss(model, chunk, config, teacher).item() * len(chunk)
            n += len(chunk)
    return total / max(n, 1)


def train_model(model: Model, train_set, valid_set, config: TrainConfig, log_sink=None):
    """Minibatch training with periodic validation and early stopping.

    Emits one JSON record per evaluation to `log_sink` (a writable file object)
    and returns the list of records. The model is left at the parameters of
    the best validation evaluation.
    """
    teacher = model.clone() if model.config.variant == MEDUSA_LINEAR else None
    mask = freeze_mask(model.config)
    optimizer = Adam(model, mask, config.learning_rate)
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    corruption_rng = np.random.default_rng((config.seed & 0xFFFFFFFFFFFFFFFF, 0xC0))
    records = []
    history = []
    best_snapshot = None

    def snapshot():
        return {n: model.params[n].data.copy() for n in optimizer.trainable_names()}

    for step in range(1, config.max_steps + 1):
        idx = rng.choice(len(train_set), size=min(config.batch_size, len(train_set)),
                         replace=False)
        batch = [train_set[i] for i in idx]
        train_loss = train_step(model, optimizer, batch, config, teacher, corruption_rng)
        if step % config.eval_every == 0 or step == config.max_steps:
            valid_loss = evaluate_loss(model, valid_set, config, teacher) if valid_set \
                else train_loss
            history.append(valid_loss)
            rec = {"step": step, "train_loss": train_loss, "valid_loss": valid_loss,
                   "lr": config.learning_rate}
            records.append(rec)
            if log_sink is not None:
                log_sink.write(json.dumps(rec) + "\n")
                log_sink.flush()
            if best_snapshot is None or valid_loss < min(history[:-1], default=float("inf")):
                best_snapshot = snapshot()
            if early_stop(history, config.early_stop_patience).stop:
                break
    if best_snapshot is not None:
        for name, arr in best_snapshot.items():
            model.params[name].data[...] = arr
    return records


# ---------------------------------------------------------------------------
# Pseudo-labeling
# ---------------------------------------------------------------------------


@dataclass
class PseudoLabelRecord:
    id: str
    transcript: list[int]
    discrepancy: float
    kept: bool


@dataclass
class PseudoLabelSet:
    records: list[PseudoLabelRecord] = field(default_factory=list)

    def kept(self):
        return [r for r in self.records if r.kept]

    def dropped(self):
        return [r for r in self.records if not r.kept]


def pseudo_label(model: Model, unlabeled, frames_per_token, drop_fraction=0.05,
                 max_len=None, penalty: LengthPenalty | None = None) -> PseudoLabelSet:
    """Greedy-transcribe unlabeled feature sets and drop the worst length outliers.

    The discrepancy score is |len(transcript) - expected| / expected with
    expected = frames / frames_per_token. Exactly ceil(drop_fraction * n)
    records are dropped: the highest-discrepancy ones, ties resolved by
    dropping later indices first.
    """
    unlabeled = list(unlabeled)
    if not unlabeled:
        raise nm.ContractError("pseudo_label requires at least one unlabeled utterance")
    if max_len is None:
        max_len = model.config.max_tgt_tokens - 1
    records = []
    for utt in unlabeled:
        result = greedy_decode(model, utt.features, max_len=max_len, penalty=penalty)
        transcript = [t for t in result.tokens if t != model.config.eos_id]
        expected = utt.features.shape[0] / frames_per_token
        disc = abs(len(transcript) - expected) / expected
        records.append(PseudoLabelRecord(id=utt.id, transcript=transcript,
                                         discrepancy=disc, kept=True))
    n_drop = math.ceil(drop_fraction * len(records))
    order = sorted(range(len(records)), key=lambda i: (records[i].discrepancy, i),
                   reverse=True)
    for i in order[:n_drop]:
        records[i].kept = False
    return PseudoLabelSet(records=records)
