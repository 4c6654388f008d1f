"""Greedy, multi-head propose/verify, and assistant-model decoding.

All decoders share one KV-cache discipline: the cache always trails the
committed token prefix by exactly one position, so the next pass always has
at least one new input token to process. Verification extends the cache over
the whole candidate block and then truncates it back to the accepted prefix
(minus that trailing position).

Pass accounting is exact: greedy spends one decoder forward per emitted
token; the propose/verify decoder spends two decoder forwards per iteration
regardless of how many tokens the iteration accepts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .model import KVCache, Model, ConfigError, LengthError  # noqa: F401  (re-exported)
from .numerics import Tensor

TYPICAL = "typical"
EXACT_MATCH = "exact_match"


@dataclass
class VerificationPolicy:
    """Acceptance rule for verified candidates.

    Typical mode accepts a candidate when the base head's probability for it
    exceeds min(epsilon, alpha * exp(-H)), H being the entropy of the base
    distribution at that position. ExactMatch accepts only the base head's own
    argmax, which makes the decoder emit exactly the greedy sequence.
    """

    epsilon: float = 0.09
    alpha: float = 0.3
    mode: str = TYPICAL

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise nm.ContractError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if not 0.0 < self.alpha <= 1.0:
            raise nm.ContractError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.mode not in (TYPICAL, EXACT_MATCH):
            raise nm.ContractError(f"mode must be {TYPICAL!r} or {EXACT_MATCH!r}, got {self.mode!r}")


@dataclass
class LengthPenalty:
    """Exponential-decay end-of-sequence bias.

    From token `start_index` onward, the EOS logit grows by ln(factor) per
    step past the start, i.e. the EOS score is rescaled by factor^(steps).
    """

    start_index: int = 140
    factor: float = 1.01
    enabled: bool = False

    def __post_init__(self):
        if self.start_index < 0:
            raise nm.ContractError(f"start_index must be >= 0, got {self.start_index}")
        if self.enabled and not self.factor > 1.0:
            raise nm.ContractError(f"factor must be > 1 when enabled, got {self.factor}")


@dataclass
class DecodeResult:
    """Emitted tokens plus the accounting used for speedup measurement.

    tokens excludes BOS and includes the final EOS (when one was emitted).
    accepted_per_iteration sums to len(tokens). For assistant-model decoding
    the assistant's own forward passes are tallied separately.
    """

    tokens: list[int]
    n_iterations: int
    n_decoder_forward_passes: int
    accepted_per_iteration: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    n_assistant_forward_passes: int = 0


def apply_length_penalty(logits, position, penalty, eos_id):
    """Additively raise the EOS logit once `position` reaches the penalty start.

    The bump is (position - start_index + 1) * ln(factor); other logits are
    untouched. Returns the input unchanged when the penalty does not apply.
    """
    if penalty is None or not penalty.enabled or position < penalty.start_index:
        return logits
    bump = (position - penalty.start_index + 1) * math.log(penalty.factor)
    if isinstance(logits, Tensor):
        out = logits.data.copy()
        out[eos_id] += bump
        return Tensor(out)
    out = logits.copy()
    out[eos_id] += bump
    return out


def entropy_exponent(p0):
    """exp(-H(p0)): an entropy-derived proxy for the distribution's peak probability."""
    return math.exp(-nm.entropy(p0))


def acceptance_threshold(p0, policy: VerificationPolicy):
    """min(epsilon, alpha * exp(-H(p0))) — the typical-acceptance bar for p0."""
    if policy.mode != TYPICAL:
        raise nm.ContractError("acceptance_threshold is defined for the typical mode only")
    return min(policy.epsilon, policy.alpha * entropy_exponent(p0))


def _softmax_np(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _argmax(logits):
    # np.argmax takes the first maximum: ties break toward the lowest token id.
    return int(np.argmax(logits))


def greedy_decode(model: Model, features, max_len, penalty: LengthPenalty | None = None) -> DecodeResult:
    """Vanilla autoregressive decoding: one decoder forward per emitted token."""
    cfg = model.config
    if max_len > cfg.max_tgt_tokens - 1:
        raise LengthError(f"max_len {max_len} leaves no room under max_tgt_tokens={cfg.max_tgt_tokens}")
    start = time.perf_counter()
    with nm.no_grad():
        z = model.encode(features)
        cache = model.new_cache()
        prefix = [cfg.bos_id]
        emitted: list[int] = []
        passes = 0
        while len(emitted) < max_len:
            suffix = prefix[cache.committed_length:]
            h = model.decoder_hidden(suffix, z, cache)
            passes += 1
            logits = model.base_logits(h).data[-1]
            logits = apply_length_penalty(logits, len(emitted), penalty, cfg.eos_id)
            tok = _argmax(logits)
            emitted.append(tok)
            prefix.append(tok)
            if tok == cfg.eos_id:
                break
    return DecodeResult(
        tokens=emitted,
        n_iterations=len(emitted),
        n_decoder_forward_passes=passes,
        accepted_per_iteration=[1] * len(emitted),
        wall_time=time.perf_counter() - start,
    )


def medusa_propose(model: Model, prefix, z, cache: KVCache, penalty: LengthPenalty | None = None):
    """One decoder forward over the uncached tail of `prefix`; returns the
    per-head argmax candidates [y_t .. y_{t+K}], penalty applied to each head
    row at the position it would emit."""
    prefix = list(prefix)
    suffix = prefix[cache.committed_length:]
    if not suffix:
        raise nm.ContractError("propose requires the cache to trail the prefix by at least one token")
    with nm.no_grad():
        h = model.decoder_hidden(suffix, z, cache)
        head_logits = model.medusa_forward(h, z=z, cache=cache).data
    t = len(prefix) - 1
    cands = []
    for k in range(head_logits.shape[0]):
        row = apply_length_penalty(head_logits[k], t + k, penalty, model.config.eos_id)
        cands.append(_argmax(row))
    return cands


def medusa_verify(model: Model, prefix, candidates, z, cache: KVCache,
                  policy: VerificationPolicy, penalty: LengthPenalty | None = None):
    """Score a candidate chain under the base head in one decoder forward.

    For offset k >= 1 the base-head distribution q_k (given the prefix plus
    candidates[:k]) must clear the policy's bar for candidates[k]; offset 0 is
    accepted unconditionally, which guarantees progress. Returns the accepted
    count `a` and the base head's next-token proposal at the last accepted
    position. The cache is truncated to the accepted prefix minus one, ready
    for the next propose pass.
    """
    prefix = list(prefix)
    candidates = list(candidates)
    if cache.committed_length != len(prefix):
        raise nm.ContractError(
            f"verify expects the cache to cover the full prefix "
            f"({cache.committed_length} cached vs {len(prefix)} committed)"
        )
    t = len(prefix) - 1
    eos = model.config.eos_id
    with nm.no_grad():
        h = model.decoder_hidden(candidates, z, cache)
        q_logits = model.base_logits(h).data  # row j: distribution for position t+j+1
    a = 1
    for k in range(1, len(candidates)):
        row = apply_length_penalty(q_logits[k - 1], t + k, penalty, eos)
        if policy.mode == EXACT_MATCH:
            ok = candidates[k] == _argmax(row)
        else:
            probs = _softmax_np(row)
            ok = probs[candidates[k]] > acceptance_threshold(probs, policy)
        if not ok:
            break
        a += 1
    bonus_row = apply_length_penalty(q_logits[a - 1], t + a, penalty, eos)
    bonus = _argmax(bonus_row)
    cache.truncate(len(prefix) + a - 1)
    return a, bonus


def medusa_decode(model: Model, features, max_len, policy: VerificationPolicy,
                  penalty: LengthPenalty | None = None) -> DecodeResult:
    """Two-phase decoding: propose K+1 candidates, verify them, keep a prefix.

    Every iteration costs exactly two decoder forwards and accepts between 1
    and K+1 tokens. With the exact-match policy the emitted sequence equals
    greedy decoding token for token. A head-less model (K=0) degenerates to
    greedy behaviour at twice the pass count.
    """
    cfg = model.config
    if max_len > cfg.max_tgt_tokens - 1:
        raise LengthError(f"max_len {max_len} leaves no room under max_tgt_tokens={cfg.max_tgt_tokens}")
    start = time.perf_counter()
    with nm.no_grad():
        z = model.encode(features)
    cache = model.new_cache()
    prefix = [cfg.bos_id]
    emitted: list[int] = []
    accepted_counts: list[int] = []
    passes = 0
    while len(emitted) < max_len:
        cands = medusa_propose(model, prefix, z, cache, penalty)
        room = min(cfg.max_tgt_tokens - len(prefix), max_len - len(emitted))
        cands = cands[:room]
        a, _bonus = medusa_verify(model, prefix, cands, z, cache, policy, penalty)
        passes += 2
        accepted = cands[:a]
        done = False
        if cfg.eos_id in accepted:
            accepted = accepted[:accepted.index(cfg.eos_id) + 1]
            done = True
        emitted.extend(accepted)
        prefix.extend(accepted)
        accepted_counts.append(len(accepted))
        if done:
            break
    return DecodeResult(
        tokens=emitted,
        n_iterations=len(accepted_counts),
        n_decoder_forward_passes=passes,
        accepted_per_iteration=accepted_counts,
        wall_time=time.perf_counter() - start,
    )


def assisted_decode(main: Model, assistant: Model, features, max_len, draft_len,
                    penalty: LengthPenalty | None = None) -> DecodeResult:
    """Speculative decoding with a separate assistant model.

    Per round the assistant greedily drafts up to draft_len tokens; the main
    model scores the whole draft in one forward pass and keeps the longest
    prefix matching its own argmax, plus one token of its own at the first
    mismatch. The output therefore always equals the main model's greedy
    output. Main and assistant forward passes are tallied separately.
    """
    if main.config.vocab_size != assistant.config.vocab_size:
        raise ConfigError(
            f"vocabulary mismatch: main {main.config.vocab_size} vs "
            f"assistant {assistant.config.vocab_size}"
        )
    if draft_len < 1:
        raise nm.ContractError(f"draft_len must be >= 1, got {draft_len}")
    cfg = main.config
    if max_len > cfg.max_tgt_tokens - 1:
        raise LengthError(f"max_len {max_len} leaves no room under max_tgt_tokens={cfg.max_tgt_tokens}")
    eos = cfg.eos_id
    start = time.perf_counter()
    with nm.no_grad():
        z_m = main.encode(features)
        z_a = assistant.encode(features)
    cache_m = main.new_cache()
    cache_a = assistant.new_cache()
    prefix = [cfg.bos_id]
    emitted: list[int] = []
    accepted_counts: list[int] = []
    main_passes = 0
    assistant_passes = 0
    while len(emitted) < max_len:
        t = len(emitted)
        room = min(draft_len, max_len - t - 1,
                   cfg.max_tgt_tokens - len(prefix) - 1,
                   assistant.config.max_tgt_tokens - len(prefix) - 1)
        drafts: list[int] = []
        with nm.no_grad():
            for i in range(max(room, 0)):
                suffix_a = (prefix + drafts)[cache_a.committed_length:]
                h_a = assistant.decoder_hidden(suffix_a, z_a, cache_a)
                assistant_passes += 1
                row = assistant.base_logits(h_a).data[-1]
                row = apply_length_penalty(row, t + i, penalty, eos)
                tok = _argmax(row)
                drafts.append(tok)
                if tok == eos:
                    break
            suffix_m = (prefix + drafts)[cache_m.committed_length:]
            h_m = main.decoder_hidden(suffix_m, z_m, cache_m)
            main_passes += 1
            main_rows = main.base_logits(h_m).data
        greedy_next = [
            _argmax(apply_length_penalty(main_rows[j], t + j, penalty, eos))
            for j in range(len(drafts) + 1)
        ]
        matched = 0
        while matched < len(drafts) and drafts[matched] == greedy_next[matched]:
            matched += 1
        accepted = drafts[:matched] + [greedy_next[matched]]
        done = False
        if eos in accepted:
            accepted = accepted[:accepted.index(eos) + 1]
            done = True
        emitted.extend(accepted)
        prefix.extend(accepted)
        accepted_counts.append(len(accepted))
        new_tail = len(prefix) - 1
        cache_m.truncate(min(cache_m.committed_length, new_tail))
        cache_a.truncate(min(cache_a.committed_length, new_tail))
        if done:
            break
    return DecodeResult(
        tokens=emitted,
        n_iterations=len(accepted_counts),
        n_decoder_forward_passes=main_passes,
        accepted_per_iteration=accepted_counts,
        wall_time=time.perf_counter() - start,
        n_assistant_forward_passes=assistant_passes,
    )
