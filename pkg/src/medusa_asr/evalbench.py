"""WER/CER metrics, speedup measurement, length bucketing, head-count ablation.

Speedup convention: baseline / multi-head, so values above 1 mean the
multi-head decoder is faster. Two speedups are reported: wall-clock (median
over repeated runs after a warm-up, informational) and decoder-forward-pass
count (deterministic, the one acceptance binds to). Buckets partition
[1, max_tgt_tokens] by reference token length.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .decoding import (LengthPenalty, VerificationPolicy, greedy_decode, medusa_decode)
from .model import Model, ModelConfig, MEDUSA_LINEAR, with_medusa, init_model
from .training import TrainConfig, train_model


@dataclass
class EditCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0

    @property
    def total(self):
        return self.substitutions + self.insertions + self.deletions


def edit_distance(ref, hyp) -> EditCounts:
    """Minimal-cost Levenshtein alignment with unit costs.

    On cost ties the alignment prefers substitution over insertion over
    deletion. Insertions are hypothesis tokens with no reference counterpart;
    deletions are reference tokens the hypothesis missed.
    """
    ref = list(ref)
    hyp = list(hyp)
    nr, nh = len(ref), len(hyp)
    # cell: (cost, S, I, D)
    prev = [(j, 0, j, 0) for j in range(nh + 1)]
    for i in range(1, nr + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, nh + 1):
            sub_cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            diag = prev[j - 1]
            cand = (diag[0] + sub_cost, diag[1] + sub_cost, diag[2], diag[3])
            left = cur[j - 1]
            ins = (left[0] + 1, left[1], left[2] + 1, left[3])
            up = prev[j]
            dele = (up[0] + 1, up[1], up[2], up[3] + 1)
            best = cand
            if ins[0] < best[0]:
                best = ins
            if dele[0] < best[0]:
                best = dele
            cur.append(best)
        prev = cur
    cost, s, ins, dele = prev[nh]
    assert cost == s + ins + dele
    return EditCounts(substitutions=s, insertions=ins, deletions=dele)


@dataclass
class MetricReport:
    wer: float
    cer: float
    n_utterances: int
    substitutions: int
    insertions: int
    deletions: int


def _as_words(x):
    return x.split() if isinstance(x, str) else [str(t) for t in x]


def _as_chars(x):
    s = x if isinstance(x, str) else " ".join(str(t) for t in x)
    return list(s)  # spaces count as characters


def score_corpus(refs, hyps, ids=None) -> MetricReport:
    """Corpus-level WER and CER: total errors over total reference units.

    Inputs may be strings (words split on whitespace, characters including
    spaces) or token sequences (each token is one word; the character view is
    taken over the space-joined rendering). The S/I/D counts in the report are
    word-level.
    """
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise nm.ShapeError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(refs))]
    word_counts = EditCounts()
    char_counts = EditCounts()
    n_ref_words = 0
    n_ref_chars = 0
    for uid, ref, hyp in zip(ids, refs, hyps):
        ref_w, hyp_w = _as_words(ref), _as_words(hyp)
        if not ref_w:
            raise nm.ContractError(f"empty reference for utterance {uid!r}")
        e = edit_distance(ref_w, hyp_w)
        word_counts.substitutions += e.substitutions
        word_counts.insertions += e.insertions
        word_counts.deletions += e.deletions
        n_ref_words += len(ref_w)
        ref_c, hyp_c = _as_chars(ref), _as_chars(hyp)
        ec = edit_distance(ref_c, hyp_c)
        char_counts.substitutions += ec.substitutions
        char_counts.insertions += ec.insertions
        char_counts.deletions += ec.deletions
        n_ref_chars += len(ref_c)
    return MetricReport(
        wer=word_counts.total / n_ref_words,
        cer=char_counts.total / n_ref_chars,
        n_utterances=len(refs),
        substitutions=word_counts.substitutions,
        insertions=word_counts.insertions,
        deletions=word_counts.deletions,
    )


def wer(refs, hyps, ids=None) -> MetricReport:
    return score_corpus(refs, hyps, ids)


def cer(refs, hyps, ids=None) -> MetricReport:
    return score_corpus(refs, hyps, ids)


# ---------------------------------------------------------------------------
# Speedup measurement
# ---------------------------------------------------------------------------


def default_buckets(max_len):
    """Length ranges [(1,16), (17,32), (33,64), (65,128), (129,max)] clipped to max."""
    edges = [1, 17, 33, 65, 129, max(max_len + 1, 130)]
    buckets = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo > max_len:
            break
        buckets.append((lo, min(hi - 1, max_len)))
    return buckets


@dataclass
class SpeedupReport:
    baseline_wall: float
    medusa_wall: float
    wall_speedup: float
    pass_speedup: float
    buckets: list[dict] = field(default_factory=list)
    n_utterances: int = 0

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def to_text(self):
        lines = [
            f"utterances:     {self.n_utterances}",
            f"baseline wall:  {self.baseline_wall:.4f} s",
            f"medusa wall:    {self.medusa_wall:.4f} s",
            f"wall speedup:   {self.wall_speedup:.3f}",
            f"pass speedup:   {self.pass_speedup:.3f}",
            f"{'min_len':>8} {'max_len':>8} {'mean_speedup':>13} {'n':>5}",
        ]
        for b in self.buckets:
            lines.append(f"{b['min_len']:>8} {b['max_len']:>8} {b['mean_speedup']:>13.3f} {b['n']:>5}")
        return "\n".join(lines)

    def buckets_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["min_len", "max_len", "mean_speedup", "n"])
        for b in self.buckets:
            w.writerow([b["min_len"], b["max_len"], f"{b['mean_speedup']:.6f}", b["n"]])
        return buf.getvalue()


def _median_wall(fn, repeats):
    fn()  # warm-up, excluded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(model: Model, test_set, policy: VerificationPolicy,
          penalty: LengthPenalty | None = None, repeats: int = 5,
          max_len: int | None = None, parallel: int = 0) -> SpeedupReport:
    """Greedy vs multi-head decoding over one utterance set.

    Wall times are medians over `repeats` timed runs after one warm-up; pass
    counts come from the (deterministic) decode accounting. Per-utterance pass
    ratios are averaged inside reference-length buckets. Decodes run
    sequentially to keep wall-clock honest; `parallel` > 1 opts into a
    pass-count-only run with that many worker threads over the shared
    immutable model (wall fields are then zero).
    """
    if max_len is None:
        max_len = model.config.max_tgt_tokens - 1
    test_set = list(test_set)
    base_wall = med_wall = 0.0
    base_passes = med_passes = 0
    per_utt = []
    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        def one(utt):
            g = greedy_decode(model, utt.features, max_len)
            m = medusa_decode(model, utt.features, max_len, policy, penalty)
            return g.n_decoder_forward_passes, m.n_decoder_forward_passes

        with ThreadPoolExecutor(max_workers=parallel) as pool:
            counts = list(pool.map(one, test_set))
        for utt, (gp, mp) in zip(test_set, counts):
            base_passes += gp
            med_passes += mp
            per_utt.append((len(utt.tokens), gp / mp))
    else:
        for utt in test_set:
            g = greedy_decode(model, utt.features, max_len)
            m = medusa_decode(model, utt.features, max_len, policy, penalty)
            gw = _median_wall(lambda: greedy_decode(model, utt.features, max_len), repeats)
            mw = _median_wall(lambda: medusa_decode(model, utt.features, max_len, policy, penalty),
                              repeats)
            base_wall += gw
            med_wall += mw
            base_passes += g.n_decoder_forward_passes
            med_passes += m.n_decoder_forward_passes
            per_utt.append((len(utt.tokens),
                            g.n_decoder_forward_passes / m.n_decoder_forward_passes))
    buckets = []
    for lo, hi in default_buckets(model.config.max_tgt_tokens):
        ratios = [r for length, r in per_utt if lo <= length <= hi]
        buckets.append({
            "min_len": lo, "max_len": hi,
            "mean_speedup": float(np.mean(ratios)) if ratios else 0.0,
            "n": len(ratios),
        })
    return SpeedupReport(
        baseline_wall=base_wall,
        medusa_wall=med_wall,
        wall_speedup=base_wall / med_wall if med_wall > 0 else 0.0,
        pass_speedup=base_passes / med_passes if med_passes else 0.0,
        buckets=buckets,
        n_utterances=len(test_set),
    )


# ---------------------------------------------------------------------------
# Head-count ablation
# ---------------------------------------------------------------------------


def render_tokens(tokens):
    """Token ids as a whitespace-joined string, the corpus's text stand-in."""
    return " ".join(str(t) for t in tokens)


def ablate_heads(base_config: ModelConfig, k_values, corpus, base_train: TrainConfig,
                 head_train: TrainConfig, policy: VerificationPolicy | None = None,
                 penalty: LengthPenalty | None = None, repeats: int = 1,
                 base_model: Model | None = None):
    """Train one linear-variant model per head count under identical budgets.

    The head-less base is trained once (or supplied) and shared across all K;
    rows are {K, wer, cer, pass_speedup, wall_speedup}, sorted by K. With
    identical seeds the non-timing fields are identical across reruns.
    """
    k_values = sorted(set(int(k) for k in k_values))
    if any(k < 1 for k in k_values):
        raise nm.ContractError(f"all K values must be >= 1, got {k_values}")
    if base_config.variant is not None:
        raise nm.ContractError("ablation expects a head-less base config")
    if base_model is None:
        base_model = init_model(base_config)
        train_model(base_model, corpus.train, corpus.valid, base_train)
    policy = policy or VerificationPolicy()
    rows = []
    for k in k_values:
        model = with_medusa(base_model, k, MEDUSA_LINEAR)
        train_model(model, corpus.train, corpus.valid, head_train)
        report = bench(model, corpus.test, policy, penalty, repeats=repeats)
        refs = [render_tokens(u.tokens) for u in corpus.test]
        hyps = []
        for u in corpus.test:
            r = medusa_decode(model, u.features, model.config.max_tgt_tokens - 1, policy, penalty)
            hyps.append(render_tokens([t for t in r.tokens if t != model.config.eos_id]))
        metrics = score_corpus(refs, hyps, ids=[u.id for u in corpus.test])
        rows.append({
            "K": k,
            "wer": metrics.wer,
            "cer": metrics.cer,
            "pass_speedup": report.pass_speedup,
            "wall_speedup": report.wall_speedup,
        })
    return rows
