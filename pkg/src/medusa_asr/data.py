"""Deterministic synthetic corpus: feature frames paired with token transcripts.

Each vocabulary token owns a fixed random prototype vector; an utterance's
features are its tokens' prototypes, each repeated frames_per_token times,
plus Gaussian noise. The frames-per-token rate is constant, so the expected
transcript length of any feature matrix is known exactly — that is what the
pseudo-label discrepancy filter keys on.

Feature values are rounded to float32 at generation time so that the JSONL
on-disk form round-trips losslessly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, N_SPECIAL_TOKENS


class CorpusFormatError(ValueError):
    """A corpus file is malformed; the message names the record index."""


@dataclass
class CorpusConfig:
    n_utterances: int = 64
    min_tokens: int = 8
    max_tokens: int = 96
    frames_per_token: int = 3
    d_feat: int = 16
    noise_std: float = 0.05
    vocab_size: int = 64
    seed: int = 0
    split_train: float = 0.8
    split_valid: float = 0.1
    split_test: float = 0.1

    def __post_init__(self):
        problems = []
        if self.n_utterances < 0:
            problems.append(f"n_utterances must be >= 0, got {self.n_utterances}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            problems.append(f"need 1 <= min_tokens <= max_tokens, got {self.min_tokens}..{self.max_tokens}")
        if self.frames_per_token < 1:
            problems.append(f"frames_per_token must be >= 1, got {self.frames_per_token}")
        if self.d_feat < 1:
            problems.append(f"d_feat must be >= 1, got {self.d_feat}")
        if self.noise_std < 0:
            problems.append(f"noise_std must be >= 0, got {self.noise_std}")
        if self.vocab_size <= N_SPECIAL_TOKENS:
            problems.append(f"vocab_size must exceed {N_SPECIAL_TOKENS}")
        ratios = (self.split_train, self.split_valid, self.split_test)
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            problems.append(f"split ratios must be >= 0 and sum to 1, got {ratios}")
        if problems:
            raise ConfigError("invalid corpus config: " + "; ".join(problems))


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    features: np.ndarray  # (frames, d_feat), float64 holding float32 values

    def n_frames(self):
        return self.features.shape[0]


@dataclass
class CorpusSplits:
    train: list[Utterance] = field(default_factory=list)
    valid: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)

    def all_utterances(self):
        return self.train + self.valid + self.test


def token_prototypes(config: CorpusConfig) -> np.ndarray:
    """Fixed per-token feature prototypes, a pure function of the seed."""
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    protos = rng.normal(0.0, 1.0, (config.vocab_size, config.d_feat))
    return protos.astype(np.float32).astype(np.float64)


def synthesize_features(tokens, prototypes, frames_per_token, noise_std, rng=None):
    """Features for a token sequence: repeated prototypes plus optional noise."""
    base = np.repeat(prototypes[np.asarray(tokens, dtype=np.int64)], frames_per_token, axis=0)
    if noise_std > 0 and rng is not None:
        base = base + rng.normal(0.0, noise_std, base.shape)
    return base.astype(np.float32).astype(np.float64)


def generate_corpus(config: CorpusConfig) -> CorpusSplits:
    """Deterministic corpus: uniform-random token sequences with prototype features.

    Split sizes: valid and test get floor(ratio * n); train keeps the remainder.
    Utterances are assigned to splits in generation order (train, valid, test).
    """
    rng = np.random.default_rng(config.seed & 0xFFFFFFFFFFFFFFFF)
    protos = token_prototypes(config)
    utts = []
    for i in range(config.n_utterances):
        n_tok = int(rng.integers(config.min_tokens, config.max_tokens + 1))
        tokens = rng.integers(N_SPECIAL_TOKENS, config.vocab_size, n_tok).tolist()
        feats = synthesize_features(tokens, protos, config.frames_per_token,
                                    config.noise_std, rng)
        utts.append(Utterance(id=f"utt-{i:05d}", tokens=tokens, features=feats))
    n = config.n_utterances
    n_valid = math.floor(n * config.split_valid)
    n_test = math.floor(n * config.split_test)
    n_train = n - n_valid - n_test
    return CorpusSplits(
        train=utts[:n_train],
        valid=utts[n_train:n_train + n_valid],
        test=utts[n_train + n_valid:],
    )


def write_corpus(utterances, path) -> None:
    """One JSON object per line: {"id": str, "tokens": [int], "features": [[row] ...]}."""
    with open(path, "w", encoding="utf-8") as f:
        for u in utterances:
            rec = {"id": u.id, "tokens": list(map(int, u.tokens)),
                   "features": [[float(x) for x in row] for row in u.features]}
            f.write(json.dumps(rec) + "\n")


def read_corpus(path, frames_per_token=None) -> list[Utterance]:
    """Parse a corpus file; an empty file yields an empty list.

    When frames_per_token is given, every record must satisfy
    frames == frames_per_token * len(tokens) or an integrity error is raised.
    """
    utts = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"record {i}: invalid JSON ({e})") from e
            try:
                uid = str(rec["id"])
                tokens = [int(t) for t in rec["tokens"]]
                features = np.asarray(rec["features"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(f"record {i}: missing or malformed field ({e})") from e
            if features.ndim != 2:
                raise CorpusFormatError(f"record {i}: features must be a rectangular 2-D list")
            if not tokens:
                raise CorpusFormatError(f"record {i}: empty token sequence")
            if frames_per_token is not None and features.shape[0] != frames_per_token * len(tokens):
                raise CorpusFormatError(
                    f"record {i}: {features.shape[0]} frames != "
                    f"{frames_per_token} frames/token * {len(tokens)} tokens"
                )
            utts.append(Utterance(id=uid, tokens=tokens, features=features))
    return utts


def read_unlabeled(path) -> list[Utterance]:
    """Parse feature-only records; `tokens` may be absent or empty."""
    utts = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                uid = str(rec["id"])
                features = np.asarray(rec["features"], dtype=np.float64)
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise CorpusFormatError(f"record {i}: missing or malformed field ({e})") from e
            if features.ndim != 2:
                raise CorpusFormatError(f"record {i}: features must be a rectangular 2-D list")
            tokens = [int(t) for t in rec.get("tokens", [])]
            utts.append(Utterance(id=uid, tokens=tokens, features=features))
    return utts
