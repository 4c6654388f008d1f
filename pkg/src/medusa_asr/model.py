"""Toy encoder-decoder transformer with pluggable multi-head prediction variants.

The architecture mirrors the Whisper family at desk scale: pre-norm blocks,
learned absolute position embeddings, GELU feed-forwards, and a linear
projection standing in for the audio frontend. Two extra-head variants are
supported on top of the base decoder:

  * "linear": K heads, each a zero-initialized linear layer with a residual
    connection, followed by one vocabulary projection shared by all K heads.
  * "block": one extra decoder block shared by all K heads, then the per-head
    linear+residual and the shared projection.

The shared head projection is a separate parameter initialized as a copy of
the base projection (not weight-tied). The extra decoder block is initialized
as a copy of the final base decoder block.
"""

from __future__ import annotations

import copy
from contextlib import nullcontext
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .numerics import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_SPECIAL_TOKENS = 3

MEDUSA_LINEAR = "linear"
MEDUSA_BLOCK = "block"
VARIANTS = (None, MEDUSA_LINEAR, MEDUSA_BLOCK)


class ConfigError(ValueError):
    """Invalid model or run configuration; the message lists all violations."""


class LengthError(ValueError):
    """A sequence exceeds (or underruns) a configured length bound."""


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_attn_heads: int = 4
    d_ff: int = 128
    d_feat: int = 16
    max_src_frames: int = 320
    max_tgt_tokens: int = 128
    n_medusa_heads: int = 0
    variant: str | None = None
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("vocab_size", "d_model", "n_enc_layers", "n_dec_layers",
                     "n_attn_heads", "d_ff", "d_feat", "max_src_frames", "max_tgt_tokens"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size <= N_SPECIAL_TOKENS:
            problems.append(f"vocab_size must exceed {N_SPECIAL_TOKENS} special tokens")
        if self.d_model % self.n_attn_heads != 0:
            problems.append(f"n_attn_heads {self.n_attn_heads} must divide d_model {self.d_model}")
        if self.n_medusa_heads < 0:
            problems.append(f"n_medusa_heads must be >= 0, got {self.n_medusa_heads}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if (self.n_medusa_heads == 0) != (self.variant is None):
            problems.append(
                f"n_medusa_heads == 0 iff variant is None "
                f"(got K={self.n_medusa_heads}, variant={self.variant!r})"
            )
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    @property
    def bos_id(self):
        return BOS_ID

    @property
    def eos_id(self):
        return EOS_ID

    @property
    def pad_id(self):
        return PAD_ID

    @property
    def head_dim(self):
        return self.d_model // self.n_attn_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class KVCache:
    """Per-layer attention state for one decode session.

    Stores self-attention keys/values for the committed input positions of
    every decoder layer (plus one slot for the shared extra block, when
    present) and the cross-attention keys/values computed once from the
    encoder output. Each cache belongs to exactly one decode session; passes
    that use it run without gradient recording.
    """

    def __init__(self, model: "Model"):
        self.n_slots = model.config.n_dec_layers + (1 if model.config.variant == MEDUSA_BLOCK else 0)
        d = model.config.d_model
        self.self_k = [np.zeros((0, d)) for _ in range(self.n_slots)]
        self.self_v = [np.zeros((0, d)) for _ in range(self.n_slots)]
        self.cross_k: list[np.ndarray] | None = None
        self.cross_v: list[np.ndarray] | None = None

    @property
    def committed_length(self):
        return self.self_k[0].shape[0]

    def append(self, slot, k_new, v_new):
        self.self_k[slot] = np.concatenate([self.self_k[slot], k_new])
        self.self_v[slot] = np.concatenate([self.self_v[slot], v_new])

    def truncate(self, n):
        if n > self.committed_length:
            raise LengthError(f"cannot truncate cache of {self.committed_length} to {n}")
        self.self_k = [k[:n] for k in self.self_k]
        self.self_v = [v[:n] for v in self.self_v]


class Model:
    """Parameter container plus forward passes. Immutable during inference;
    training mutates parameters in place and requires exclusive access."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameter_names(self):
        return list(self.params)

    def clone(self):
        cloned = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return Model(copy.deepcopy(self.config), cloned)

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks ----------------------------------------------------

    def _linear(self, prefix, x):
        return nm.matmul(x, self.params[prefix + ".w"]) + self.params[prefix + ".b"]

    def _ln(self, prefix, x):
        return nm.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _split_heads(self, x):
        # (T, d) -> (H, T, head_dim)
        t = x.shape[0]
        h, hd = self.config.n_attn_heads, self.config.head_dim
        return nm.transpose(nm.reshape(x, (t, h, hd)), (1, 0, 2))

    def _merge_heads(self, x):
        # (H, T, head_dim) -> (T, d)
        t = x.shape[1]
        return nm.reshape(nm.transpose(x, (1, 0, 2)), (t, self.config.d_model))

    def _attend(self, q, k, v, mask=None):
        """Multi-head attention core on (T, d) tensors; mask is additive (Tq, Tk)."""
        qh = self._split_heads(q)
        kh = self._split_heads(k)
        vh = self._split_heads(v)
        scores = nm.mul(nm.matmul(qh, nm.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(self.config.head_dim))
        if mask is not None:
            scores = nm.add(scores, Tensor(mask))
        return self._merge_heads(nm.matmul(nm.softmax(scores), vh))

    def _self_attention(self, prefix, x, cache=None, slot=None, offset=0):
        q = self._linear(prefix + ".q", x)
        k = self._linear(prefix + ".k", x)
        v = self._linear(prefix + ".v", x)
        if cache is not None:
            cache.append(slot, k.data, v.data)
            k = Tensor(cache.self_k[slot])
            v = Tensor(cache.self_v[slot])
        mask = nm.causal_mask(x.shape[0], k.shape[0], offset=offset)
        return self._linear(prefix + ".o", self._attend(q, k, v, mask))

    def _encoder_self_attention(self, prefix, x):
        q = self._linear(prefix + ".q", x)
        k = self._linear(prefix + ".k", x)
        v = self._linear(prefix + ".v", x)
        return self._linear(prefix + ".o", self._attend(q, k, v))

    def _cross_attention(self, prefix, x, z=None, cache=None, slot=None):
        q = self._linear(prefix + ".q", x)
        if cache is not None:
            k = Tensor(cache.cross_k[slot])
            v = Tensor(cache.cross_v[slot])
        else:
            k = self._linear(prefix + ".k", z)
            v = self._linear(prefix + ".v", z)
        return self._linear(prefix + ".o", self._attend(q, k, v))

    def _ffn(self, prefix, x):
        return self._linear(prefix + ".w2", nm.gelu(self._linear(prefix + ".w1", x)))

    def _decoder_block(self, prefix, x, z=None, cache=None, slot=None, offset=0):
        x = x + self._self_attention(prefix + ".self", self._ln(prefix + ".ln1", x),
                                     cache=cache, slot=slot, offset=offset)
        x = x + self._cross_attention(prefix + ".cross", self._ln(prefix + ".ln2", x),
                                      z=z, cache=cache, slot=slot)
        x = x + self._ffn(prefix + ".ffn", self._ln(prefix + ".ln3", x))
        return x

    def _prime_cross_cache(self, cache, z):
        if cache.cross_k is not None:
            return
        cache.cross_k, cache.cross_v = [], []
        prefixes = [f"dec.{i}" for i in range(self.config.n_dec_layers)]
        if self.config.variant == MEDUSA_BLOCK:
            prefixes.append("medusa.block")
        for p in prefixes:
            cache.cross_k.append(self._linear(p + ".cross.k", z).data)
            cache.cross_v.append(self._linear(p + ".cross.v", z).data)

    # -- public forward passes ----------------------------------------------

    def encode(self, features):
        """Map a (frames, d_feat) feature matrix to (frames, d_model) embeddings."""
        feats = features if isinstance(features, Tensor) else Tensor(features)
        if feats.ndim != 2 or feats.shape[1] != self.config.d_feat:
            raise nm.ShapeError(
                f"encode expects (frames, {self.config.d_feat}) features, got {feats.shape}"
            )
        frames = feats.shape[0]
        if frames < 1:
            raise LengthError("encode requires at least one feature frame")
        if frames > self.config.max_src_frames:
            raise LengthError(f"{frames} frames exceed max_src_frames={self.config.max_src_frames}")
        x = self._linear("enc.in_proj", feats) + nm.rows(self.params["enc.pos"], 0, frames)
        for i in range(self.config.n_enc_layers):
            p = f"enc.{i}"
            x = x + self._encoder_self_attention(p + ".self", self._ln(p + ".ln1", x))
            x = x + self._ffn(p + ".ffn", self._ln(p + ".ln2", x))
        return self._ln("enc.ln_out", x)

    def decoder_hidden(self, tokens, z, cache=None):
        """Hidden states for `tokens` given encoder output z.

        Without a cache, `tokens` is the full decoder input. With a cache,
        `tokens` is only the new suffix; its positions continue from
        cache.committed_length, and the pass runs without gradient recording.
        When the model carries the shared extra block, the block's keys and
        values for the new positions are appended to the cache as well.
        """
        tokens = list(tokens)
        if len(tokens) == 0:
            raise nm.ContractError("decoder_hidden requires at least one token")
        if any(t < 0 or t >= self.config.vocab_size for t in tokens):
            raise IndexError(f"token id out of range for vocab {self.config.vocab_size}")
        offset = cache.committed_length if cache is not None else 0
        if offset + len(tokens) > self.config.max_tgt_tokens:
            raise LengthError(
                f"{offset} cached + {len(tokens)} new tokens exceed "
                f"max_tgt_tokens={self.config.max_tgt_tokens}"
            )
        ctx = nm.no_grad() if cache is not None else nullcontext()
        with ctx:
            if cache is not None:
                self._prime_cross_cache(cache, z)
            x = nm.embedding_lookup(self.params["dec.tok_emb"], tokens)
            x = x + nm.rows(self.params["dec.pos"], offset, offset + len(tokens))
            for i in range(self.config.n_dec_layers):
                x = self._decoder_block(f"dec.{i}", x, z=z, cache=cache, slot=i, offset=offset)
            x = self._ln("dec.ln_out", x)
            if cache is not None and self.config.variant == MEDUSA_BLOCK:
                a = self._ln("medusa.block.ln1", x)
                slot = self.config.n_dec_layers
                cache.append(slot, self._linear("medusa.block.self.k", a).data,
                             self._linear("medusa.block.self.v", a).data)
        return x

    def base_logits(self, hidden):
        """Base-head logits for (T, d_model) or (d_model,) hidden states."""
        h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
        if h.ndim == 1:
            h = nm.reshape(h, (1, h.shape[0]))
        return self._linear("base_proj", h)

    def _block_output_last(self, h_last, z, cache):
        """Extra-block output at the newest cached position (inference path)."""
        slot = self.config.n_dec_layers
        x = h_last
        a = self._ln("medusa.block.ln1", x)
        q = self._linear("medusa.block.self.q", a)
        k = Tensor(cache.self_k[slot])
        v = Tensor(cache.self_v[slot])
        attn = self._linear("medusa.block.self.o", self._attend(q, k, v))
        x = x + attn
        x = x + self._cross_attention("medusa.block.cross", self._ln("medusa.block.ln2", x),
                                      z=z, cache=cache, slot=slot)
        x = x + self._ffn("medusa.block.ffn", self._ln("medusa.block.ln3", x))
        return x

    def medusa_forward(self, hidden, z=None, cache=None):
        """Distributions of all K+1 heads at one position, as (K+1, V) logits.

        Row 0 is the base head. For the "linear" variant only the last hidden
        state is consulted. For the "block" variant the shared block needs the
        self-attention history: pass the session cache (hidden is then the
        last position only) or, without a cache, pass the full (T, d_model)
        hidden sequence and the head rows are produced for its last position.
        """
        cfg = self.config
        h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
        if h.ndim == 1:
            h = nm.reshape(h, (1, h.shape[0]))
        h_last = nm.rows(h, h.shape[0] - 1, h.shape[0])
        row0 = self._linear("base_proj", h_last)
        if cfg.n_medusa_heads == 0:
            return row0
        if cfg.variant == MEDUSA_LINEAR:
            stack = [row0]
            for k in range(1, cfg.n_medusa_heads + 1):
                u = h_last + self._linear(f"medusa.head.{k}", h_last)
                stack.append(self._linear("medusa.proj", u))
            return nm.concat(stack, axis=0)
        if cfg.variant == MEDUSA_BLOCK:
            if z is None:
                raise ConfigError("the block variant needs encoder output z in medusa_forward")
            if cache is not None:
                hb = self._block_output_last(h_last, z, cache)
            else:
                slot_mask = nm.causal_mask(h.shape[0], h.shape[0])
                hb_full = self._block_seq(h, z, slot_mask)
                hb = nm.rows(hb_full, h.shape[0] - 1, h.shape[0])
            stack = [row0]
            for k in range(1, cfg.n_medusa_heads + 1):
                u = hb + self._linear(f"medusa.head.{k}", hb)
                stack.append(self._linear("medusa.proj", u))
            return nm.concat(stack, axis=0)
        raise ConfigError(f"medusa heads requested with variant {cfg.variant!r}")

    def _block_seq(self, hidden, z, mask):
        x = hidden
        x = x + self._self_attention_seq("medusa.block.self", self._ln("medusa.block.ln1", x), mask)
        x = x + self._cross_attention("medusa.block.cross", self._ln("medusa.block.ln2", x), z=z)
        x = x + self._ffn("medusa.block.ffn", self._ln("medusa.block.ln3", x))
        return x

    def _self_attention_seq(self, prefix, x, mask):
        q = self._linear(prefix + ".q", x)
        k = self._linear(prefix + ".k", x)
        v = self._linear(prefix + ".v", x)
        return self._linear(prefix + ".o", self._attend(q, k, v, mask))

    def head_logits_list(self, hidden, z=None):
        """Training-time head logits at every position, one (T, V) tensor per head.

        Entry k at position t scores the token at offset k from t.
        """
        cfg = self.config
        out = [self._linear("base_proj", hidden)]
        if cfg.n_medusa_heads == 0:
            return out
        if cfg.variant == MEDUSA_BLOCK:
            if z is None:
                raise ConfigError("the block variant needs encoder output z")
            src = self._block_seq(hidden, z, nm.causal_mask(hidden.shape[0], hidden.shape[0]))
        else:
            src = hidden
        for k in range(1, cfg.n_medusa_heads + 1):
            u = src + self._linear(f"medusa.head.{k}", src)
            out.append(self._linear("medusa.proj", u))
        return out

    def head_logits_seq(self, hidden, z=None):
        """Stacked form of head_logits_list: (K+1, T, V)."""
        t = hidden.shape[0]
        v = self.config.vocab_size
        return nm.concat([nm.reshape(h, (1, t, v)) for h in self.head_logits_list(hidden, z)], axis=0)

    def new_cache(self):
        return KVCache(self)


# ---------------------------------------------------------------------------
# Initialization, variant attachment, freezing
# ---------------------------------------------------------------------------


def _init_linear(rng, params, prefix, n_in, n_out):
    params[prefix + ".w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)),
                                   requires_grad=True)
    params[prefix + ".b"] = Tensor(np.zeros(n_out), requires_grad=True)


def _init_ln(params, prefix, d):
    params[prefix + ".g"] = Tensor(np.ones(d), requires_grad=True)
    params[prefix + ".b"] = Tensor(np.zeros(d), requires_grad=True)


def _init_attn(rng, params, prefix, d):
    for part in ("q", "k", "v", "o"):
        _init_linear(rng, params, f"{prefix}.{part}", d, d)


def _sinusoid_table(n_positions, d_model):
    """Classic sine/cosine position code; used as the *initial value* of the
    learned position embeddings. The sinusoid basis makes relative and dilated
    position alignment (decoder step t vs encoder frame rate) linearly
    expressible, which the toy copy task needs to find cross-attention early."""
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((n_positions, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def _init_decoder_block(rng, params, prefix, cfg):
    _init_ln(params, prefix + ".ln1", cfg.d_model)
    _init_attn(rng, params, prefix + ".self", cfg.d_model)
    _init_ln(params, prefix + ".ln2", cfg.d_model)
    _init_attn(rng, params, prefix + ".cross", cfg.d_model)
    _init_ln(params, prefix + ".ln3", cfg.d_model)
    _init_linear(rng, params, prefix + ".ffn.w1", cfg.d_model, cfg.d_ff)
    _init_linear(rng, params, prefix + ".ffn.w2", cfg.d_ff, cfg.d_model)


def init_model(config: ModelConfig) -> Model:
    """Deterministic initialization from config.seed.

    Per-head linear layers start as the zero map, so each head's residual
    path initially passes the hidden state through unchanged; the shared head
    projection starts as a copy of the base projection; the shared extra
    block starts as a copy of the final base decoder block. None of those
    consume randomness, so attaching heads never perturbs the base draw.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed & 0xFFFFFFFFFFFFFFFF)
    params: dict[str, Tensor] = {}

    _init_linear(rng, params, "enc.in_proj", cfg.d_feat, cfg.d_model)
    params["enc.pos"] = Tensor(_sinusoid_table(cfg.max_src_frames, cfg.d_model),
                               requires_grad=True)
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        _init_ln(params, p + ".ln1", cfg.d_model)
        _init_attn(rng, params, p + ".self", cfg.d_model)
        _init_ln(params, p + ".ln2", cfg.d_model)
        _init_linear(rng, params, p + ".ffn.w1", cfg.d_model, cfg.d_ff)
        _init_linear(rng, params, p + ".ffn.w2", cfg.d_ff, cfg.d_model)
    _init_ln(params, "enc.ln_out", cfg.d_model)

    params["dec.tok_emb"] = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d_model)),
                                   requires_grad=True)
    params["dec.pos"] = Tensor(_sinusoid_table(cfg.max_tgt_tokens, cfg.d_model),
                               requires_grad=True)
    for i in range(cfg.n_dec_layers):
        _init_decoder_block(rng, params, f"dec.{i}", cfg)
    _init_ln(params, "dec.ln_out", cfg.d_model)
    _init_linear(rng, params, "base_proj", cfg.d_model, cfg.vocab_size)

    if cfg.n_medusa_heads > 0:
        _attach_head_params(params, cfg)

    return Model(cfg, params)


def _attach_head_params(params, cfg):
    params["medusa.proj.w"] = Tensor(params["base_proj.w"].data.copy(), requires_grad=True)
    params["medusa.proj.b"] = Tensor(params["base_proj.b"].data.copy(), requires_grad=True)
    for k in range(1, cfg.n_medusa_heads + 1):
        params[f"medusa.head.{k}.w"] = Tensor(np.zeros((cfg.d_model, cfg.d_model)),
                                              requires_grad=True)
        params[f"medusa.head.{k}.b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
    if cfg.variant == MEDUSA_BLOCK:
        last = f"dec.{cfg.n_dec_layers - 1}"
        for name in list(params):
            if name.startswith(last + "."):
                new_name = "medusa.block" + name[len(last):]
                params[new_name] = Tensor(params[name].data.copy(), requires_grad=True)


def with_medusa(base: Model, n_heads: int, variant: str) -> Model:
    """Attach K heads of the given variant to a copy of a head-less model."""
    if base.config.variant is not None:
        raise ConfigError("with_medusa expects a model without heads")
    cfg = copy.deepcopy(base.config)
    cfg.n_medusa_heads = n_heads
    cfg.variant = variant
    cfg = ModelConfig(**asdict(cfg))
    clone = base.clone()
    params = clone.params
    _attach_head_params(params, cfg)
    return Model(cfg, params)


def freeze_mask(config: ModelConfig) -> dict[str, bool]:
    """Per-parameter trainable flags for the configured variant.

    * no variant: everything trains.
    * "linear": the final base decoder block plus every medusa.* parameter
      (heads and shared projection) train; all else is frozen, including the
      base projection and the decoder output norm.
    * "block": only medusa.* parameters train; the entire base model is
      frozen, base projection included.
    """
    names = _parameter_names(config)
    if config.variant is None:
        return {n: True for n in names}
    if config.variant == MEDUSA_LINEAR:
        last = f"dec.{config.n_dec_layers - 1}."
        return {n: n.startswith(last) or n.startswith("medusa.") for n in names}
    return {n: n.startswith("medusa.") for n in names}


def _parameter_names(config: ModelConfig) -> list[str]:
    # Cheap structural re-derivation; mirrors init_model's insertion order.
    probe = init_model(ModelConfig(**{**asdict(config), "seed": 0}))
    return probe.parameter_names()


def expected_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    probe = init_model(ModelConfig(**{**asdict(config), "seed": 0}))
    return {name: p.shape for name, p in probe.params.items()}
