"""Command-line entry point wiring data generation, training, decoding,
benchmarking, head-count ablation, and pseudo-labeling.

One binary with subcommands; configuration is a JSON file with sections
(corpus / model / train / base_train / policy / penalty) plus flat dotted-key
overrides, e.g. --set train.learning_rate=1e-4. Exit codes: 0 success,
1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import numerics as nm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (CorpusConfig, CorpusFormatError, CorpusSplits, generate_corpus,
                   read_corpus, read_unlabeled, write_corpus)
from .decoding import (EXACT_MATCH, TYPICAL, LengthPenalty, VerificationPolicy,
                       assisted_decode, greedy_decode, medusa_decode)
from .evalbench import ablate_heads, bench, render_tokens
from .model import ConfigError, MEDUSA_BLOCK, MEDUSA_LINEAR, ModelConfig, init_model, with_medusa
from .training import TrainConfig, pseudo_label, train_model

_SECTIONS = {
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "base_train": TrainConfig,
    "policy": VerificationPolicy,
    "penalty": LengthPenalty,
}


@dataclasses.dataclass
class RunConfig:
    corpus: CorpusConfig
    model: ModelConfig
    train: TrainConfig
    base_train: TrainConfig
    policy: VerificationPolicy
    penalty: LengthPenalty


def _build_section(name, cls, payload):
    known = set(cls.__dataclass_fields__)
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"section {name!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from e


def _parse_override(raw):
    if "=" not in raw:
        raise ConfigError(f"override {raw!r} is not of the form section.key=value")
    key, value = raw.split("=", 1)
    if key.count(".") != 1:
        raise ConfigError(f"override key {key!r} must be section.key")
    section, field_name = key.split(".")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return section, field_name, parsed


def load_run_config(path, overrides=()) -> RunConfig:
    """Load and fully validate a run configuration; unknown keys are rejected."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path}: top level must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)} "
                          f"(known: {sorted(_SECTIONS)})")
    merged = {name: dict(raw.get(name, {})) for name in _SECTIONS}
    for raw_override in overrides:
        section, field_name, value = _parse_override(raw_override)
        if section not in _SECTIONS:
            raise ConfigError(f"override targets unknown section {section!r}")
        merged[section][field_name] = value
    if "base_train" not in raw and not any(o.startswith("base_train.") for o in overrides):
        merged["base_train"] = dict(merged["train"])
    built = {}
    for name, cls in _SECTIONS.items():
        built[name] = _build_section(name, cls, merged[name])
    return RunConfig(**built)


def _corpus_paths(corpus_dir):
    return {split: os.path.join(corpus_dir, f"{split}.jsonl")
            for split in ("train", "valid", "test")}


def _read_splits(corpus_dir, frames_per_token=None) -> CorpusSplits:
    paths = _corpus_paths(corpus_dir)
    for p in paths.values():
        if not os.path.exists(p):
            raise ConfigError(f"corpus file not found: {p}")
    return CorpusSplits(
        train=read_corpus(paths["train"], frames_per_token),
        valid=read_corpus(paths["valid"], frames_per_token),
        test=read_corpus(paths["test"], frames_per_token),
    )


def _policy_from_args(args, cfg: RunConfig) -> VerificationPolicy:
    mode = {"typical": TYPICAL, "exact-match": EXACT_MATCH}.get(args.policy) \
        if getattr(args, "policy", None) else cfg.policy.mode
    return VerificationPolicy(
        epsilon=args.epsilon if getattr(args, "epsilon", None) is not None else cfg.policy.epsilon,
        alpha=args.alpha if getattr(args, "alpha", None) is not None else cfg.policy.alpha,
        mode=mode or cfg.policy.mode,
    )


def _penalty_from_args(args, cfg: RunConfig) -> LengthPenalty:
    p = cfg.penalty
    enabled = p.enabled
    if getattr(args, "penalty", None) is not None:
        enabled = args.penalty == "on"
    return LengthPenalty(
        start_index=args.penalty_start if getattr(args, "penalty_start", None) is not None
        else p.start_index,
        factor=args.penalty_factor if getattr(args, "penalty_factor", None) is not None
        else p.factor,
        enabled=enabled,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_run_config(args.config, args.set or [])
    splits = generate_corpus(cfg.corpus)
    os.makedirs(args.out, exist_ok=True)
    paths = _corpus_paths(args.out)
    write_corpus(splits.train, paths["train"])
    write_corpus(splits.valid, paths["valid"])
    write_corpus(splits.test, paths["test"])
    print(f"wrote {len(splits.train)}/{len(splits.valid)}/{len(splits.test)} "
          f"train/valid/test utterances to {args.out}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config, args.set or [])
    splits = _read_splits(args.corpus, cfg.corpus.frames_per_token)
    if args.variant == "none":
        model_cfg = dataclasses.replace(cfg.model, variant=None, n_medusa_heads=0)
        model = init_model(model_cfg)
    else:
        if not args.init_checkpoint:
            raise ConfigError("--init-checkpoint (a trained head-less model) is required "
                              "for the linear and block variants")
        base = load_checkpoint(args.init_checkpoint)
        if base.config.variant is not None:
            raise ConfigError(f"init checkpoint already has variant {base.config.variant!r}")
        variant = MEDUSA_LINEAR if args.variant == "linear" else MEDUSA_BLOCK
        model = with_medusa(base, args.k, variant)
    log_path = args.log or (args.out_checkpoint + ".log")
    with open(log_path, "w", encoding="utf-8") as log:
        records = train_model(model, splits.train, splits.valid, cfg.train, log_sink=log)
    save_checkpoint(model, args.out_checkpoint)
    last = records[-1] if records else {}
    print(f"trained {args.variant} for {last.get('step', 0)} steps "
          f"(final valid loss {last.get('valid_loss', float('nan')):.4f}); "
          f"checkpoint: {args.out_checkpoint}; log: {log_path}")
    return 0


def _decode_one(args, model, assistant, utt, policy, penalty, max_len):
    if args.mode == "greedy":
        return greedy_decode(model, utt.features, max_len, penalty)
    if args.mode == "medusa":
        return medusa_decode(model, utt.features, max_len, policy, penalty)
    return assisted_decode(model, assistant, utt.features, max_len, args.draft_len, penalty)


def cmd_decode(args):
    cfg = load_run_config(args.config, args.set or []) if args.config else _default_run_config()
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    assistant = None
    if args.mode == "assisted":
        if not args.assistant_checkpoint:
            raise ConfigError("--assistant-checkpoint is required for assisted decoding")
        assistant = load_checkpoint(args.assistant_checkpoint)
    utts = read_unlabeled(args.input)
    if not utts:
        raise ConfigError(f"no utterances in {args.input}")
    policy = _policy_from_args(args, cfg)
    penalty = _penalty_from_args(args, cfg)
    max_len = args.max_len or (model.config.max_tgt_tokens - 1)
    for utt in utts:
        result = _decode_one(args, model, assistant, utt, policy, penalty, max_len)
        transcript = [t for t in result.tokens if t != model.config.eos_id]
        if args.json:
            print(json.dumps({
                "id": utt.id,
                "tokens": result.tokens,
                "transcript": transcript,
                "n_iterations": result.n_iterations,
                "n_decoder_forward_passes": result.n_decoder_forward_passes,
                "accepted_per_iteration": result.accepted_per_iteration,
                "wall_time": result.wall_time,
                "n_assistant_forward_passes": result.n_assistant_forward_passes,
            }))
        else:
            print(f"{utt.id}\t{render_tokens(transcript)}")
            print(f"# iterations={result.n_iterations} "
                  f"passes={result.n_decoder_forward_passes} "
                  f"accepted={result.accepted_per_iteration} "
                  f"wall={result.wall_time:.4f}s")
    return 0


def cmd_bench(args):
    cfg = load_run_config(args.config, args.set or []) if args.config else _default_run_config()
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    utts = read_corpus(args.corpus)
    policy = _policy_from_args(args, cfg)
    penalty = _penalty_from_args(args, cfg)
    report = bench(model, utts, policy, penalty, repeats=args.repeats)
    print(report.to_text())
    json_path = args.out + ".json"
    csv_path = args.out + ".csv"
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(report.buckets_csv())
    print(f"wrote {json_path} and {csv_path}")
    return 0


def cmd_ablate(args):
    cfg = load_run_config(args.config, args.set or [])
    splits = _read_splits(args.corpus, cfg.corpus.frames_per_token)
    try:
        k_values = [int(k) for k in args.k_list.split(",") if k.strip()]
    except ValueError as e:
        raise ConfigError(f"--k-list must be comma-separated integers: {e}") from e
    base_cfg = dataclasses.replace(cfg.model, variant=None, n_medusa_heads=0)
    base_model = None
    if args.base_checkpoint:
        base_model = load_checkpoint(args.base_checkpoint)
    rows = ablate_heads(base_cfg, k_values, splits, cfg.base_train, cfg.train,
                        policy=cfg.policy, penalty=cfg.penalty, repeats=args.repeats,
                        base_model=base_model)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    header = f"{'K':>4} {'WER':>8} {'CER':>8} {'pass_speedup':>13} {'wall_speedup':>13}"
    print(header)
    for r in rows:
        print(f"{r['K']:>4} {r['wer']:>8.4f} {r['cer']:>8.4f} "
              f"{r['pass_speedup']:>13.3f} {r['wall_speedup']:>13.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_pseudo_label(args):
    cfg = load_run_config(args.config, args.set or []) if args.config else _default_run_config()
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    utts = read_unlabeled(args.unlabeled)
    penalty = _penalty_from_args(args, cfg)
    labeled = pseudo_label(model, utts, cfg.corpus.frames_per_token,
                           drop_fraction=args.drop_fraction, penalty=penalty)
    with open(args.out, "w", encoding="utf-8") as f:
        for rec in labeled.records:
            f.write(json.dumps({"id": rec.id, "tokens": rec.transcript,
                                "discrepancy": rec.discrepancy, "kept": rec.kept}) + "\n")
    n_drop = len(labeled.dropped())
    print(f"pseudo-labeled {len(labeled.records)} utterances, dropped {n_drop}; "
          f"wrote {args.out}")
    return 0


def _default_run_config() -> RunConfig:
    return RunConfig(corpus=CorpusConfig(), model=ModelConfig(), train=TrainConfig(),
                     base_train=TrainConfig(), policy=VerificationPolicy(),
                     penalty=LengthPenalty())


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_set_flag(p):
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value, e.g. --set train.learning_rate=1e-4")


def _add_policy_flags(p):
    p.add_argument("--policy", choices=["typical", "exact-match"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--penalty", choices=["on", "off"])
    p.add_argument("--penalty-start", type=int, dest="penalty_start")
    p.add_argument("--penalty-factor", type=float, dest="penalty_factor")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="medusa-asr",
        description="Multi-head speculative decoding engine: data, training, "
                    "decoding, benchmarking, ablation, pseudo-labels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for the three split files")
    _add_set_flag(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the base model or a head variant")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True, help="directory with train/valid/test.jsonl")
    p.add_argument("--variant", required=True, choices=["none", "linear", "block"])
    p.add_argument("--out-checkpoint", required=True, dest="out_checkpoint")
    p.add_argument("--init-checkpoint", dest="init_checkpoint",
                   help="trained head-less checkpoint (required for linear/block)")
    p.add_argument("--k", type=int, default=4, help="number of extra heads to attach")
    p.add_argument("--log", help="training log path (default: <out-checkpoint>.log)")
    _add_set_flag(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="transcribe a corpus file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="JSONL corpus (or a single-line file)")
    p.add_argument("--mode", required=True, choices=["greedy", "medusa", "assisted"])
    p.add_argument("--assistant-checkpoint", dest="assistant_checkpoint")
    p.add_argument("--draft-len", type=int, default=4, dest="draft_len")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--json", action="store_true", help="one JSON object per utterance")
    p.add_argument("--config")
    _add_policy_flags(p)
    _add_set_flag(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="measure greedy vs multi-head speedup")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="JSONL utterance file to decode")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="speedup", help="output prefix for .json/.csv reports")
    p.add_argument("--config")
    _add_policy_flags(p)
    _add_set_flag(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="head-count sweep with a shared base model")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True, help="directory with train/valid/test.jsonl")
    p.add_argument("--k-list", required=True, dest="k_list", help="comma-separated head counts")
    p.add_argument("--out", required=True, help="output JSON table path")
    p.add_argument("--base-checkpoint", dest="base_checkpoint",
                   help="reuse a trained head-less checkpoint instead of training one")
    p.add_argument("--repeats", type=int, default=1)
    _add_set_flag(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pseudo-label", help="transcribe unlabeled features and filter outliers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unlabeled", required=True, help="JSONL file with id + features records")
    p.add_argument("--out", required=True)
    p.add_argument("--drop-fraction", type=float, default=0.05, dest="drop_fraction")
    p.add_argument("--config")
    _add_set_flag(p)
    p.set_defaults(func=cmd_pseudo_label)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CorpusFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (nm.ContractError, nm.ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
