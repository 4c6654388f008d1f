"""End-to-end CLI tests driving the real subcommands through main()."""

import json
import os

import numpy as np
import pytest

from medusa_asr.checkpoint import load_checkpoint
from medusa_asr.cli import load_run_config, main
from medusa_asr.model import ConfigError


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_config(path, **extra):
    cfg = {
        "corpus": {"n_utterances": 12, "min_tokens": 3, "max_tokens": 6,
                   "frames_per_token": 3, "d_feat": 4, "noise_std": 0.0,
                   "vocab_size": 16, "seed": 3,
                   "split_train": 0.5, "split_valid": 0.25, "split_test": 0.25},
        "model": {"vocab_size": 16, "d_model": 16, "n_enc_layers": 1, "n_dec_layers": 1,
                  "n_attn_heads": 2, "d_ff": 32, "d_feat": 4, "max_src_frames": 36,
                  "max_tgt_tokens": 24, "seed": 1},
        "train": {"learning_rate": 1e-3, "batch_size": 2, "max_steps": 8,
                  "eval_every": 4, "early_stop_patience": 5, "seed": 2},
        "policy": {"epsilon": 0.09, "alpha": 0.3, "mode": "typical"},
        "penalty": {"start_index": 140, "factor": 1.01, "enabled": False},
    }
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


class TestRunConfig:
    def test_unknown_section_rejected(self, workdir):
        p = workdir / "c.json"
        p.write_text(json.dumps({"coprus": {}}))
        with pytest.raises(ConfigError, match="unknown config sections"):
            load_run_config(p)

    def test_unknown_key_rejected(self, workdir):
        p = workdir / "c.json"
        p.write_text(json.dumps({"train": {"learnign_rate": 1.0}}))
        with pytest.raises(ConfigError, match="unknown keys"):
            load_run_config(p)

    def test_dotted_override(self, workdir):
        p = write_config(workdir / "c.json")
        cfg = load_run_config(p, ["train.learning_rate=1e-4", "policy.mode=exact_match"])
        assert cfg.train.learning_rate == 1e-4
        assert cfg.policy.mode == "exact_match"

    def test_missing_file_names_path(self, workdir):
        with pytest.raises(ConfigError, match="nope.json"):
            load_run_config(workdir / "nope.json")


class TestGenData:
    def test_writes_three_files(self, workdir, capsys):
        write_config(workdir / "c.json")
        assert main(["gen-data", "--config", "c.json", "--out", "corpus"]) == 0
        for split in ("train", "valid", "test"):
            assert (workdir / "corpus" / f"{split}.jsonl").exists()

    def test_missing_config_exits_2(self, workdir, capsys):
        assert main(["gen-data", "--config", "absent.json", "--out", "corpus"]) == 2
        assert "absent.json" in capsys.readouterr().err

    def test_rerun_identical(self, workdir):
        write_config(workdir / "c.json")
        main(["gen-data", "--config", "c.json", "--out", "a"])
        main(["gen-data", "--config", "c.json", "--out", "b"])
        for split in ("train", "valid", "test"):
            assert (workdir / "a" / f"{split}.jsonl").read_bytes() == \
                   (workdir / "b" / f"{split}.jsonl").read_bytes()


@pytest.fixture
def trained(workdir):
    """Corpus + base and linear-variant checkpoints on disk."""
    write_config(workdir / "c.json")
    assert main(["gen-data", "--config", "c.json", "--out", "corpus"]) == 0
    assert main(["train", "--config", "c.json", "--corpus", "corpus",
                 "--variant", "none", "--out-checkpoint", "base.ckpt"]) == 0
    assert main(["train", "--config", "c.json", "--corpus", "corpus",
                 "--variant", "linear", "--init-checkpoint", "base.ckpt",
                 "--k", "2", "--out-checkpoint", "linear.ckpt"]) == 0
    return workdir


class TestTrain:
    def test_checkpoint_and_log_written(self, trained):
        assert (trained / "base.ckpt").exists()
        log = (trained / "base.ckpt.log").read_text().strip().splitlines()
        assert len(log) >= 1
        rec = json.loads(log[0])
        assert {"step", "train_loss", "valid_loss", "lr"} <= set(rec)

    def test_block_variant_keeps_base_params_byte_equal(self, trained, capsys):
        assert main(["train", "--config", "c.json", "--corpus", "corpus",
                     "--variant", "block", "--init-checkpoint", "base.ckpt",
                     "--k", "2", "--out-checkpoint", "block.ckpt"]) == 0
        base = load_checkpoint(trained / "base.ckpt")
        block = load_checkpoint(trained / "block.ckpt")
        for name, p in base.params.items():
            assert block.params[name].data.tobytes() == p.data.tobytes(), name

    def test_medusa_variant_requires_init_checkpoint(self, trained, capsys):
        rc = main(["train", "--config", "c.json", "--corpus", "corpus",
                   "--variant", "linear", "--k", "2",
                   "--out-checkpoint", "x.ckpt"])
        assert rc == 2
        assert "init-checkpoint" in capsys.readouterr().err

    def test_missing_corpus_dir_exits_2(self, trained, capsys):
        rc = main(["train", "--config", "c.json", "--corpus", "no-such-dir",
                   "--variant", "none", "--out-checkpoint", "x.ckpt"])
        assert rc == 2


class TestDecode:
    def test_exact_match_medusa_equals_greedy(self, trained, capsys):
        assert main(["decode", "--checkpoint", "linear.ckpt", "--input",
                     "corpus/test.jsonl", "--mode", "greedy", "--json"]) == 0
        greedy_out = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert main(["decode", "--checkpoint", "linear.ckpt", "--input",
                     "corpus/test.jsonl", "--mode", "medusa",
                     "--policy", "exact-match", "--json"]) == 0
        medusa_out = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert [r["tokens"] for r in greedy_out] == [r["tokens"] for r in medusa_out]
        assert all(r["n_decoder_forward_passes"] == 2 * r["n_iterations"]
                   for r in medusa_out)

    def test_json_objects_have_accounting_fields(self, trained, capsys):
        assert main(["decode", "--checkpoint", "linear.ckpt", "--input",
                     "corpus/test.jsonl", "--mode", "medusa", "--json"]) == 0
        for line in capsys.readouterr().out.strip().splitlines():
            rec = json.loads(line)
            assert {"id", "tokens", "n_iterations", "n_decoder_forward_passes",
                    "accepted_per_iteration", "wall_time"} <= set(rec)

    def test_assisted_equals_greedy(self, trained, capsys):
        assert main(["decode", "--checkpoint", "linear.ckpt", "--input",
                     "corpus/test.jsonl", "--mode", "greedy", "--json"]) == 0
        greedy_out = [json.loads(l)["tokens"] for l in
                      capsys.readouterr().out.strip().splitlines()]
        assert main(["decode", "--checkpoint", "linear.ckpt",
                     "--assistant-checkpoint", "base.ckpt", "--input",
                     "corpus/test.jsonl", "--mode", "assisted", "--json"]) == 0
        assisted = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert [r["tokens"] for r in assisted] == greedy_out
        assert all(r["n_assistant_forward_passes"] > 0 for r in assisted)

    def test_bad_checkpoint_path_exits_2(self, trained, capsys):
        rc = main(["decode", "--checkpoint", "missing.ckpt", "--input",
                   "corpus/test.jsonl", "--mode", "greedy"])
        assert rc == 2

    def test_plain_output_has_transcript_and_stats(self, trained, capsys):
        assert main(["decode", "--checkpoint", "base.ckpt", "--input",
                     "corpus/test.jsonl", "--mode", "greedy"]) == 0
        out = capsys.readouterr().out
        assert "utt-" in out
        assert "# iterations=" in out


class TestBenchCli:
    def test_emits_json_and_csv(self, trained, capsys):
        assert main(["bench", "--checkpoint", "linear.ckpt", "--corpus",
                     "corpus/test.jsonl", "--repeats", "1", "--out", "sp"]) == 0
        report = json.loads((trained / "sp.json").read_text())
        assert {"pass_speedup", "wall_speedup", "buckets"} <= set(report)
        csv_lines = (trained / "sp.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "min_len,max_len,mean_speedup,n"
        assert len(csv_lines) > 1


class TestAblateCli:
    def test_three_rows_and_determinism(self, trained, capsys):
        args = ["ablate", "--config", "c.json", "--corpus", "corpus",
                "--k-list", "1,2,3", "--base-checkpoint", "base.ckpt",
                "--out", "ab.json",
                "--set", "train.max_steps=4", "--set", "train.eval_every=4"]
        assert main(args) == 0
        rows1 = json.loads((trained / "ab.json").read_text())
        assert [r["K"] for r in rows1] == [1, 2, 3]
        assert main(args[:-4] + ["--out", "ab2.json"] + args[-4:]) == 0
        rows2 = json.loads((trained / "ab2.json").read_text())
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_speedup"}
                              for r in rows]
        assert strip(rows1) == strip(rows2)


class TestPseudoLabelCli:
    def test_drops_exactly_ceiling(self, trained, capsys):
        # build an unlabeled file with 100 records from the corpus features
        recs = []
        src = json.loads((trained / "c.json").read_text())
        src["corpus"]["n_utterances"] = 100
        src["corpus"]["split_train"] = 1.0
        src["corpus"]["split_valid"] = 0.0
        src["corpus"]["split_test"] = 0.0
        (trained / "c100.json").write_text(json.dumps(src))
        assert main(["gen-data", "--config", "c100.json", "--out", "big"]) == 0
        lines = (trained / "big" / "train.jsonl").read_text().strip().splitlines()
        unl = trained / "unlabeled.jsonl"
        with open(unl, "w") as f:
            for line in lines:
                rec = json.loads(line)
                f.write(json.dumps({"id": rec["id"], "features": rec["features"]}) + "\n")
        assert main(["pseudo-label", "--checkpoint", "base.ckpt",
                     "--unlabeled", str(unl), "--out", "labels.jsonl"]) == 0
        out = [json.loads(l) for l in (trained / "labels.jsonl").read_text().splitlines()]
        assert len(out) == 100
        assert sum(1 for r in out if not r["kept"]) == 5
        assert all({"id", "tokens", "discrepancy", "kept"} <= set(r) for r in out)


class TestExitCodes:
    def test_usage_error_is_2(self, workdir):
        assert main(["decode", "--mode", "greedy"]) == 2  # missing required flags

    def test_help_is_0(self, workdir):
        assert main(["--help"]) == 0
