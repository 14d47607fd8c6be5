import json
import subprocess
import sys

import pytest
import yaml

from omnifuse import config as C
from omnifuse.checkpoint import Checkpoint
from omnifuse.cli import main
from omnifuse.data import synth_dataset
from omnifuse.errors import ConfigError
from omnifuse.evaluation import save_records

TINY = """\
schema_version: 1
encoders: [cliplike]
decoder: {width: 16}
pretrain: {steps: 2}
sft: {steps: 2}
data: {n: 4}
eval: {max_new: 4}
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConfig:
    def test_default_round_trip(self):
        cfg = C.RunConfig()
        assert C.loads(C.dumps(cfg)) == cfg

    def test_partial_file(self, tiny):
        cfg = C.load(tiny)
        assert cfg.decoder.width == 16 and cfg.pretrain.steps == 2 and cfg.sft.lr is None
        assert C.loads(C.dumps(cfg)) == cfg

    def test_two_encoders_and_lora(self):
        cfg = C.loads("schema_version: 1\nencoders: [cliplike, {preset: dinolike}]\n"
                      "adapter: {kind: layer_sum_fuse}\nsft: {steps: 3, lora: {rank: 2}}\n")
        assert [e.name for e in cfg.encoders] == ["cliplike", "dinolike"]
        assert cfg.sft.lora.rank == 2
        assert C.loads(C.dumps(cfg)) == cfg

    @pytest.mark.parametrize("text, where", [
        ("schema_version: 1\ndecoder: {widht: 8}\n", "decoder.widht"),
        ("schema_version: 1\nlearning_rate: 3\n", "learning_rate"),
        ("schema_version: 1\npretrain: {steps: 2, seed: 4}\n", "pretrain.seed"),
        ("schema_version: 1\nsft: {lora: {rank: 0}}\n", "sft"),
    ])
    def test_rejections(self, text, where):
        with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
            C.loads(text)

    @pytest.mark.parametrize("text", [
        "schema_version: 2\n",
        "encoders: [cliplike]\n",
        "- 1\n",
        "schema_version: 1\nencoders: []\n",
        "schema_version: 1\nencoders: [resnet]\n",
        "schema_version: 1\npretrain: null\nsft: null\n",
        "schema_version: 1\ndecoder: {max_seq_len: 100}\n",
        "schema_version: 1\ndecoder: {width: 10, heads: 4}\n",
        "schema_version: 1\neval: {tiling: maybe}\n",
        "schema_version: 1\npretrain: {seq_len: 4096}\n",
        "a: [\n",
    ])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            C.loads(text)

    def test_budget_counts_tiles(self):
        with pytest.raises(ConfigError, match="max_seq_len"):
            C.loads("schema_version: 1\ndecoder: {max_seq_len: 600}\n"
                    "tiling: {enabled: true, max_tiles: 4}\n")

    def test_stage_inherits_seed_and_tiling(self):
        cfg = C.loads("schema_version: 1\nseed: 7\ntiling: {enabled: true, max_tiles: 2}\n")
        st = cfg.stage("sft")
        assert st.seed == 7 and st.tiling


class TestTilePlan:
    @pytest.mark.parametrize("argv, text", [
        ((672, 672, 336, 4), "2x2 pad 0,0"),
        ((336, 336, 336, 1), "1x1 pad 0,0"),
        ((1000, 500, 336, 6), "1x2 pad 0,0"),
    ])
    def test_outputs(self, capsys, argv, text):
        code, out, _ = run(capsys, "tile-plan", *argv)
        assert code == 0 and out.strip() == text

    def test_degenerate(self, capsys, caplog):
        code, out, _ = run(capsys, "tile-plan", 0, 5, 336, 4)
        assert code == 0 and out.startswith("1x1")
        assert "degenerate" in caplog.text

    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["tile-plan", "a"])
        assert exc.value.code == 2


class TestTrainEval:
    def test_train_writes_artifacts(self, capsys, tiny, tmp_path):
        out = tmp_path / "run"
        code, stdout, _ = run(capsys, "train", "--config", tiny, "--out", out)
        assert code == 0 and "stage2" in stdout
        assert {p.name for p in out.iterdir()} == {"stage1.omnf", "stage2.omnf", "train_log.jsonl",
                                                   "config.yaml"}
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 4
        assert Checkpoint.load(out / "stage2.omnf").stage == "sft"
        assert C.load(out / "config.yaml") == C.load(tiny)

    def test_train_deterministic(self, capsys, tiny, tmp_path):
        for name in ("a", "b"):
            assert run(capsys, "train", "--config", tiny, "--out", tmp_path / name)[0] == 0
        for f in ("stage1.omnf", "stage2.omnf", "train_log.jsonl"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_flag_changes_weights(self, capsys, tiny, tmp_path):
        run(capsys, "train", "--config", tiny, "--out", tmp_path / "a")
        run(capsys, "train", "--config", tiny, "--out", tmp_path / "b", "--seed", 3)
        assert (tmp_path / "a/stage2.omnf").read_bytes() != (tmp_path / "b/stage2.omnf").read_bytes()

    def test_stage2_without_stage1(self, capsys, tmp_path):
        cfg = tmp_path / "sft.yaml"
        cfg.write_text(TINY.replace("pretrain: {steps: 2}", "pretrain: null"))
        code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "r")
        assert code == 5 and "stage-1" in err

    def test_stage2_from_checkpoint(self, capsys, tiny, tmp_path):
        run(capsys, "train", "--config", tiny, "--out", tmp_path / "a")
        cfg = tmp_path / "sft.yaml"
        cfg.write_text(TINY.replace("pretrain: {steps: 2}", "pretrain: null"))
        code, _, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "b",
                         "--checkpoint", tmp_path / "a/stage1.omnf")
        assert code == 0 and (tmp_path / "b/stage2.omnf").is_file()

    def test_eval_report(self, capsys, tiny, tmp_path):
        run(capsys, "train", "--config", tiny, "--out", tmp_path / "r")
        code, stdout, _ = run(capsys, "eval", "--config", tiny, "--checkpoint",
                              tmp_path / "r/stage2.omnf", "--out", tmp_path / "rep.json")
        assert code == 0 and "exact_match=" in stdout
        report = json.loads((tmp_path / "rep.json").read_text())
        assert [m["metric"] for m in report["metrics"]] == ["exact_match", "ned"]
        assert report["metrics"][0]["n"] == 4 and report["tiling"] == "off"

    def test_eval_missing_checkpoint(self, capsys, tiny, tmp_path):
        code, _, err = run(capsys, "eval", "--config", tiny, "--checkpoint", tmp_path / "nope.omnf")
        assert code == 4 and "not found" in err

    def test_eval_corrupt_checkpoint(self, capsys, tiny, tmp_path):
        bad = tmp_path / "bad.omnf"
        bad.write_bytes(b"NOPE!" + bytes(8))
        code, _, err = run(capsys, "eval", "--config", tiny, "--checkpoint", bad)
        assert code == 7 and "magic" in err

    def test_missing_config(self, capsys, tmp_path):
        assert run(capsys, "train", "--config", tmp_path / "none.yaml")[0] == 4

    def test_invalid_config(self, capsys, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("schema_version: 1\ndecoder: {widht: 8}\n")
        code, _, err = run(capsys, "train", "--config", cfg)
        assert code == 3 and "decoder.widht" in err

    def test_records_file(self, capsys, tiny, tmp_path):
        recs = save_records(synth_dataset("vqa", 3, seed=9), tmp_path / "r.jsonl")
        run(capsys, "train", "--config", tiny, "--out", tmp_path / "r", "--records", recs)
        code, _, _ = run(capsys, "eval", "--config", tiny, "--checkpoint", tmp_path / "r/stage2.omnf",
                         "--records", recs, "--out", tmp_path / "rep.json")
        assert code == 0
        assert json.loads((tmp_path / "rep.json").read_text())["metrics"][0]["n"] == 3


class TestGradCheck:
    def test_pass(self, capsys, tiny):
        code, out, _ = run(capsys, "grad-check", "--config", tiny)
        assert code == 0
        assert [line.split()[:2] for line in out.splitlines()] == [
            ["adapter", "PASS"], ["special_tokens", "PASS"], ["lm", "PASS"]]

    def test_corrupted_fails(self, capsys, tiny):
        code, out, _ = run(capsys, "grad-check", "--config", tiny, "--corrupt-gradients")
        assert code == 6 and "FAIL" in out

    def test_cost_guard(self, capsys, tmp_path):
        cfg = tmp_path / "big.yaml"
        cfg.write_text(yaml.safe_dump({"schema_version": 1, "decoder": {"width": 256}}))
        code, _, err = run(capsys, "grad-check", "--config", cfg)
        assert code == 8 and "toy sizes" in err


class TestBenchCli:
    def test_table(self, capsys, tmp_path):
        code, out, _ = run(capsys, "bench-adapters", "--repeats", 3, "--out", tmp_path / "b.json")
        assert code == 0 and "attention_pool_fuse median" in out
        assert len(json.loads((tmp_path / "b.json").read_text())["rows"]) == 6


def test_threads_env(capsys, monkeypatch):
    monkeypatch.setenv("OMNIFUSE_THREADS", "1")
    assert run(capsys, "tile-plan", 10, 10, 10, 1)[0] == 0
    monkeypatch.setenv("OMNIFUSE_THREADS", "zero")
    assert run(capsys, "tile-plan", 10, 10, 10, 1)[0] == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "omnifuse.cli", "tile-plan", "672", "672", "336", "4"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.strip() == "2x2 pad 0,0"
