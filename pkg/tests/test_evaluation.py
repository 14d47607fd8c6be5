import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import levenshtein_ref
from omnifuse.adapters import AdapterKind, AdapterVariant, output_token_count
from omnifuse.data import synth_dataset
from omnifuse.decoder import DecoderConfig
from omnifuse.errors import ConfigError, ContractError
from omnifuse.evaluation import (DEFAULT_BENCH_ENCODERS, bench_adapters, evaluate, exact_match,
                                 format_bench, levenshtein, load_records, ned, normalize_text,
                                 save_records, token_accuracy)
from omnifuse.model import build_model
from omnifuse.vision import TOY_ENCODERS

short_text = st.text(alphabet="abcx ", max_size=12)


class TestMetrics:
    def test_ned_examples(self):
        assert ned("abc", "abc") == 0
        assert ned("abcd", "abxd") == 0.25
        assert ned("", "ab") == 1.0

    def test_both_empty_logged(self, caplog):
        with caplog.at_level("INFO", logger="omnifuse.evaluation"):
            assert ned("", "") == 0.0
        assert "empty" in caplog.text

    def test_exact_match(self):
        assert exact_match("Cat ", "cat") == 1
        assert exact_match("cat", "dog") == 0
        assert exact_match("Cat", "cat", normalize=False) == 0

    def test_normalize(self):
        assert normalize_text("  A  red\tSquare ") == "a red square"

    def test_token_accuracy(self):
        assert token_accuracy("abcd", "abxd") == 0.75
        assert token_accuracy("ab", "abcd") == 0.5
        assert token_accuracy("", "") == 1.0

    @settings(max_examples=200, deadline=None)
    @given(short_text, short_text)
    def test_levenshtein_matches_oracle(self, a, b):
        assert levenshtein(a, b) == levenshtein_ref(a, b)

    @settings(max_examples=200, deadline=None)
    @given(short_text, short_text)
    def test_ned_properties(self, a, b):
        v = ned(a, b)
        assert 0.0 <= v <= 1.0
        assert v == ned(b, a)
        assert (v == 0.0) == (a == b)

    @settings(max_examples=200, deadline=None)
    @given(short_text, short_text, short_text)
    def test_triangle(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class _Scripted:
    """Stands in for a model: answers from a lookup keyed by record id."""

    def __init__(self, answers):
        self.answers = answers

    def prepare(self, image, prompt, answer, tiling, id):
        return id

    def answer(self, example, max_new):
        return self.answers[example], False


class TestEvaluate:
    def test_aggregates_are_means(self):
        recs = synth_dataset("caption", 5, seed=1)
        answers = {r.id: (r.reference if i % 2 else "a blue thing") for i, r in enumerate(recs)}
        report = evaluate(_Scripted(answers), recs, ("exact_match", "ned", "token_accuracy"))
        for m, value in report.metrics.items():
            per = [row["scores"][m] for row in report.records]
            assert abs(value - math.fsum(per) / len(per)) <= 1e-12
        assert report.metrics["exact_match"] == pytest.approx(2 / 5)

    def test_sorted_by_id(self):
        recs = synth_dataset("vqa", 4, seed=2)[::-1]
        report = evaluate(_Scripted({r.id: r.reference for r in recs}), recs)
        assert [r["id"] for r in report.records] == sorted(r.id for r in recs)
        assert report.metrics == {"exact_match": 1.0, "ned": 0.0}

    def test_report_keys(self):
        recs = synth_dataset("vqa", 2)
        out = json.loads(evaluate(_Scripted({r.id: "x" for r in recs}), recs).to_json())
        assert {tuple(sorted(m)) for m in out["metrics"]} == {("metric", "n", "skipped", "value")}
        assert "runtime_s" not in out

    def test_empty_records(self):
        with pytest.raises(ContractError):
            evaluate(_Scripted({}), [])

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            evaluate(_Scripted({}), synth_dataset("vqa", 1), ("bleu",))

    def test_budget_skips(self, vocab):
        model = build_model([TOY_ENCODERS["cliplike"]], AdapterVariant("mlp_projector"),
                            DecoderConfig(1, 8, 2, len(vocab), 40))
        recs = synth_dataset("caption", 2) + synth_dataset("vqa", 1)
        report = evaluate(model, recs, max_new=3)
        # 1 + 18 + prompt + newline > 40 for the caption prompts only
        long = {r.id for r in recs if 1 + 18 + len(r.prompt) + 1 > 40}
        assert set(report.skipped_ids) == long and report.skipped == len(long)
        assert report.n == len(recs) - len(long)

    def test_real_model_deterministic(self, toy_model):
        recs = synth_dataset("vqa", 3, seed=5)
        a = evaluate(toy_model(), recs, max_new=4).to_json()
        b = evaluate(toy_model(), recs, max_new=4).to_json()
        assert a == b


class TestRecordFiles:
    def test_round_trip(self, tmp_path):
        recs = synth_dataset("formula", 3)
        back = load_records(save_records(recs, tmp_path / "r.jsonl"))
        assert [(r.id, r.prompt, r.reference) for r in back] == [(r.id, r.prompt, r.reference)
                                                                   for r in recs]
        assert all(np.array_equal(a.image, b.image) for a, b in zip(recs, back))

    def test_image_path(self, tmp_path):
        img = np.random.default_rng(0).random((3, 4, 4))
        np.save(tmp_path / "img.npy", img)
        (tmp_path / "r.jsonl").write_text(json.dumps(
            {"id": 1, "image_path": "img.npy", "prompt": "p", "reference": "r"}) + "\n")
        rec = load_records(tmp_path / "r.jsonl")[0]
        assert rec.id == "1" and np.array_equal(rec.image, img)

    def test_bad_line(self, tmp_path):
        (tmp_path / "r.jsonl").write_text('{"id": 1, "prompt": "p"}\n')
        with pytest.raises(ConfigError, match=":1:"):
            load_records(tmp_path / "r.jsonl")


class TestBench:
    def test_all_variants(self):
        rows = bench_adapters(repeats=3)
        assert {r.variant for r in rows} == {k.value for k in AdapterKind}
        assert all(r.median_ms > 0 and math.isfinite(r.p90_ms) for r in rows)
        assert all(r.tokens == r.expected_tokens for r in rows)
        table = format_bench(rows)
        assert len(table.splitlines()) == 2 + len(rows)

    def test_repeats_floor(self):
        with pytest.raises(ConfigError):
            bench_adapters(repeats=2)

    def test_expected_counts(self):
        v = AdapterVariant("concat_fuse")
        rows = bench_adapters(variants=[v], repeats=3)
        assert rows[0].tokens == output_token_count(v, DEFAULT_BENCH_ENCODERS) == 16 + 9
