import csv
import math

import numpy as np
import pytest

from zero_avsr.av_frontend import NoiseBank
from zero_avsr.exceptions import BackendRefusal
from zero_avsr.eval_harness import (
    BREAKDOWN_KEYS,
    EvalReport,
    LanguageRow,
    UttResult,
    add_noise,
    build_report,
    compare_backends,
    error_breakdown,
    evaluate_cascaded,
    evaluate_unified,
    noise_sweep,
    reconstruction_test,
    write_backend_comparison,
    write_sweep,
)
from zero_avsr.llm_bridge import Bridge, LexiconOracleBackend
from zero_avsr.synth_corpus import deromanize_oracle, romanize


def gold_roman(utt):
    return utt.pair.roman


class _BrokenFor(LexiconOracleBackend):
    """Oracle that refuses or blanks out one language."""

    def __init__(self, languages, lang, refuse=True):
        super().__init__(languages)
        self.broken = lang
        self.refuse = refuse

    def deromanize(self, roman, lang):
        if lang == self.broken:
            if self.refuse:
                raise BackendRefusal("not today")
            return ""
        return super().deromanize(roman, lang)


@pytest.fixture
def testset(tiny_corpus):
    return tiny_corpus.utterances("test")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def test_language_row_counts():
    row = LanguageRow("grk")
    row.add("abd ef", "abc ef")
    row.add("", "xy")
    assert row.n_utts == 2
    assert row.cer == pytest.approx((1 + 2) / (6 + 2))
    assert row.wer == pytest.approx((1 + 1) / (2 + 1))
    assert math.isnan(LanguageRow("cyr").cer)


def test_aggregates_are_unweighted_means():
    results = [
        UttResult("a1", "eng", "aaaa", "aaab"),
        UttResult("b1", "grk", "ab", "ab"),
        UttResult("b2", "grk", "ab", "ab"),
        UttResult("c1", "cyr", "abc", "xyz"),
        UttResult("c2", "cyr", "abc", None),
    ]
    report = build_report(results, dominant="eng")
    assert [r.lang for r in report.rows] == ["cyr", "eng", "grk"]
    assert report.n_failed == 1
    assert report.row("cyr").n_utts == 1
    aggs = report.aggregates()
    assert aggs["avg"][0] == pytest.approx((1.0 + 0.25 + 0.0) / 3)
    assert aggs["avg_wo_eng"][0] == pytest.approx(0.5)
    assert "seen_avg" not in aggs

    report.mark_unseen(["cyr"])
    aggs = report.aggregates()
    assert aggs["unseen_avg"][0] == pytest.approx(1.0)
    assert aggs["seen_avg"][0] == pytest.approx(0.125)


def test_report_normalizes_before_scoring():
    report = build_report([UttResult("x", "eng", "Hello,  World", "hello world")])
    assert report.row("eng").cer == 0.0


def test_report_write(tmp_path):
    report = build_report(
        [UttResult("1", "grk", "ab", "ab"), UttResult("2", "heb", "ab", "a")],
        metadata={"config_hash": "abc123", "seed": 0},
    ).mark_unseen(["heb"])
    report.write(tmp_path / "cascaded")
    with (tmp_path / "cascaded.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert [r["lang"] for r in rows] == ["grk", "heb", "avg", "seen_avg", "unseen_avg"]
    assert rows[1]["unseen"] == "1"
    text = (tmp_path / "cascaded.txt").read_text()
    assert "# config_hash: abc123" in text
    assert "heb *" in text


# ---------------------------------------------------------------------------
# Cascaded and unified paths
# ---------------------------------------------------------------------------


def test_oracle_cascade_is_exact(tiny_corpus, testset):
    backend = LexiconOracleBackend(tiny_corpus.languages)
    report = evaluate_cascaded(gold_roman, backend, testset, metadata={"seed": 4})
    assert {r.lang for r in report.rows} == set(tiny_corpus.languages)
    for row in report.rows:
        assert row.cer == 0.0 and row.wer == 0.0
        assert row.n_utts == 3
    assert report.metadata["backend"] == "lexicon-oracle"
    assert report.metadata["seed"] == 4


def test_backend_failures_are_excluded(tiny_corpus, testset):
    report = evaluate_cascaded(gold_roman, _BrokenFor(tiny_corpus.languages, "cyr"), testset)
    row = report.row("cyr")
    assert row.n_failed == 3 and row.n_utts == 0
    assert report.aggregate() == (0.0, 0.0)


def test_empty_hypothesis_scores_full_deletion(tiny_corpus, testset):
    report = evaluate_cascaded(gold_roman, _BrokenFor(tiny_corpus.languages, "heb", refuse=False), testset)
    assert report.row("heb").cer == 1.0
    assert report.row("heb").n_failed == 0


def test_cascade_with_model(tiny_corpus, testset, tiny_romanizer):
    report = evaluate_cascaded(tiny_romanizer, LexiconOracleBackend(tiny_corpus.languages), testset, modality="A")
    assert sum(r.n_utts for r in report.rows) == len(testset)
    assert report.metadata["modality"] == "A"


def test_unified_report(testset, tiny_romanizer, tiny_lm):
    bridge = Bridge(tiny_lm, d_av=tiny_romanizer.config.d_model, rank=2, alpha=4.0).double()
    report = evaluate_unified(tiny_romanizer, bridge, testset[:4], beam=1, temperature=1.0, max_len=4)
    assert sum(r.n_utts for r in report.rows) == 4
    assert report.metadata["mode"] == "unified"
    assert "mean_log_score" in report.metadata


def test_reconstruction(tiny_corpus):
    languages = tiny_corpus.languages
    pairs = tiny_corpus.text_pairs("test")
    report = reconstruction_test(
        pairs,
        lambda text, lang: romanize(text, languages[lang]),
        lambda roman, lang: deromanize_oracle(roman, languages[lang]),
    )
    assert report.aggregate() == (0.0, 0.0)

    def refuse(text, lang):
        raise BackendRefusal("no")

    failed = reconstruction_test(pairs, refuse, lambda roman, lang: roman)
    assert failed.n_failed == len(pairs)


def test_error_breakdown(tiny_corpus, testset):
    def corrupt_grk(utt):
        return utt.pair.roman + "zz" if utt.lang == "grk" else utt.pair.roman

    backend = _BrokenFor(tiny_corpus.languages, "cyr", refuse=False)
    counts = error_breakdown(corrupt_grk, backend, testset)
    assert set(counts) == set(BREAKDOWN_KEYS)
    assert counts == {"mis_romanization": 3, "deromanization": 3, "both": 0, "none": 3}

    refusing = _BrokenFor(tiny_corpus.languages, "heb")
    assert sum(error_breakdown(corrupt_grk, refusing, testset).values()) == 6


def test_compare_backends(tiny_corpus, testset, tmp_path):
    reports = compare_backends(
        gold_roman,
        {"oracle": LexiconOracleBackend(tiny_corpus.languages), "blank-heb": _BrokenFor(tiny_corpus.languages, "heb", False)},
        testset,
    )
    assert reports["oracle"].aggregate()[0] == 0.0
    assert reports["blank-heb"].aggregate()[0] == pytest.approx(1 / 3)
    write_backend_comparison(tmp_path / "backends.csv", reports)
    with (tmp_path / "backends.csv").open() as f:
        assert len(list(csv.DictReader(f))) == 2 * (3 + 1)


# ---------------------------------------------------------------------------
# Noise sweep
# ---------------------------------------------------------------------------


def test_add_noise_is_seeded_and_audio_only(testset):
    bank = NoiseBank(["white", "pink"])
    a = add_noise(testset, bank, 5.0, seed=1)
    b = add_noise(testset, bank, 5.0, seed=1)
    for clean, x, y in zip(testset, a, b):
        np.testing.assert_array_equal(x.audio_feats, y.audio_feats)
        np.testing.assert_array_equal(x.video_feats, clean.video_feats)
        assert not np.array_equal(x.audio_feats, clean.audio_feats)


def test_noise_sweep_grid(testset, tmp_path):
    seen = []

    def system(noisy, modality):
        seen.append(modality)
        return EvalReport([LanguageRow("grk", 1, 0, 1, 4, 1, 2)])

    rows = noise_sweep(system, testset, NoiseBank(["white"]), snr_list=[-5, 0, 10], modalities=["A", "AV"])
    assert [(r.snr_db, r.modality) for r in rows] == [
        (-5.0, "A"), (-5.0, "AV"), (0.0, "A"), (0.0, "AV"), (10.0, "A"), (10.0, "AV"),
    ]
    assert all(r.cer == 0.25 and r.wer == 0.5 for r in rows)
    write_sweep(tmp_path / "noise_sweep.csv", rows)
    assert (tmp_path / "noise_sweep.txt").exists()
    with (tmp_path / "noise_sweep.csv").open() as f:
        assert len(list(csv.DictReader(f))) == 6
