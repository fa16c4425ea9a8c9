"""Desk-scale acceptance runs on configs/desk.yaml, seed 0. Run with --runslow."""
import copy
from pathlib import Path

import pytest
import torch

from zero_avsr import cli
from zero_avsr.av_frontend import NoiseBank
from zero_avsr.av_romanizer import RomanizerModel
from zero_avsr.config import resolve_config, seen_languages
from zero_avsr.eval_harness import (
    UttResult,
    build_report,
    cascaded_system,
    evaluate_cascaded,
    evaluate_unified,
    greedy_romanizer,
    load_testset,
    noise_sweep,
    subset_ablation,
)
from zero_avsr.llm_bridge import Bridge, ToyLMBackend, make_backend
from zero_avsr.synth_corpus import Corpus, derive_seed
from zero_avsr.trainer import (
    Task1Data,
    romanizer_config_from,
    run_bridge_training,
    run_lm_pretraining,
    run_romanizer_training,
)

DESK = str(Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
SEED = 0
HOLDOUT = "geo"

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    argv = ["gen-corpus", "--config", DESK, "--out", str(root / "corpus"), "--set", "progress=false"]
    assert cli.main(argv) == 0
    cfg = resolve_config(DESK, ["progress=false", f"paths.corpus={root / 'corpus'}"], seed=SEED)
    corpus = Corpus.load(root / "corpus")
    seen = seen_languages(cfg, corpus.languages)
    assert HOLDOUT not in seen

    romanizer = run_romanizer_training(corpus, seen, cfg, root / "romanizer", SEED)
    lm = run_lm_pretraining(corpus, cfg, root / "lm", SEED)
    pristine = copy.deepcopy(lm)
    bridge = run_bridge_training(romanizer, lm, corpus, seen, cfg, root / "bridge", SEED)
    oracle = make_backend(cfg["backend"], languages=corpus.languages, cache_dir=root)
    return {
        "cfg": cfg,
        "corpus": corpus,
        "seen": seen,
        "romanizer": romanizer,
        "pristine_lm": pristine,
        "bridge": bridge,
        "oracle": oracle,
        "testset": load_testset(corpus, corpus.languages, cfg),
    }


def _unified(desk, bridge, testset):
    ev = desk["cfg"]["eval"]
    return evaluate_unified(desk["romanizer"], bridge, testset, ev["beam_width"], ev["temperature"])


def test_unified_reaches_the_unseen_language(desk):
    report = _unified(desk, desk["bridge"], desk["testset"])
    held_out = report.row(HOLDOUT).cer
    seen_cer, _ = report.aggregate(exclude=[HOLDOUT])
    assert held_out <= 0.30
    assert held_out <= 3 * seen_cer


def test_cascaded_oracle_reaches_the_unseen_language(desk):
    report = evaluate_cascaded(desk["romanizer"], desk["oracle"], desk["testset"])
    assert report.row(HOLDOUT).cer <= 0.30


def test_untrained_romanizer_baseline_fails(desk):
    with torch.random.fork_rng():
        torch.manual_seed(SEED)
        untrained = RomanizerModel(romanizer_config_from(desk["cfg"]["romanizer"]))
    report = evaluate_cascaded(untrained, desk["oracle"], load_testset(desk["corpus"], [HOLDOUT], desk["cfg"]))
    assert report.row(HOLDOUT).cer >= 0.80


def test_romanizer_fits_seen_training_speech(desk):
    utterances = desk["corpus"].utterances("train", desk["seen"])[:200]
    romanize = greedy_romanizer(desk["romanizer"].eval())
    results = [UttResult(u.id, u.lang, u.pair.roman, romanize(u)) for u in utterances]
    cer, _ = build_report(results).aggregate()
    assert cer < 0.05


def test_toy_lm_deromanizes_ground_truth_roman_of_unseen_language(desk):
    testset = load_testset(desk["corpus"], [HOLDOUT], desk["cfg"])
    report = evaluate_cascaded(lambda utt: utt.pair.roman, ToyLMBackend(desk["bridge"].lm), testset)
    assert report.row(HOLDOUT).cer < 0.05


def test_task1_loss_halves(desk):
    cfg, romanizer = desk["cfg"], desk["romanizer"]
    section = cfg["bridge"]
    utterances = desk["corpus"].utterances("train", desk["seen"])[:64]
    data = Task1Data.from_utterances(romanizer, utterances, desk["seen"])
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(SEED, 4))
        initial = Bridge(
            copy.deepcopy(desk["pristine_lm"]),
            romanizer.config.d_model,
            section["lora_rank"],
            section["lora_alpha"],
            section["lora_targets"],
        )

    def loss(bridge):
        bridge.eval()
        with torch.no_grad():
            return bridge.task1_loss(data.features, data.graphemes, data.langs).item()

    assert loss(desk["bridge"]) < 0.5 * loss(initial)


def test_audio_visual_beats_audio_in_noise(desk):
    cfg = desk["cfg"]
    sources = desk["corpus"].utterances("valid")
    bank = NoiseBank(cfg["noise"]["kinds"], [u.audio_feats for u in sources])
    system = cascaded_system(desk["romanizer"], desk["oracle"])
    rows = noise_sweep(system, desk["testset"], bank, [-5, 0, 15], ["A", "AV"], seed=SEED)
    cer = {(r.snr_db, r.modality): r.cer for r in rows}
    for snr in (-5, 0):
        assert cer[(snr, "AV")] <= cer[(snr, "A")] + 0.01
    assert cer[(-5, "A")] >= cer[(15, "A")] - 0.01


def test_more_seen_languages_help_the_holdout(desk):
    cfg = desk["cfg"]
    rows = subset_ablation(desk["corpus"], [HOLDOUT], cfg["eval"]["seen_subsets"], cfg, seed=SEED)
    by_size = {row.n_seen: row.cer for row in rows}
    assert by_size[2] > by_size[4]


def test_dropping_holdout_text_from_task2_hurts_it(desk):
    cfg = copy.deepcopy(desk["cfg"])
    # a weak LM leaves room for Task 2 to matter
    cfg["lm"]["steps"] = 300
    cfg["bridge"]["steps"] = 1000
    weak = run_lm_pretraining(desk["corpus"], cfg, None, SEED)
    testset = load_testset(desk["corpus"], [HOLDOUT], cfg)
    every = list(desk["corpus"].languages)

    def holdout_cer(text_langs):
        bridge = run_bridge_training(
            desk["romanizer"], copy.deepcopy(weak), desk["corpus"], desk["seen"], cfg, None, SEED, text_langs=text_langs
        )
        return _unified(desk, bridge, testset).row(HOLDOUT).cer

    assert holdout_cer([lang for lang in every if lang != HOLDOUT]) > holdout_cer(every)
