import math

import pytest
import torch

from zero_avsr import const
from zero_avsr.av_romanizer import RomanizerConfig, RomanizerModel
from zero_avsr.exceptions import (
    DivergedLoss,
    FrozenTensorChanged,
    MissingLanguage,
    SeenLanguageViolation,
    UnknownLanguage,
)
from zero_avsr.llm_bridge import Bridge, ToyLMConfig
from zero_avsr.roman_core import TextPair
from zero_avsr.trainer import (
    CosineSchedule,
    FreezeAudit,
    Task1Data,
    Task2Data,
    TrainOptions,
    TriStageSchedule,
    lr_at,
    multitask_loop,
    pretrain_toy_lm,
    read_metrics,
    schedule_from_config,
    task_draws,
    tensor_digest,
    train_romanizer,
    train_task1,
    train_task2,
)

SEEN = ["grk", "cyr"]


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def test_tristage_values():
    sched = TriStageSchedule(warmup_steps=10, hold_steps=5, decay_steps=20, peak_lr=1e-3, init_scale=0.01, final_scale=0.05)
    assert lr_at(sched, 0) == pytest.approx(1e-5)
    assert lr_at(sched, 10) == pytest.approx(1e-3)
    assert lr_at(sched, 14) == pytest.approx(1e-3)
    assert lr_at(sched, 25) == pytest.approx(1e-3 * math.sqrt(0.05))
    assert lr_at(sched, 35) == pytest.approx(5e-5)
    assert lr_at(sched, 1000) == pytest.approx(5e-5)
    warmup = [lr_at(sched, s) for s in range(11)]
    assert warmup == sorted(warmup)
    # no jumps at the stage boundaries
    for boundary in (10, 15, 35):
        assert abs(lr_at(sched, boundary) - lr_at(sched, boundary - 1)) < 0.11 * sched.peak_lr


def test_cosine_values():
    sched = CosineSchedule(warmup_steps=4, total_steps=24, peak_lr=2e-3)
    assert lr_at(sched, 0) == 0.0
    assert lr_at(sched, 2) == pytest.approx(1e-3)
    assert lr_at(sched, 4) == pytest.approx(2e-3)
    assert lr_at(sched, 14) == pytest.approx(1e-3)
    assert lr_at(sched, 24) == pytest.approx(0.0, abs=1e-12)
    assert lr_at(sched, 50) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        CosineSchedule(warmup_steps=5, total_steps=5)
    with pytest.raises(ValueError):
        lr_at(sched, -1)


def test_schedule_from_config():
    assert isinstance(schedule_from_config({}, 10), TriStageSchedule)
    cosine = schedule_from_config({"kind": "cosine", "warmup_steps": 100}, 4)
    assert cosine.warmup_steps == 3
    with pytest.raises(ValueError):
        schedule_from_config({"kind": "linear"}, 10)


# ---------------------------------------------------------------------------
# Task mixing
# ---------------------------------------------------------------------------


def test_task_draws_fraction_and_reproducibility():
    draws = task_draws(0.3, 20000, seed=7)
    assert set(draws) == {1, 2}
    assert draws.count(1) / len(draws) == pytest.approx(0.3, abs=0.015)
    assert task_draws(0.3, 20000, seed=7) == draws
    assert task_draws(0.3, 20000, seed=8) != draws


def test_task_draws_sequential_and_errors():
    assert task_draws(0.25, 8, seed=0, mode="sequential") == [1, 1, 2, 2, 2, 2, 2, 2]
    for ratio in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            task_draws(ratio, 10, seed=0)
    with pytest.raises(ValueError):
        task_draws(0.5, 10, seed=0, mode="shuffled")


# ---------------------------------------------------------------------------
# Freeze audit and task data
# ---------------------------------------------------------------------------


def test_freeze_audit_detects_writes():
    layer = torch.nn.Linear(3, 3)
    audit = FreezeAudit.frozen_in({"layer": layer}, [layer.bias])
    assert list(audit.tensors) == ["layer.weight"]
    with torch.no_grad():
        layer.bias.add_(1.0)
    audit.check()
    with torch.no_grad():
        layer.weight[0, 0] += 1.0
    assert audit.changed() == ["layer.weight"]
    with pytest.raises(FrozenTensorChanged):
        audit.check()


def test_task1_rejects_unseen_speech(tiny_corpus, tiny_romanizer):
    with pytest.raises(SeenLanguageViolation):
        Task1Data.from_utterances(tiny_romanizer, tiny_corpus.utterances("train", ["grk", "heb"]), SEEN)


def test_task2_coverage(tiny_corpus, tiny_lm):
    pairs = tiny_corpus.text_pairs("train")
    assert len(Task2Data.from_pairs(pairs, tiny_lm.config.scripts)) == len(pairs)
    with pytest.raises(MissingLanguage):
        Task2Data.from_pairs(tiny_corpus.text_pairs("train", ["grk"]), tiny_lm.config.scripts)
    with pytest.raises(UnknownLanguage):
        Task2Data.from_pairs(pairs, ["grk", "cyr"])


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def test_multitask_keeps_frozen_parts(tiny_corpus, tiny_romanizer, tiny_lm, tmp_path):
    bridge = Bridge(tiny_lm, d_av=tiny_romanizer.config.d_model, rank=2, alpha=4.0).double()
    base = {name: tensor_digest(p) for name, p in tiny_lm.named_parameters() if "adapter" not in name}
    romanizer_before = {name: tensor_digest(p) for name, p in tiny_romanizer.named_parameters()}
    lora_before = {name: p.detach().clone() for name, p in tiny_lm.named_parameters() if "lora_B" in name}

    task1 = Task1Data.from_utterances(tiny_romanizer, tiny_corpus.utterances("train", SEEN), SEEN)
    task2 = Task2Data.from_pairs(tiny_corpus.text_pairs("train"), tiny_lm.config.scripts)
    options = TrainOptions(steps=0, batch_size=2, log_interval=1, out_dir=tmp_path)
    schedule = CosineSchedule(warmup_steps=1, total_steps=6, peak_lr=1e-2)
    state = multitask_loop(
        bridge, task1, task2, 0.5, 6, seed=3, schedule=schedule, options=options, romanizer=tiny_romanizer, mode="sequential"
    )

    assert state.step == 6
    assert options.steps == 0
    assert set(state.ema) == {"task1", "task2"}
    assert {name: tensor_digest(p) for name, p in tiny_lm.named_parameters() if "adapter" not in name} == base
    assert {name: tensor_digest(p) for name, p in tiny_romanizer.named_parameters()} == romanizer_before
    assert any(not torch.equal(p, lora_before[name]) for name, p in tiny_lm.named_parameters() if "lora_B" in name)

    rows = read_metrics(tmp_path / const.METRICS_FILENAME)
    assert [r["task"] for r in rows] == ["task1"] * 3 + ["task2"] * 3
    assert [int(r["step"]) for r in rows] == list(range(1, 7))


def test_task2_only_moves_lora(tiny_corpus, tiny_lm):
    bridge = Bridge(tiny_lm, d_av=8, rank=2, alpha=4.0).double()
    compressor = {name: p.detach().clone() for name, p in bridge.compressor.named_parameters()}
    options = TrainOptions(steps=3, batch_size=2)
    train_task2(bridge, tiny_corpus.text_pairs("train"), CosineSchedule(0, 3, 1e-2), options, seed=0)
    for name, p in bridge.compressor.named_parameters():
        assert torch.equal(p, compressor[name])


def test_nan_loss_raises(tiny_corpus, tiny_lm):
    bridge = Bridge(tiny_lm, d_av=8, rank=2, alpha=4.0).double()
    with torch.no_grad():
        tiny_lm.head.bias.fill_(float("nan"))
    with pytest.raises(DivergedLoss):
        train_task2(bridge, tiny_corpus.text_pairs("train"), CosineSchedule(0, 2), TrainOptions(steps=2, batch_size=1), seed=0)


def _romanizer(seed):
    torch.manual_seed(seed)
    return RomanizerModel(RomanizerConfig(d_model=8, n_layers=1, n_heads=2, d_ffn=16, dropout=0.0))


def test_romanizer_resume_is_bit_exact(tiny_corpus, tmp_path):
    utterances = tiny_corpus.utterances("train", SEEN)
    schedule = TriStageSchedule(warmup_steps=1, hold_steps=1, decay_steps=2, peak_lr=1e-2)

    def run(model, steps, out_dir, resume=None):
        options = TrainOptions(steps=steps, batch_size=2, log_interval=1, checkpoint_every=2, out_dir=out_dir)
        return train_romanizer(model, utterances, schedule, options, seed=5, modality_dropout=0.5, resume=resume)

    straight = _romanizer(0)
    run(straight, 4, tmp_path / "straight")

    first = _romanizer(0)
    run(first, 2, tmp_path / "first")
    resumed = _romanizer(99)
    state = run(resumed, 4, tmp_path / "resumed", resume=tmp_path / "first" / "romanizer.train.pt")

    assert state.step == 4
    for (name, a), b in zip(straight.state_dict().items(), resumed.state_dict().values()):
        assert torch.equal(a, b), name
    assert len(read_metrics(tmp_path / "straight" / const.METRICS_FILENAME)) == 4
    assert len(read_metrics(tmp_path / "resumed" / const.METRICS_FILENAME)) == 2


def test_pretrain_toy_lm_resume_is_bit_exact(tiny_corpus, toy_languages, tmp_path):
    config = ToyLMConfig.for_languages(toy_languages, d_model=8, n_layers=1, n_heads=2, d_ffn=16, max_len=128)
    pairs = tiny_corpus.text_pairs("train")
    schedule = CosineSchedule(warmup_steps=1, total_steps=4, peak_lr=1e-2)

    def run(steps, out_dir, resume=None):
        options = TrainOptions(steps=0, batch_size=2, log_interval=1, checkpoint_every=2, out_dir=out_dir)
        lm = pretrain_toy_lm(pairs, config, steps, seed=4, options=options, schedule=schedule, resume=resume)
        assert options.steps == 0
        return lm

    straight = run(4, tmp_path / "straight")
    run(2, tmp_path / "first")
    resumed = run(4, tmp_path / "resumed", resume=tmp_path / "first" / "lm.train.pt")
    for (name, a), b in zip(straight.state_dict().items(), resumed.state_dict().values()):
        assert torch.equal(a, b), name
    assert [r["step"] for r in read_metrics(tmp_path / "resumed" / const.METRICS_FILENAME)] == ["3", "4"]
    with pytest.raises(ValueError):
        pretrain_toy_lm(pairs, config, 1, seed=4, pair_fraction=1.5)


def test_metrics_rerun_truncates_and_resume_keeps_prefix(tiny_corpus, tmp_path):
    utterances = tiny_corpus.utterances("train", SEEN)
    schedule = TriStageSchedule(warmup_steps=1, hold_steps=1, decay_steps=2, peak_lr=1e-2)

    def run(steps, resume=None):
        options = TrainOptions(steps=steps, batch_size=2, log_interval=1, checkpoint_every=2, out_dir=tmp_path)
        return train_romanizer(_romanizer(0), utterances, schedule, options, seed=5, resume=resume)

    metrics = tmp_path / const.METRICS_FILENAME
    run(4)
    first = metrics.read_bytes()
    run(4)
    assert metrics.read_bytes() == first
    assert [r["step"] for r in read_metrics(metrics)] == ["1", "2", "3", "4"]

    run(2)
    assert [r["step"] for r in read_metrics(metrics)] == ["1", "2"]
    run(4, resume=tmp_path / "romanizer.train.pt")
    assert [r["step"] for r in read_metrics(metrics)] == ["1", "2", "3", "4"]
    assert metrics.read_bytes() == first



def test_pretrain_toy_lm(tiny_corpus, toy_languages, tmp_path):
    config = ToyLMConfig.for_languages(toy_languages, d_model=8, n_layers=1, n_heads=2, d_ffn=16, max_len=128)
    pairs = tiny_corpus.text_pairs("train")
    options = TrainOptions(steps=0, batch_size=2, log_interval=2, out_dir=tmp_path)
    lm = pretrain_toy_lm(pairs, config, 4, seed=1, options=options)
    assert not lm.training
    assert len(read_metrics(tmp_path / const.METRICS_FILENAME)) == 2
    with pytest.raises(MissingLanguage):
        pretrain_toy_lm([p for p in pairs if p.lang != "heb"], config, 1, seed=1)
    with pytest.raises(UnknownLanguage):
        pretrain_toy_lm(pairs + [TextPair("a", "a", "xyz")], config, 1, seed=1)


def test_train_task1_moves_compressor_not_romanizer(tiny_corpus, tiny_romanizer, tiny_lm):
    bridge = Bridge(tiny_lm, d_av=tiny_romanizer.config.d_model, rank=2, alpha=4.0).double()
    compressor = {name: p.detach().clone() for name, p in bridge.compressor.named_parameters()}
    romanizer = {name: tensor_digest(p) for name, p in tiny_romanizer.named_parameters()}
    utterances = tiny_corpus.utterances("train", SEEN)
    state = train_task1(
        tiny_romanizer, bridge, utterances, SEEN, CosineSchedule(0, 2, 1e-2), TrainOptions(steps=2, batch_size=2), seed=0
    )
    assert state.step == 2
    assert any(not torch.equal(p, compressor[name]) for name, p in bridge.compressor.named_parameters())
    assert {name: tensor_digest(p) for name, p in tiny_romanizer.named_parameters()} == romanizer
    with pytest.raises(SeenLanguageViolation):
        train_task1(
            tiny_romanizer, bridge, tiny_corpus.utterances("train"), SEEN, CosineSchedule(0, 2), TrainOptions(steps=1), seed=0
        )
