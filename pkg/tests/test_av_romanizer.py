import itertools
from functools import lru_cache

import numpy as np
import pytest
import torch

from zero_avsr.av_romanizer import (
    Posteriorgram,
    batch_ctc_loss,
    collate,
    ctc_beam_decode,
    ctc_grad_check,
    ctc_greedy_decode,
    ctc_loss,
    encode,
    forward_logits,
    load_checkpoint,
    required_frames,
    save_checkpoint,
)
from zero_avsr.exceptions import DimensionMismatch, TargetTooLong
from zero_avsr.roman_core import RomanAlphabet, tokenize_roman
from zero_avsr.synth_corpus import gen_utterance


@lru_cache(maxsize=None)
def _paths(n_labels: int, n_frames: int):
    paths = np.array(list(itertools.product(range(n_labels), repeat=n_frames)))
    collapsed = []
    for path in paths:
        out = []
        prev = None
        for label in path:
            if label != prev and label != 0:
                out.append(int(label))
            prev = label
        collapsed.append(tuple(out))
    return paths, collapsed


def _brute_force_nll(log_probs: np.ndarray, target: tuple[int, ...]) -> float:
    n_frames, n_labels = log_probs.shape
    paths, collapsed = _paths(n_labels, n_frames)
    scores = log_probs[np.arange(n_frames), paths].sum(axis=1)
    keep = np.array([c == target for c in collapsed])
    return -float(np.logaddexp.reduce(scores[keep]))


def _random_log_probs(rng, n_frames, n_labels):
    logits = torch.from_numpy(rng.standard_normal((n_frames, n_labels)) * 2)
    return torch.log_softmax(logits, dim=-1)


def test_ctc_matches_path_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 500:
        n_frames = int(rng.integers(1, 7))
        n_labels = int(rng.integers(2, 5))
        target = tuple(int(t) for t in rng.integers(1, n_labels, size=int(rng.integers(0, 4))))
        if required_frames(target) > n_frames:
            continue
        log_probs = _random_log_probs(rng, n_frames, n_labels)
        ours = ctc_loss(log_probs, target).item()
        assert ours == pytest.approx(_brute_force_nll(log_probs.numpy(), target), abs=1e-6)
        checked += 1


def test_ctc_agrees_with_batched_loss():
    rng = np.random.default_rng(1)
    log_probs = torch.stack([_random_log_probs(rng, 8, 5) for _ in range(3)])
    targets = [[1, 2], [3, 3, 1], [4]]
    lengths = torch.tensor([8, 7, 5])
    batched = batch_ctc_loss(log_probs, lengths, targets)
    for i, target in enumerate(targets):
        single = ctc_loss(log_probs[i, : lengths[i]], target)
        assert batched[i].item() == pytest.approx(single.item(), abs=1e-8)


def test_target_too_long():
    log_probs = _random_log_probs(np.random.default_rng(2), 2, 3)
    assert required_frames([1, 1, 2]) == 4
    with pytest.raises(TargetTooLong):
        ctc_loss(log_probs, [1, 1])
    assert torch.isfinite(ctc_loss(log_probs, [1, 2]))


def test_empty_target_is_all_blank():
    log_probs = _random_log_probs(np.random.default_rng(3), 4, 3)
    assert ctc_loss(log_probs, []).item() == pytest.approx(-log_probs[:, 0].sum().item())


def _confident_posteriors(rng, n_frames, n_labels):
    probs = 0.1 * rng.dirichlet(np.ones(n_labels), size=n_frames)
    probs[np.arange(n_frames), rng.integers(n_labels, size=n_frames)] += 0.9
    return np.log(probs)


def test_beam_width_one_equals_greedy():
    alphabet = RomanAlphabet(("a", "b", "c"))
    rng = np.random.default_rng(4)
    for _ in range(100):
        log_probs = _confident_posteriors(rng, int(rng.integers(1, 12)), alphabet.size)
        best, _ = ctc_beam_decode(log_probs, 1, alphabet)[0]
        assert best == ctc_greedy_decode(log_probs, alphabet)


def test_unpruned_beam_scores_are_exact():
    alphabet = RomanAlphabet(("a", "b"))
    log_probs = _random_log_probs(np.random.default_rng(5), 4, alphabet.size)
    results = ctc_beam_decode(log_probs.numpy(), 100, alphabet)
    assert [s for _, s in results] == sorted((s for _, s in results), reverse=True)
    for text, score in results[:5]:
        target = tokenize_roman(text, alphabet)
        assert score == pytest.approx(-ctc_loss(log_probs, target).item(), abs=1e-9)


def test_greedy_collapses_repeats():
    alphabet = RomanAlphabet(("a", "b"))
    # frames: a a blank a b b
    best = [1, 1, 0, 1, 2, 2]
    log_probs = np.log(np.full((6, 3), 0.05))
    log_probs[np.arange(6), best] = np.log(0.9)
    assert ctc_greedy_decode(Posteriorgram(torch.from_numpy(log_probs)), alphabet) == "aab"


def test_encode_shapes(tiny_romanizer):
    rng = np.random.default_rng(6)
    cfg = tiny_romanizer.config
    for n_frames in (1, 7, 30):
        f_a = rng.standard_normal((n_frames, cfg.d_audio_in))
        f_v = rng.standard_normal((n_frames, cfg.d_video_in))
        assert encode(tiny_romanizer, f_a, f_v).shape == (n_frames, cfg.d_model)
        post = forward_logits(tiny_romanizer, f_a, f_v, "A")
        assert post.log_probs.shape == (n_frames, cfg.alphabet.size)
        np.testing.assert_allclose(post.log_probs.exp().sum(-1).detach().numpy(), 1.0, atol=1e-9)
    assert encode(tiny_romanizer, np.zeros((0, cfg.d_audio_in)), np.zeros((0, cfg.d_video_in))).shape == (0, cfg.d_model)
    with pytest.raises(DimensionMismatch):
        encode(tiny_romanizer, rng.standard_normal((5, 3)), rng.standard_normal((5, cfg.d_video_in)))
    with pytest.raises(DimensionMismatch):
        encode(tiny_romanizer, rng.standard_normal((5, cfg.d_audio_in)), rng.standard_normal((4, cfg.d_video_in)))


def test_modality_masking_changes_output(tiny_romanizer):
    rng = np.random.default_rng(7)
    f_a = rng.standard_normal((6, tiny_romanizer.config.d_audio_in))
    f_v = rng.standard_normal((6, tiny_romanizer.config.d_video_in))
    with torch.no_grad():
        av = encode(tiny_romanizer, f_a, f_v, "AV")
        a_only = encode(tiny_romanizer, f_a, f_v, "A")
        a_blind = encode(tiny_romanizer, f_a, np.zeros_like(f_v) + 5.0, "A")
    assert not torch.allclose(av, a_only)
    torch.testing.assert_close(a_only, a_blind)


def test_modality_per_row_matches_single_rows(tiny_romanizer):
    rng = np.random.default_rng(8)
    cfg = tiny_romanizer.config
    x_a = torch.as_tensor(rng.standard_normal((3, 5, cfg.d_audio_in)))
    x_v = torch.as_tensor(rng.standard_normal((3, 5, cfg.d_video_in)))
    modalities = ["A", "V", "AV"]
    with torch.no_grad():
        mixed = tiny_romanizer.encode(x_a, x_v, modality=modalities)
        for i, modality in enumerate(modalities):
            alone = tiny_romanizer.encode(x_a[i : i + 1], x_v[i : i + 1], modality=modality)
            torch.testing.assert_close(mixed[i], alone[0])
    with pytest.raises(ValueError):
        tiny_romanizer.encode(x_a, x_v, modality=["A", "AV"])
    with pytest.raises(ValueError):
        tiny_romanizer.encode(x_a, x_v, modality=["A", "AV", "AVX"])


def test_ctc_gradients_match_finite_differences(tiny_romanizer, toy_languages):
    utts = [gen_utterance(toy_languages[0], 1, 0.1, seed=s) for s in (1, 2)]
    batch = [(u.audio_feats, u.video_feats, tokenize_roman(u.pair.roman, tiny_romanizer.alphabet)) for u in utts]
    gap = ctc_grad_check(tiny_romanizer, batch, params=["head.weight", "head.bias", "fusion.weight"])
    assert gap < 1e-4


def test_collate_masks_padding(toy_languages):
    utts = [gen_utterance(toy_languages[1], n, 0.0, seed=n) for n in (1, 3)]
    x_a, x_v, lengths, mask = collate(utts, torch.float64)
    assert x_a.shape[:2] == x_v.shape[:2] == mask.shape
    assert lengths.tolist() == [u.n_frames for u in utts]
    assert mask[0, lengths[0] :].all() and not mask[0, : lengths[0]].any()


def test_checkpoint_restores_outputs(tmp_path, tiny_romanizer):
    rng = np.random.default_rng(8)
    f_a = rng.standard_normal((5, tiny_romanizer.config.d_audio_in)).astype(np.float32)
    f_v = rng.standard_normal((5, tiny_romanizer.config.d_video_in)).astype(np.float32)
    model = tiny_romanizer.float()
    save_checkpoint(model, tmp_path / "r.pt", seen=["grk"])
    loaded, payload = load_checkpoint(tmp_path / "r.pt")
    assert payload["seen"] == ["grk"]
    with torch.no_grad():
        torch.testing.assert_close(encode(loaded, f_a, f_v), encode(model, f_a, f_v))
