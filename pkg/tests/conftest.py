"""Shared fixtures: toy languages, a tiny on-disk corpus and float64 models."""
from __future__ import annotations

import pytest
import torch

from zero_avsr.av_romanizer import RomanizerConfig, RomanizerModel
from zero_avsr.llm_bridge import ToyLMConfig, build_lm
from zero_avsr.roman_core import RomanAlphabet
from zero_avsr.synth_corpus import gen_language, generate_corpus

TOY_CODES = (("grk", "romance"), ("cyr", "slavic"), ("heb", "semitic"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the pilot-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: pilot-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def alphabet() -> RomanAlphabet:
    return RomanAlphabet()


@pytest.fixture(scope="session")
def toy_languages(alphabet):
    return [
        gen_language(100 + i, 6, alphabet, lang=code, family=family, script=i, lexicon_size=20)
        for i, (code, family) in enumerate(TOY_CODES)
    ]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, toy_languages):
    return generate_corpus(
        tmp_path_factory.mktemp("corpus"),
        toy_languages,
        seed=0,
        utts_per_split={"train": 6, "valid": 2, "test": 3},
        text_per_split={"train": 20, "test": 4},
        max_words=2,
        threshold=0.0,
    )


@pytest.fixture
def tiny_romanizer() -> RomanizerModel:
    torch.manual_seed(0)
    return RomanizerModel(RomanizerConfig(d_model=8, n_layers=1, n_heads=2, d_ffn=16, dropout=0.0)).double().eval()


@pytest.fixture
def tiny_lm(toy_languages):
    config = ToyLMConfig.for_languages(toy_languages, d_model=8, n_layers=1, n_heads=2, d_ffn=16, max_len=256)
    return build_lm(config, seed=0).double().eval()
