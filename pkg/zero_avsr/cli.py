"""Command line entry point: zeroavsr <command> --config FILE --seed N --out DIR [--set key=value ...].

Exit codes: 0 ok, 2 config or language-set errors, 3 diverged training,
4 remote backend unreachable with nothing cached.
"""
from __future__ import annotations

import argparse
import csv
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import voluptuous as vol
from dotenv import load_dotenv

from . import const
from .av_frontend import NoiseBank
from .av_romanizer import RomanizerModel, load_checkpoint, save_checkpoint
from .config import config_hash, resolve_config, seen_languages, write_resolved
from .eval_harness import (
    EvalReport,
    cascaded_system,
    compare_backends,
    error_breakdown,
    evaluate_cascaded,
    evaluate_unified,
    load_testset,
    noise_sweep,
    reconstruction_test,
    run_zero_shot_matrix,
    subset_ablation,
    unified_system,
    write_ablation,
    write_backend_comparison,
    write_holdout_matrix,
    write_sweep,
)
from .exceptions import (
    BackendUnavailable,
    ConfigError,
    DivergedLoss,
    MissingLanguage,
    SeenLanguageViolation,
    UnknownLanguage,
    ZeroAvsrError,
)
from .llm_bridge import (
    DeromanizerBackend,
    DeromanizerKind,
    RemoteChatBackend,
    ToyLM,
    deromanize,
    load_bridge,
    load_lm,
    make_backend,
    save_bridge,
    save_lm,
)
from .roman_core import RomanAlphabet
from .synth_corpus import Corpus, derive_seed, gen_language, generate_corpus, romanize
from .trainer import run_bridge_training, run_lm_pretraining, run_romanizer_training

_LOGGER = logging.getLogger(__name__)

CONFIG_ERRORS = (ConfigError, SeenLanguageViolation, MissingLanguage, UnknownLanguage, vol.Invalid)


@dataclass
class RunConfig:
    command: str
    config: Path | None
    seed: int | None
    out: Path
    overrides: list[str] = field(default_factory=list)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run config")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted config override"
    )
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="zeroavsr", description="Desk-scale zero-shot audio-visual speech recognition")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic multilingual corpus")
    sub.add_parser("train-romanizer", parents=[common], help="train the AV-Romanizer with CTC")
    sub.add_parser("pretrain-lm", parents=[common], help="pretrain the toy LM on text of every language")
    sub.add_parser("train-bridge", parents=[common], help="Task 1 + Task 2 training of LoRA, compressor and adapter")
    sub.add_parser("eval", parents=[common], help=f"evaluate; eval.mode is one of {', '.join(const.EVAL_MODES)}")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _path(cfg: Mapping, key: str) -> Path:
    value = cfg["paths"][key]
    if value is None:
        raise ConfigError(f"paths.{key} must be set for this command")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"paths.{key}: {path} does not exist")
    return path


def _corpus(cfg: Mapping) -> Corpus:
    return Corpus.load(_path(cfg, "corpus"))


def _romanizer(cfg: Mapping) -> tuple[RomanizerModel, dict]:
    return load_checkpoint(_path(cfg, "romanizer"))


def _metadata(cfg: Mapping, backend: str | None = None) -> dict:
    meta = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "normalizer": const.NORMALIZER_VERSION}
    if backend:
        meta["backend"] = backend
    if backend == DeromanizerKind.REMOTE_CHAT.value:
        meta["prompt_version"] = const.PROMPT_VERSION
    return meta


def _lm_for_backend(cfg: Mapping) -> ToyLM | None:
    """The bridged LM when a bridge is configured, else the pretrained LM."""
    if cfg["paths"]["bridge"]:
        bridge, _ = load_bridge(_path(cfg, "bridge"))
        return bridge.lm
    if cfg["paths"]["lm"]:
        return load_lm(_path(cfg, "lm"))
    return None


def _backend(settings: Mapping, corpus: Corpus, cfg: Mapping, cache_dir: Path) -> DeromanizerBackend:
    kind = DeromanizerKind(settings["kind"])
    lm = _lm_for_backend(cfg) if kind is DeromanizerKind.TOY_LM else None
    if kind is DeromanizerKind.TOY_LM and lm is None:
        raise ConfigError("the toy-lm backend needs paths.lm or paths.bridge")
    cache_dir = None if settings.get("cache") else cache_dir
    backend = make_backend(settings, languages=corpus.languages, lm=lm, cache_dir=cache_dir)
    if not backend.healthy():
        raise BackendUnavailable(f"{kind.value} backend is unreachable and its cache is empty")
    return backend


def _roman_source(cfg: Mapping) -> RomanizerModel | Callable:
    if cfg["eval"]["romanizer"] == "oracle":
        return lambda utt: utt.pair.roman
    model, _ = _romanizer(cfg)
    return model


def _unseen(cfg: Mapping, corpus: Corpus, trained_on: Sequence[str] | None) -> list[str]:
    if cfg["languages"]["unseen"]:
        return list(cfg["languages"]["unseen"])
    if trained_on is not None:
        return [lang for lang in corpus.languages if lang not in set(trained_on)]
    return []


def _write_report(report: EvalReport, stem: Path) -> None:
    report.write(stem)
    for name, (cer, wer) in report.aggregates().items():
        _LOGGER.info("%s %s: CER %.4f WER %.4f", stem.name, name, cer, wer)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(cfg: Mapping, out: Path) -> None:
    section = cfg["corpus"]
    scripts = [name for name, _, _ in const.SCRIPT_BLOCKS]
    alphabet = RomanAlphabet()
    languages = []
    for i, entry in enumerate(section["languages"]):
        languages.append(
            gen_language(
                entry.get("seed", derive_seed(cfg["seed"], i)),
                section["n_graphemes"],
                alphabet,
                lang=entry["code"],
                family=entry["family"],
                script=scripts.index(entry["script"]),
                lexicon_size=section["lexicon_size"],
                max_roman_len=section["max_roman_len"],
            )
        )
    generate_corpus(
        out,
        languages,
        seed=cfg["seed"],
        utts_per_split=section["utts_per_split"],
        text_per_split=section["text_per_split"],
        max_words=section["max_words"],
        noise_sigma=section["noise_sigma"],
        threshold=section["lid_threshold"],
        lid_scale=section["lid_scale"],
        progress=cfg["progress"],
    )


def cmd_train_romanizer(cfg: Mapping, out: Path) -> None:
    corpus = _corpus(cfg)
    seen = seen_languages(cfg, corpus.languages)
    missing = sorted(set(seen) - set(corpus.languages))
    if missing:
        raise UnknownLanguage(missing[0])
    _LOGGER.info("Training romanizer on speech of %s", ", ".join(seen))
    model = run_romanizer_training(corpus, seen, cfg, out, cfg["seed"], resume=cfg["paths"]["resume"])
    save_checkpoint(model, out / "romanizer.pt", seen=seen, config_hash=config_hash(cfg))


def cmd_pretrain_lm(cfg: Mapping, out: Path) -> None:
    corpus = _corpus(cfg)
    lm = run_lm_pretraining(corpus, cfg, out, cfg["seed"], resume=cfg["paths"]["resume"])
    save_lm(lm, out / "lm.pt", config_hash=config_hash(cfg))


def cmd_train_bridge(cfg: Mapping, out: Path) -> None:
    corpus = _corpus(cfg)
    romanizer, payload = _romanizer(cfg)
    lm = load_lm(_path(cfg, "lm"))
    seen = seen_languages(cfg, corpus.languages)
    bridge = run_bridge_training(
        romanizer,
        lm,
        corpus,
        seen,
        cfg,
        out,
        cfg["seed"],
        allowed_speech=payload.get("seen"),
        resume=cfg["paths"]["resume"],
    )
    save_bridge(bridge, out / "bridge.pt", seen=seen, config_hash=config_hash(cfg))


def _eval_cascaded(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    ev = cfg["eval"]
    testset = load_testset(corpus, corpus.languages, cfg)
    backend = _backend(cfg["backend"], corpus, cfg, out)
    if ev["romanizer"] == "oracle":
        romanizer, trained_on = (lambda utt: utt.pair.roman), None
    else:
        romanizer, payload = _romanizer(cfg)
        trained_on = payload.get("seen")
    report = evaluate_cascaded(
        romanizer,
        backend,
        testset,
        modality=ev["modality"],
        dominant=cfg["languages"]["dominant"],
        metadata=_metadata(cfg, backend.kind.value),
    )
    _write_report(report.mark_unseen(_unseen(cfg, corpus, trained_on)), out / "cascaded")


def _eval_unified(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    ev = cfg["eval"]
    romanizer, payload = _romanizer(cfg)
    bridge, _ = load_bridge(_path(cfg, "bridge"))
    report = evaluate_unified(
        romanizer,
        bridge,
        load_testset(corpus, corpus.languages, cfg),
        ev["beam_width"],
        ev["temperature"],
        modality=ev["modality"],
        max_len=ev["max_len"],
        dominant=cfg["languages"]["dominant"],
        metadata=_metadata(cfg),
    )
    _write_report(report.mark_unseen(_unseen(cfg, corpus, payload.get("seen"))), out / "unified")


def _eval_reconstruction(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    backend = _backend(cfg["backend"], corpus, cfg, out)
    if cfg["eval"]["romanizer"] == "remote":
        if not isinstance(backend, RemoteChatBackend):
            raise ConfigError("eval.romanizer=remote needs backend.kind=remote-chat")
        romanize_fn = backend.romanize
    else:
        romanize_fn = lambda text, lang: romanize(text, corpus.languages[lang])  # noqa: E731
    limit = cfg["eval"]["max_utts"]
    pairs = []
    for lang in corpus.languages:
        lang_pairs = corpus.text_pairs("test", [lang])
        pairs += lang_pairs[:limit] if limit else lang_pairs
    report = reconstruction_test(
        pairs,
        romanize_fn,
        lambda roman, lang: deromanize(backend, roman, lang),
        dominant=cfg["languages"]["dominant"],
        metadata={**_metadata(cfg, backend.kind.value), "romanizer": cfg["eval"]["romanizer"]},
    )
    _write_report(report, out / "reconstruction")


def _eval_noise_sweep(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    ev = cfg["eval"]
    romanizer, _ = _romanizer(cfg)
    testset = load_testset(corpus, corpus.languages, cfg)
    sources = corpus.utterances("valid") or corpus.utterances("train")
    bank = NoiseBank(cfg["noise"]["kinds"], [u.audio_feats for u in sources])
    if ev["unified"] and cfg["paths"]["bridge"]:
        bridge, _ = load_bridge(_path(cfg, "bridge"))
        system = unified_system(romanizer, bridge, ev["beam_width"], ev["temperature"])
    else:
        system = cascaded_system(romanizer, _backend(cfg["backend"], corpus, cfg, out))
    rows = noise_sweep(system, testset, bank, ev["snr_list"], ev["modalities"], seed=cfg["seed"])
    write_sweep(out / "noise_sweep.csv", rows)


def _eval_zero_shot(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    ev = cfg["eval"]
    if cfg["backend"]["kind"] == DeromanizerKind.TOY_LM.value and not ev["unified"]:
        raise ConfigError("the toy-lm backend in zero_shot mode needs eval.unified=true")
    all_langs = list(corpus.languages)
    holdouts = ev["holdouts"] or all_langs
    unknown = sorted(set(holdouts) - set(all_langs))
    if unknown:
        raise UnknownLanguage(unknown[0])
    results = run_zero_shot_matrix(all_langs, holdouts, corpus, cfg, seed=cfg["seed"], out_dir=out, unified=ev["unified"])
    meta = _metadata(cfg, cfg["backend"]["kind"])
    for res in results:
        for mode, report in res.reports.items():
            report.metadata.update(meta)
            _write_report(report, out / f"holdout-{res.holdout}" / mode)
    for mode in results[0].reports:
        write_holdout_matrix(out / f"zero_shot_{mode}.csv", results, mode)


def _eval_error_breakdown(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    backend = _backend(cfg["backend"], corpus, cfg, out)
    counts = error_breakdown(
        _roman_source(cfg), backend, load_testset(corpus, corpus.languages, cfg), modality=cfg["eval"]["modality"]
    )
    with (out / "error_breakdown.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["category", "count"])
        writer.writerows(counts.items())
    _LOGGER.info("Error breakdown: %s", counts)


def _eval_compare_backends(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    settings = cfg["eval"]["backends"]
    if not settings:
        raise ConfigError("eval.backends must name at least one backend")
    backends = {name: _backend(s, corpus, cfg, out / name) for name, s in settings.items()}
    reports = compare_backends(
        _roman_source(cfg), backends, load_testset(corpus, corpus.languages, cfg), dominant=cfg["languages"]["dominant"]
    )
    for name, report in reports.items():
        report.metadata.update(_metadata(cfg, backends[name].kind.value))
        _write_report(report, out / f"backend-{name}")
    write_backend_comparison(out / "compare_backends.csv", reports)


def _eval_ablation(cfg: Mapping, out: Path, corpus: Corpus) -> None:
    ev = cfg["eval"]
    if not ev["holdouts"] or not ev["seen_subsets"]:
        raise ConfigError("ablation needs eval.holdouts and eval.seen_subsets")
    for subset in ev["seen_subsets"].values():
        unknown = sorted(set(subset) - set(corpus.languages))
        if unknown:
            raise UnknownLanguage(unknown[0])
    rows = subset_ablation(corpus, ev["holdouts"], ev["seen_subsets"], cfg, seed=cfg["seed"], out_dir=out)
    write_ablation(out / "ablation.csv", rows)


EVAL_HANDLERS: dict[str, Callable[[Mapping, Path, Corpus], None]] = {
    "cascaded": _eval_cascaded,
    "unified": _eval_unified,
    "reconstruction": _eval_reconstruction,
    "noise_sweep": _eval_noise_sweep,
    "zero_shot": _eval_zero_shot,
    "error_breakdown": _eval_error_breakdown,
    "compare_backends": _eval_compare_backends,
    "ablation": _eval_ablation,
}


def cmd_eval(cfg: Mapping, out: Path) -> None:
    mode = cfg["eval"]["mode"]
    _LOGGER.info("Evaluating in %s mode", mode)
    EVAL_HANDLERS[mode](cfg, out, _corpus(cfg))


COMMANDS: dict[str, Callable[[Mapping, Path], None]] = {
    "gen-corpus": cmd_gen_corpus,
    "train-romanizer": cmd_train_romanizer,
    "pretrain-lm": cmd_pretrain_lm,
    "train-bridge": cmd_train_bridge,
    "eval": cmd_eval,
}


def run(run_config: RunConfig) -> int:
    try:
        cfg = resolve_config(run_config.config, run_config.overrides, run_config.seed)
        write_resolved(cfg, run_config.out)
        COMMANDS[run_config.command](cfg, run_config.out)
    except CONFIG_ERRORS as err:
        _LOGGER.error("Configuration error: %s", err)
        return const.EXIT_CONFIG
    except DivergedLoss as err:
        _LOGGER.error("Training diverged: %s", err)
        return const.EXIT_DIVERGED
    except BackendUnavailable as err:
        _LOGGER.error("Backend unavailable: %s", err)
        return const.EXIT_BACKEND
    except ZeroAvsrError:
        _LOGGER.exception("%s failed", run_config.command)
        return 1
    return const.EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return run(RunConfig(args.command, args.config, args.seed, args.out, list(args.overrides)))
