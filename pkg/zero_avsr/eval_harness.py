"""Evaluation: cascaded and unified decoding, reports, noise sweeps and zero-shot protocols."""
from __future__ import annotations

import copy
import csv
import logging
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import const
from .av_frontend import NoiseBank, mix_noise_array
from .av_romanizer import RomanizerModel, ctc_greedy_decode, encode, forward_logits
from .exceptions import BackendError, ZeroAvsrError
from .llm_bridge import Bridge, DeromanizerBackend, ToyLM, deromanize, deromanize_many, make_backend
from .roman_core import TextPair, edit_distance, normalize_text
from .synth_corpus import Corpus, Utterance, derive_seed
from .trainer import run_bridge_training, run_lm_pretraining, run_romanizer_training

_LOGGER = logging.getLogger(__name__)

RomanizeFn = Callable[[Utterance], str]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class UttResult:
    id: str
    lang: str
    ref: str
    hyp: str | None
    score: float | None = None

    @property
    def failed(self) -> bool:
        return self.hyp is None


@dataclass
class LanguageRow:
    lang: str
    n_utts: int = 0
    n_failed: int = 0
    char_errors: int = 0
    char_total: int = 0
    word_errors: int = 0
    word_total: int = 0
    unseen: bool = False

    @property
    def cer(self) -> float:
        return self.char_errors / self.char_total if self.char_total else float("nan")

    @property
    def wer(self) -> float:
        return self.word_errors / self.word_total if self.word_total else float("nan")

    def add(self, hyp: str, ref: str) -> None:
        self.n_utts += 1
        self.char_errors += edit_distance(hyp, ref)
        self.char_total += len(ref)
        self.word_errors += edit_distance(hyp.split(), ref.split())
        self.word_total += len(ref.split())


@dataclass
class EvalReport:
    """Per-language error rates; aggregates are unweighted means over language rows."""

    rows: list[LanguageRow]
    metadata: dict = field(default_factory=dict)
    dominant: str | None = None

    def row(self, lang: str) -> LanguageRow:
        for row in self.rows:
            if row.lang == lang:
                return row
        raise KeyError(lang)

    def aggregate(self, exclude: Iterable[str] = (), only: Iterable[str] | None = None) -> tuple[float, float]:
        exclude = set(exclude)
        only = None if only is None else set(only)
        rows = [
            r
            for r in self.rows
            if r.lang not in exclude and (only is None or r.lang in only) and r.char_total
        ]
        if not rows:
            return float("nan"), float("nan")
        return (
            sum(r.cer for r in rows) / len(rows),
            sum(r.wer for r in rows) / len(rows),
        )

    def aggregates(self) -> dict[str, tuple[float, float]]:
        out = {"avg": self.aggregate()}
        if self.dominant and any(r.lang == self.dominant for r in self.rows):
            out[f"avg_wo_{self.dominant}"] = self.aggregate(exclude=[self.dominant])
        unseen = [r.lang for r in self.rows if r.unseen]
        if unseen:
            out["seen_avg"] = self.aggregate(exclude=unseen)
            out["unseen_avg"] = self.aggregate(only=unseen)
        return out

    @property
    def n_failed(self) -> int:
        return sum(r.n_failed for r in self.rows)

    def mark_unseen(self, langs: Iterable[str]) -> EvalReport:
        langs = set(langs)
        for row in self.rows:
            row.unseen = row.lang in langs
        return self

    def table(self) -> list[list]:
        body = [
            [r.lang + (" *" if r.unseen else ""), r.n_utts, r.n_failed, r.cer, r.wer] for r in self.rows
        ]
        body += [[name, "", "", cer, wer] for name, (cer, wer) in self.aggregates().items()]
        return body

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["lang", "unseen", "n_utts", "n_failed", "cer", "wer"])
            for r in self.rows:
                writer.writerow([r.lang, int(r.unseen), r.n_utts, r.n_failed, f"{r.cer:.6f}", f"{r.wer:.6f}"])
            for name, (cer, wer) in self.aggregates().items():
                writer.writerow([name, "", "", "", f"{cer:.6f}", f"{wer:.6f}"])

    def to_text(self) -> str:
        lines = [f"# {k}: {v}" for k, v in sorted(self.metadata.items())]
        lines.append(format_table(["lang", "n_utts", "failed", "CER", "WER"], self.table()))
        return "\n".join(lines)

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        self.to_csv(stem.with_suffix(".csv"))
        stem.with_suffix(".txt").write_text(self.to_text() + "\n", encoding="utf-8")


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(value) -> str:
        return f"{value:.4f}" if isinstance(value, float) else str(value)

    cells = [list(headers)] + [[cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def build_report(
    results: Iterable[UttResult],
    *,
    langs: Iterable[str] = (),
    dominant: str | None = None,
    metadata: Mapping | None = None,
) -> EvalReport:
    """Fold utterance results, sorted by id, into per-language rows."""
    rows = {lang: LanguageRow(lang) for lang in langs}
    scores = []
    for res in sorted(results, key=lambda r: r.id):
        row = rows.setdefault(res.lang, LanguageRow(res.lang))
        if res.failed:
            row.n_failed += 1
            continue
        row.add(normalize_text(res.hyp, res.lang), normalize_text(res.ref, res.lang))
        if res.score is not None:
            scores.append(res.score)
    meta = dict(metadata or {})
    if scores:
        meta["mean_log_score"] = float(np.mean(scores))
    report = EvalReport([rows[k] for k in sorted(rows)], meta, dominant)
    if report.n_failed:
        _LOGGER.warning("%d utterances failed and are excluded from the aggregates", report.n_failed)
    return report


# ---------------------------------------------------------------------------
# Decoding paths
# ---------------------------------------------------------------------------


def greedy_romanizer(romanizer: RomanizerModel, modality: str = "AV") -> RomanizeFn:
    def run(utt: Utterance) -> str:
        with torch.no_grad():
            return ctc_greedy_decode(forward_logits(romanizer, utt.audio_feats, utt.video_feats, modality), romanizer.alphabet)

    return run


def _roman_fn(romanizer: RomanizerModel | RomanizeFn, modality: str) -> RomanizeFn:
    if isinstance(romanizer, RomanizerModel):
        romanizer.eval()
        return greedy_romanizer(romanizer, modality)
    return romanizer


def evaluate_cascaded(
    romanizer: RomanizerModel | RomanizeFn,
    backend: DeromanizerBackend,
    testset: Sequence[Utterance],
    *,
    modality: str = "AV",
    reference: str = "grapheme",
    dominant: str | None = None,
    metadata: Mapping | None = None,
) -> EvalReport:
    """Greedy CTC roman -> backend de-romanization -> CER/WER per language.

    romanizer may be a callable standing in for the model (e.g. ground-truth
    roman injection). Backend failures are counted and left out of the scores.
    """
    romanize = _roman_fn(romanizer, modality)
    romans = {u.id: romanize(u) for u in testset}
    outputs = deromanize_many(backend, [(u.id, romans[u.id], u.lang) for u in testset])
    results = []
    for utt in testset:
        out = outputs[utt.id]
        ref = utt.pair.grapheme if reference == "grapheme" else utt.pair.roman
        results.append(UttResult(utt.id, utt.lang, ref, None if isinstance(out, BackendError) else out))
    meta = {"mode": "cascaded", "backend": backend.kind.value, "modality": modality, **(metadata or {})}
    return build_report(results, langs={u.lang for u in testset}, dominant=dominant, metadata=meta)


def evaluate_unified(
    romanizer: RomanizerModel,
    bridge: Bridge,
    testset: Sequence[Utterance],
    beam: int = const.BEAM_WIDTH,
    temperature: float = const.TEMPERATURE,
    *,
    modality: str = "AV",
    max_len: int = const.MAX_DECODE_LEN,
    dominant: str | None = None,
    metadata: Mapping | None = None,
) -> EvalReport:
    romanizer.eval()
    bridge.eval()
    results = []
    for utt in testset:
        try:
            with torch.no_grad():
                hidden = encode(romanizer, utt.audio_feats, utt.video_feats, modality)
            hyp, score = bridge.transcribe(hidden, utt.lang, beam, temperature, max_len)
        except (ZeroAvsrError, ValueError) as err:
            _LOGGER.warning("Decoding %s failed (%s), scored as empty", utt.id, err)
            hyp, score = "", None
        results.append(UttResult(utt.id, utt.lang, utt.pair.grapheme, hyp, score))
    meta = {"mode": "unified", "beam": beam, "temperature": temperature, "modality": modality, **(metadata or {})}
    return build_report(results, langs={u.lang for u in testset}, dominant=dominant, metadata=meta)


def reconstruction_test(
    pairs: Sequence[TextPair],
    romanizer_fn: Callable[[str, str], str],
    deromanizer_fn: Callable[[str, str], str],
    *,
    dominant: str | None = None,
    metadata: Mapping | None = None,
) -> EvalReport:
    """Romanize then de-romanize ground-truth text and score against the original."""
    results = []
    for i, pair in enumerate(pairs):
        try:
            hyp = deromanizer_fn(romanizer_fn(pair.grapheme, pair.lang), pair.lang)
        except BackendError as err:
            _LOGGER.warning("Reconstruction of pair %d failed: %s", i, err)
            hyp = None
        results.append(UttResult(f"{pair.lang}-{i:06d}", pair.lang, pair.grapheme, hyp))
    meta = {"mode": "reconstruction", **(metadata or {})}
    return build_report(results, langs={p.lang for p in pairs}, dominant=dominant, metadata=meta)


# ---------------------------------------------------------------------------
# Noise sweep
# ---------------------------------------------------------------------------

System = Callable[[Sequence[Utterance], str], EvalReport]


def cascaded_system(romanizer: RomanizerModel, backend: DeromanizerBackend) -> System:
    return lambda testset, modality: evaluate_cascaded(romanizer, backend, testset, modality=modality)


def unified_system(
    romanizer: RomanizerModel, bridge: Bridge, beam: int = const.BEAM_WIDTH, temperature: float = const.TEMPERATURE
) -> System:
    return lambda testset, modality: evaluate_unified(romanizer, bridge, testset, beam, temperature, modality=modality)


@dataclass
class SweepRow:
    snr_db: float
    modality: str
    cer: float
    wer: float


def add_noise(testset: Sequence[Utterance], bank: NoiseBank, snr_db: float, seed: int) -> list[Utterance]:
    """Audio features of every utterance mixed with bank noise; video untouched."""
    noisy = []
    for i, utt in enumerate(testset):
        rng = np.random.default_rng(derive_seed(seed, i))
        _, noise = bank.sample(utt.audio_feats.shape, rng)
        mixed = mix_noise_array(utt.audio_feats, noise, snr_db, rng)
        noisy.append(replace(utt, audio_feats=mixed.astype(np.float32)))
    return noisy


def noise_sweep(
    system: System,
    testset: Sequence[Utterance],
    noise_bank: NoiseBank,
    snr_list: Sequence[float] = const.SNR_LIST,
    modalities: Sequence[str] = const.MODALITIES,
    *,
    seed: int = 0,
) -> list[SweepRow]:
    """Aggregate error per (SNR, modality); every modality hears the same noise."""
    rows = []
    for snr in snr_list:
        noisy = add_noise(testset, noise_bank, snr, seed)
        for modality in modalities:
            cer, wer = system(noisy, modality).aggregate()
            rows.append(SweepRow(float(snr), modality, cer, wer))
            _LOGGER.info("SNR %+.0f dB %s: CER %.4f WER %.4f", snr, modality, cer, wer)
    return rows


def write_sweep(path: str | Path, rows: Sequence[SweepRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["snr_db", "modality", "cer", "wer"])
        for r in rows:
            writer.writerow([r.snr_db, r.modality, f"{r.cer:.6f}", f"{r.wer:.6f}"])
    path.with_suffix(".txt").write_text(
        format_table(["snr_db", "modality", "CER", "WER"], [[r.snr_db, r.modality, r.cer, r.wer] for r in rows]) + "\n",
        encoding="utf-8",
    )


# ---------------------------------------------------------------------------
# Error analysis and backend comparison
# ---------------------------------------------------------------------------

BREAKDOWN_KEYS = ("mis_romanization", "deromanization", "both", "none")


def error_breakdown(
    romanizer: RomanizerModel | RomanizeFn,
    backend: DeromanizerBackend,
    testset: Sequence[Utterance],
    *,
    modality: str = "AV",
) -> dict[str, int]:
    """Attribute each utterance's errors to romanization, de-romanization, both or neither."""
    romanize = _roman_fn(romanizer, modality)
    counts = Counter({key: 0 for key in BREAKDOWN_KEYS})
    for utt in testset:
        lang = utt.lang
        mis = normalize_text(romanize(utt), lang) != normalize_text(utt.pair.roman, lang)
        try:
            restored = deromanize(backend, utt.pair.roman, lang)
        except BackendError as err:
            _LOGGER.warning("Skipping %s in error breakdown: %s", utt.id, err)
            continue
        de = normalize_text(restored, lang) != normalize_text(utt.pair.grapheme, lang)
        counts["both" if mis and de else "mis_romanization" if mis else "deromanization" if de else "none"] += 1
    return dict(counts)


def compare_backends(
    romanizer: RomanizerModel | RomanizeFn,
    backends: Mapping[str, DeromanizerBackend],
    testset: Sequence[Utterance],
    *,
    dominant: str | None = None,
) -> dict[str, EvalReport]:
    return {
        name: evaluate_cascaded(romanizer, backend, testset, dominant=dominant, metadata={"backend_name": name})
        for name, backend in backends.items()
    }


def write_backend_comparison(path: str | Path, reports: Mapping[str, EvalReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["backend", "lang", "n_utts", "n_failed", "cer", "wer"])
        for name, report in reports.items():
            for r in report.rows:
                writer.writerow([name, r.lang, r.n_utts, r.n_failed, f"{r.cer:.6f}", f"{r.wer:.6f}"])
            cer, wer = report.aggregate()
            writer.writerow([name, "avg", "", "", f"{cer:.6f}", f"{wer:.6f}"])


# ---------------------------------------------------------------------------
# Zero-shot protocols
# ---------------------------------------------------------------------------


@dataclass
class ZeroShotResult:
    holdout: str
    seen: list[str]
    reports: dict[str, EvalReport]


def load_testset(corpus: Corpus, langs: Iterable[str], cfg: Mapping) -> list[Utterance]:
    limit = cfg.get("eval", {}).get("max_utts", 0)
    utts = []
    for lang in langs:
        lang_utts = corpus.utterances(cfg.get("eval", {}).get("split", "test"), [lang])
        utts += lang_utts[:limit] if limit else lang_utts
    return utts


def zero_shot_protocol(
    all_langs: Sequence[str],
    holdout: str,
    corpus: Corpus,
    config: Mapping,
    *,
    seed: int,
    out_dir: Path | None = None,
    lm: ToyLM | None = None,
    unified: bool = True,
) -> ZeroShotResult:
    """Train on speech of every language but holdout, evaluate on all, flag the holdout row.

    A pretrained LM may be passed in; it covers text of all languages and is
    copied before LoRA is attached.
    """
    if holdout not in all_langs:
        raise ValueError(f"holdout {holdout!r} is not one of {list(all_langs)}")
    seen = [lang for lang in all_langs if lang != holdout]
    sub = (lambda name: out_dir / name) if out_dir else (lambda name: None)
    eval_cfg = config.get("eval", {})
    dominant = config.get("languages", {}).get("dominant")
    meta = {"holdout": holdout, "seed": seed}
    testset = load_testset(corpus, all_langs, config)

    romanizer = run_romanizer_training(corpus, seen, config, sub("romanizer"), seed)
    reports = {}
    bridge = None
    if unified:
        lm = copy.deepcopy(lm) if lm is not None else run_lm_pretraining(corpus, config, sub("lm"), seed)
        bridge = run_bridge_training(romanizer, lm, corpus, seen, config, sub("bridge"), seed)
        reports["unified"] = evaluate_unified(
            romanizer,
            bridge,
            testset,
            eval_cfg.get("beam_width", const.BEAM_WIDTH),
            eval_cfg.get("temperature", const.TEMPERATURE),
            dominant=dominant,
            metadata=meta,
        )
    backend = make_backend(
        config.get("backend", {"kind": "lexicon-oracle"}),
        languages=corpus.languages,
        lm=bridge.lm if bridge is not None else None,
        cache_dir=out_dir,
    )
    reports["cascaded"] = evaluate_cascaded(romanizer, backend, testset, dominant=dominant, metadata=meta)
    for report in reports.values():
        report.mark_unseen([holdout])
        cer_seen, _ = report.aggregate(exclude=[holdout])
        _LOGGER.info(
            "Holdout %s %s: unseen CER %.4f, seen CER %.4f",
            holdout,
            report.metadata["mode"],
            report.row(holdout).cer,
            cer_seen,
        )
    return ZeroShotResult(holdout, seen, reports)


def run_zero_shot_matrix(
    all_langs: Sequence[str],
    holdouts: Sequence[str],
    corpus: Corpus,
    config: Mapping,
    *,
    seed: int,
    out_dir: Path | None = None,
    unified: bool = True,
) -> list[ZeroShotResult]:
    """One protocol run per holdout sharing a single pretrained LM."""
    lm = run_lm_pretraining(corpus, config, out_dir / "lm" if out_dir else None, seed) if unified else None
    return [
        zero_shot_protocol(
            all_langs,
            holdout,
            corpus,
            config,
            seed=seed,
            out_dir=out_dir / f"holdout-{holdout}" if out_dir else None,
            lm=lm,
            unified=unified,
        )
        for holdout in holdouts
    ]


def write_holdout_matrix(path: str | Path, results: Sequence[ZeroShotResult], mode: str) -> None:
    """Rows grouped by holdout language; the unseen column marks the held-out row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["holdout", "lang", "unseen", "n_utts", "cer", "wer"])
        for res in results:
            report = res.reports[mode]
            for r in report.rows:
                writer.writerow([res.holdout, r.lang, int(r.unseen), r.n_utts, f"{r.cer:.6f}", f"{r.wer:.6f}"])


@dataclass
class AblationRow:
    subset: str
    holdout: str
    n_seen: int
    cer: float
    wer: float


def subset_ablation(
    corpus: Corpus,
    holdouts: Sequence[str],
    seen_subsets: Mapping[str, Sequence[str]],
    config: Mapping,
    *,
    seed: int,
    out_dir: Path | None = None,
) -> list[AblationRow]:
    """Holdout CER of the cascaded path for romanizers trained on different seen-language subsets."""
    backend_cfg = config.get("backend", {"kind": "lexicon-oracle"})
    if backend_cfg.get("kind") == "toy-lm":
        backend_cfg = {"kind": "lexicon-oracle"}
    backend = make_backend(backend_cfg, languages=corpus.languages, cache_dir=out_dir)
    rows = []
    for name, subset in seen_subsets.items():
        for holdout in holdouts:
            if holdout in subset:
                _LOGGER.warning("Skipping holdout %s: it is part of subset %s", holdout, name)
                continue
            sub_dir = out_dir / f"{name}-{holdout}" if out_dir else None
            romanizer = run_romanizer_training(corpus, subset, config, sub_dir, seed)
            report = evaluate_cascaded(romanizer, backend, load_testset(corpus, [holdout], config))
            cer, wer = report.aggregate()
            rows.append(AblationRow(name, holdout, len(subset), cer, wer))
            _LOGGER.info("Subset %s (%d langs) -> %s CER %.4f", name, len(subset), holdout, cer)
    return rows


def write_ablation(path: str | Path, rows: Sequence[AblationRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subset", "holdout", "n_seen", "cer", "wer"])
        for r in rows:
            writer.writerow([r.subset, r.holdout, r.n_seen, f"{r.cer:.6f}", f"{r.wer:.6f}"])
