"""Toy languages, synthetic audio-visual utterances and corpus manifests.

Every toy language draws its romanizations from the same Roman alphabet and
every Roman character has one audio/visual prototype shared by all languages.
Grapheme inventories come from disjoint Unicode blocks, so a language never
seen in romanizer training still uses only phones the romanizer knows.
"""
from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from tqdm import tqdm

from . import const
from .exceptions import AmbiguousWord, ConfigError, InfeasibleMapping, UnknownGrapheme
from .roman_core import RomanAlphabet, TextPair

_LOGGER = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@lru_cache(maxsize=8)
def _prototype_table(
    tokens: tuple[str, ...], d_audio: int, d_video: int
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(const.PROTOTYPE_SEED)
    visemes = rng.standard_normal((const.N_VISEMES, d_video))
    table = {}
    for i, token in enumerate(tokens):
        audio = rng.standard_normal(d_audio)
        video = visemes[i % const.N_VISEMES] + const.VISEME_OFFSET_SCALE * rng.standard_normal(d_video)
        if token == " ":
            # pauses: silent audio, closed mouth
            audio = np.zeros(d_audio)
            video = np.zeros(d_video)
        audio.setflags(write=False)
        video.setflags(write=False)
        table[token] = (audio, video)
    return table


def phone_prototypes(
    alphabet: RomanAlphabet,
    d_audio: int = const.AUDIO_FEATURE_DIM,
    d_video: int = const.SYNTH_VIDEO_DIM,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Audio and visual prototype per Roman token; depends on the alphabet only."""
    return dict(_prototype_table(tuple(alphabet.tokens), d_audio, d_video))


@dataclass(eq=False)
class ToyLanguage:
    lang: str
    graphemes: list[str]
    g2r: dict[str, str]
    phone_prototypes: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)
    lexicon: list[str]
    name: str = ""
    family: str = const.DEFAULT_FAMILY
    seed: int = 0

    def __post_init__(self) -> None:
        self.name = self.name or self.lang
        missing = {c for r in self.g2r.values() for c in r} - set(self.phone_prototypes)
        if missing:
            raise ValueError(f"roman characters without prototypes: {sorted(missing)}")
        self._reverse: dict[str, str] | None = None

    @property
    def d_audio(self) -> int:
        return len(next(iter(self.phone_prototypes.values()))[0])

    @property
    def d_video(self) -> int:
        return len(next(iter(self.phone_prototypes.values()))[1])

    def reverse_lexicon(self) -> dict[str, str]:
        if self._reverse is None:
            reverse: dict[str, str] = {}
            for word in self.lexicon:
                roman = romanize(word, self)
                if roman in reverse and reverse[roman] != word:
                    raise AmbiguousWord(
                        f"{self.lang}: {reverse[roman]!r} and {word!r} both romanize to {roman!r}"
                    )
                reverse[roman] = word
            self._reverse = reverse
        return self._reverse

    def to_dict(self) -> dict:
        return {
            "lang": self.lang,
            "name": self.name,
            "family": self.family,
            "seed": self.seed,
            "graphemes": self.graphemes,
            "g2r": self.g2r,
            "lexicon": self.lexicon,
            "d_audio": self.d_audio,
            "d_video": self.d_video,
        }

    @classmethod
    def from_dict(cls, data: dict, alphabet: RomanAlphabet | None = None) -> ToyLanguage:
        alphabet = alphabet or RomanAlphabet()
        return cls(
            lang=data["lang"],
            name=data.get("name", ""),
            family=data.get("family", const.DEFAULT_FAMILY),
            seed=data.get("seed", 0),
            graphemes=list(data["graphemes"]),
            g2r=dict(data["g2r"]),
            lexicon=list(data["lexicon"]),
            phone_prototypes=phone_prototypes(alphabet, data["d_audio"], data["d_video"]),
        )


@dataclass
class Utterance:
    audio_feats: np.ndarray
    video_feats: np.ndarray
    pair: TextPair
    lang: str
    id: str = ""

    def __post_init__(self) -> None:
        if len(self.audio_feats) != len(self.video_feats):
            raise ValueError(
                f"audio/video frame counts differ: {len(self.audio_feats)} vs {len(self.video_feats)}"
            )
        if len(self.audio_feats) < 1:
            raise ValueError("utterance needs at least one frame")

    @property
    def n_frames(self) -> int:
        return len(self.audio_feats)


@dataclass
class ManifestEntry:
    id: str
    lang: str
    confidence: float
    grapheme: str
    roman: str
    n_frames: int
    feature_ref: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"{self.id}: confidence {self.confidence} outside [0, 1]")
        if self.n_frames < 1:
            raise ValueError(f"{self.id}: n_frames must be positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "lang": self.lang,
                "confidence": self.confidence,
                "grapheme": self.grapheme,
                "roman": self.roman,
                "n_frames": self.n_frames,
                "feature_ref": self.feature_ref,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> ManifestEntry:
        data = json.loads(line)
        return cls(**{key: data[key] for key in cls.__dataclass_fields__})

    @property
    def pair(self) -> TextPair:
        return TextPair(grapheme=self.grapheme, roman=self.roman, lang=self.lang)


def _unit_pool(alphabet: RomanAlphabet, family: str, max_len: int) -> dict[int, list[str]]:
    consonants = [c for c in const.FAMILY_CONSONANTS.get(family, const.CONSONANTS) if c in alphabet]
    vowels = [v for v in const.VOWELS if v in alphabet]
    pool = {1: vowels + consonants}
    if max_len >= 2:
        pool[2] = [c + v for c in consonants for v in vowels]
    if max_len >= 3:
        pool[3] = [c + v + d for c in consonants for v in vowels for d in consonants]
    return pool


def _has_double(roman: str) -> bool:
    return any(a == b for a, b in zip(roman, roman[1:]))


def gen_language(
    seed: int,
    n_graphemes: int,
    shared_phone_set: RomanAlphabet,
    *,
    lang: str | None = None,
    family: str = const.DEFAULT_FAMILY,
    script: int | None = None,
    lexicon_size: int = const.DEFAULT_LEXICON_SIZE,
    max_roman_len: int = const.MAX_ROMAN_UNIT,
    d_audio: int = const.AUDIO_FEATURE_DIM,
    d_video: int = const.SYNTH_VIDEO_DIM,
) -> ToyLanguage:
    if n_graphemes < 2:
        raise ConfigError("a language needs at least two graphemes")
    rng = np.random.default_rng(seed)
    script_name, block_start, block_size = const.SCRIPT_BLOCKS[
        (seed if script is None else script) % len(const.SCRIPT_BLOCKS)
    ]
    if n_graphemes > block_size:
        raise ConfigError(f"{script_name} block holds only {block_size} graphemes")
    offsets = sorted(rng.choice(block_size, size=n_graphemes, replace=False).tolist())
    graphemes = [chr(block_start + o) for o in offsets]

    pool = _unit_pool(shared_phone_set, family, max_roman_len)
    lengths = sorted(pool)
    weights = np.array([{1: 0.3, 2: 0.5, 3: 0.2}[n] for n in lengths])
    weights /= weights.sum()
    g2r: dict[str, str] = {}
    used: set[str] = set()
    for grapheme in graphemes:
        for _ in range(const.LEXICON_RETRIES):
            units = pool[int(rng.choice(lengths, p=weights))]
            unit = units[int(rng.integers(len(units)))]
            if unit not in used:
                break
        else:
            raise InfeasibleMapping(f"could not find a free romanization for {grapheme!r}")
        used.add(unit)
        g2r[grapheme] = unit

    # Words whose romanization repeats a letter back-to-back are skipped: the
    # synthetic speech has no boundary between two identical phones.
    lexicon: list[str] = []
    romans: set[str] = set()
    for _ in range(lexicon_size * const.LEXICON_RETRIES):
        if len(lexicon) == lexicon_size:
            break
        n = int(rng.integers(const.MIN_WORD_GRAPHEMES, const.MAX_WORD_GRAPHEMES + 1))
        word = "".join(graphemes[int(i)] for i in rng.integers(n_graphemes, size=n))
        roman = "".join(g2r[g] for g in word)
        if roman in romans or _has_double(roman):
            continue
        romans.add(roman)
        lexicon.append(word)
    else:
        if len(lexicon) < lexicon_size:
            raise InfeasibleMapping(
                f"built {len(lexicon)} of {lexicon_size} unambiguous words for seed {seed}"
            )

    code = lang or f"x{script_name[:2]}{seed % 100:02d}"
    _LOGGER.debug("Generated %s (%s): %d graphemes, %d words", code, script_name, n_graphemes, len(lexicon))
    return ToyLanguage(
        lang=code,
        name=f"Toy {script_name.title()} {seed}",
        family=family,
        seed=seed,
        graphemes=graphemes,
        g2r=g2r,
        phone_prototypes=phone_prototypes(shared_phone_set, d_audio, d_video),
        lexicon=lexicon,
    )


def romanize(grapheme: str, lang: ToyLanguage) -> str:
    out = []
    for position, symbol in enumerate(grapheme):
        if symbol == " ":
            out.append(" ")
            continue
        try:
            out.append(lang.g2r[symbol])
        except KeyError:
            raise UnknownGrapheme(symbol, position) from None
    return "".join(out)


def deromanize_oracle(roman: str, lang: ToyLanguage) -> str:
    """Lexicon lookup per word; unknown words pass through unchanged."""
    reverse = lang.reverse_lexicon()
    return " ".join(reverse.get(word, word) for word in roman.split())


def sample_sentence(lang: ToyLanguage, n_words: int, rng: np.random.Generator) -> str:
    return " ".join(lang.lexicon[int(i)] for i in rng.integers(len(lang.lexicon), size=n_words))


def gen_utterance(
    lang: ToyLanguage,
    n_words: int,
    noise_sigma: float,
    seed: int,
    *,
    utt_id: str = "",
) -> Utterance:
    if n_words < 1:
        raise ValueError("an utterance needs at least one word")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    grapheme = sample_sentence(lang, n_words, rng)
    roman = romanize(grapheme, lang)
    audio_rows, video_rows = [], []
    for char in roman:
        audio_proto, video_proto = lang.phone_prototypes[char]
        duration = int(rng.integers(const.MIN_CHAR_FRAMES, const.MAX_CHAR_FRAMES + 1))
        audio_rows.append(np.repeat(audio_proto[None, :], duration, axis=0))
        video_rows.append(np.repeat(video_proto[None, :], duration, axis=0))
    audio = np.concatenate(audio_rows)
    video = np.concatenate(video_rows)
    if noise_sigma > 0:
        audio = audio + noise_sigma * rng.standard_normal(audio.shape)
        video = video + noise_sigma * rng.standard_normal(video.shape)
    return Utterance(
        audio_feats=audio.astype(np.float32),
        video_feats=video.astype(np.float32),
        pair=TextPair(grapheme=grapheme, roman=roman, lang=lang.lang),
        lang=lang.lang,
        id=utt_id,
    )


def simulate_lid_confidence(rng: np.random.Generator, scale: float = 0.02) -> float:
    """Language-ID score of a synthetic utterance; most land above 0.95."""
    return float(np.clip(1.0 - rng.exponential(scale), 0.0, 1.0))


def build_manifest(entries: Iterable[ManifestEntry], threshold: float) -> list[ManifestEntry]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    entries = list(entries)
    kept = [entry for entry in entries if entry.confidence >= threshold]
    if len(kept) < len(entries):
        _LOGGER.warning(
            "Dropped %d of %d entries below language-ID confidence %.2f",
            len(entries) - len(kept),
            len(entries),
            threshold,
        )
    return kept


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for entry in entries:
            f.write(entry.to_json() + "\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    with Path(path).open(encoding="utf-8") as f:
        return [ManifestEntry.from_json(line) for line in f if line.strip()]


def write_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array(frames.shape, dtype=const.FEATURE_HEADER_DTYPE)
    with path.open("wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(frames, dtype=const.FEATURE_DTYPE).tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    t, d = np.frombuffer(raw[:8], dtype=const.FEATURE_HEADER_DTYPE)
    body = np.frombuffer(raw[8:], dtype=const.FEATURE_DTYPE)
    if body.size != int(t) * int(d):
        raise ValueError(f"{path}: header says {t}x{d}, body holds {body.size} values")
    return body.reshape(int(t), int(d)).astype(np.float32)


def save_utterance(root: str | Path, utt: Utterance, confidence: float = 1.0) -> ManifestEntry:
    ref = f"feats/{utt.lang}/{utt.id}"
    write_features(Path(root) / (ref + const.AUDIO_SUFFIX), utt.audio_feats)
    write_features(Path(root) / (ref + const.VIDEO_SUFFIX), utt.video_feats)
    return ManifestEntry(
        id=utt.id,
        lang=utt.lang,
        confidence=confidence,
        grapheme=utt.pair.grapheme,
        roman=utt.pair.roman,
        n_frames=utt.n_frames,
        feature_ref=ref,
    )


def load_utterance(root: str | Path, entry: ManifestEntry) -> Utterance:
    base = Path(root) / entry.feature_ref
    return Utterance(
        audio_feats=read_features(str(base) + const.AUDIO_SUFFIX),
        video_feats=read_features(str(base) + const.VIDEO_SUFFIX),
        pair=entry.pair,
        lang=entry.lang,
        id=entry.id,
    )


@dataclass
class Corpus:
    """A generated corpus on disk: languages, per-language split manifests and text."""

    root: Path
    languages: dict[str, ToyLanguage]
    manifests: dict[str, dict[str, list[ManifestEntry]]]
    text: dict[str, list[TextPair]]

    def entries(self, split: str, langs: Iterable[str] | None = None) -> list[ManifestEntry]:
        langs = list(self.languages) if langs is None else list(langs)
        return [e for lang in langs for e in self.manifests.get(lang, {}).get(split, [])]

    def utterances(self, split: str, langs: Iterable[str] | None = None) -> list[Utterance]:
        return [load_utterance(self.root, e) for e in self.entries(split, langs)]

    def text_pairs(self, split: str = "train", langs: Iterable[str] | None = None) -> list[TextPair]:
        langs = list(self.languages) if langs is None else list(langs)
        return [p for lang in langs for p in self.text.get(f"{lang}:{split}", [])]

    def language_names(self) -> dict[str, str]:
        return {code: lang.name for code, lang in self.languages.items()}

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = [lang.to_dict() for lang in self.languages.values()]
        (self.root / const.LANGUAGES_FILENAME).write_text(
            json.dumps(payload, ensure_ascii=False, indent=1), encoding="utf-8"
        )
        for lang, splits in self.manifests.items():
            for split, entries in splits.items():
                write_manifest(self.root / "manifests" / f"{lang}.{split}.jsonl", entries)
        for key, pairs in self.text.items():
            lang, split = key.split(":")
            write_text_pairs(self.root / "text" / f"{lang}.{split}.jsonl", pairs)

    @classmethod
    def load(cls, root: str | Path, alphabet: RomanAlphabet | None = None) -> Corpus:
        root = Path(root)
        data = json.loads((root / const.LANGUAGES_FILENAME).read_text(encoding="utf-8"))
        languages = {d["lang"]: ToyLanguage.from_dict(d, alphabet) for d in data}
        manifests: dict[str, dict[str, list[ManifestEntry]]] = {}
        for path in sorted((root / "manifests").glob("*.jsonl")):
            lang, split = path.name[: -len(".jsonl")].split(".", 1)
            manifests.setdefault(lang, {})[split] = read_manifest(path)
        text = {}
        for path in sorted((root / "text").glob("*.jsonl")):
            lang, split = path.name[: -len(".jsonl")].split(".", 1)
            text[f"{lang}:{split}"] = read_text_pairs(path)
        return cls(root=root, languages=languages, manifests=manifests, text=text)


def write_text_pairs(path: str | Path, pairs: Iterable[TextPair]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_dict(), ensure_ascii=False) + "\n")


def read_text_pairs(path: str | Path) -> list[TextPair]:
    with Path(path).open(encoding="utf-8") as f:
        return [TextPair.from_dict(json.loads(line)) for line in f if line.strip()]


def generate_corpus(
    root: str | Path,
    languages: Sequence[ToyLanguage],
    *,
    seed: int,
    utts_per_split: dict[str, int],
    text_per_split: dict[str, int],
    max_words: int = 4,
    noise_sigma: float = 0.5,
    threshold: float = const.DEFAULT_LID_THRESHOLD,
    lid_scale: float = 0.02,
    progress: bool = False,
) -> Corpus:
    """Write features, manifests and text pairs for every language and split."""
    root = Path(root)
    manifests: dict[str, dict[str, list[ManifestEntry]]] = {}
    text: dict[str, list[TextPair]] = {}
    for li, lang in enumerate(languages):
        manifests[lang.lang] = {}
        for si, split in enumerate(SPLITS):
            entries = []
            count = utts_per_split.get(split, 0)
            for i in tqdm(range(count), desc=f"{lang.lang}/{split}", disable=not progress):
                utt_seed = derive_seed(seed, li, si, i)
                rng = np.random.default_rng(utt_seed)
                utt = gen_utterance(
                    lang,
                    n_words=int(rng.integers(1, max_words + 1)),
                    noise_sigma=noise_sigma,
                    seed=utt_seed,
                    utt_id=f"{lang.lang}-{split}-{i:05d}",
                )
                entries.append(save_utterance(root, utt, simulate_lid_confidence(rng, lid_scale)))
            manifests[lang.lang][split] = build_manifest(entries, threshold)
        for si, split in enumerate(("train", "test")):
            rng = np.random.default_rng(derive_seed(seed, li, 100 + si))
            pairs = []
            for _ in range(text_per_split.get(split, 0)):
                grapheme = sample_sentence(lang, int(rng.integers(1, max_words + 1)), rng)
                pairs.append(TextPair(grapheme=grapheme, roman=romanize(grapheme, lang), lang=lang.lang))
            text[f"{lang.lang}:{split}"] = pairs
    corpus = Corpus(root=root, languages={l.lang: l for l in languages}, manifests=manifests, text=text)
    corpus.save()
    _LOGGER.info("Wrote corpus for %d languages to %s", len(languages), root)
    return corpus
