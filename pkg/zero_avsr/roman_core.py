"""Text normalization, Roman tokenization and error-rate metrics.

Rules applied by normalize_text (version NORMALIZER_VERSION):
  1. NFC, lowercase, NFC again
  2. typographic apostrophes become "'"
  3. every other punctuation or symbol character becomes a space
  4. whitespace runs collapse to one space, ends are stripped
"""
from __future__ import annotations

import re
import unicodedata
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .const import BLANK_ID, ROMAN_TOKENS
from .exceptions import EmptyReference, UnknownToken


_APOSTROPHES = str.maketrans({"’": "'", "‘": "'", "ʼ": "'", "`": "'"})
_WHITESPACE_RE = re.compile(r"\s+")
# Languages whose capital I lowercases to dotless i.
_DOTLESS_I_LANGS = {"tur", "aze", "tr", "az"}


@dataclass(frozen=True)
class RomanAlphabet:
    """Output vocabulary of the romanizer. Id 0 is the CTC blank."""

    tokens: tuple[str, ...] = ROMAN_TOKENS
    blank_id: int = BLANK_ID
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.blank_id != 0:
            raise ValueError("blank must take id 0")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("alphabet tokens must be unique")
        object.__setattr__(
            self, "token_to_id", {tok: i + 1 for i, tok in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        """Number of output classes including the blank."""
        return len(self.tokens) + 1

    @property
    def space_id(self) -> int:
        return self.token_to_id[" "]

    def __contains__(self, char: object) -> bool:
        return char in self.token_to_id


@dataclass(frozen=True)
class TextPair:
    grapheme: str
    roman: str
    lang: str

    def __post_init__(self) -> None:
        if not self.lang:
            raise ValueError("TextPair needs a language code")
        object.__setattr__(self, "grapheme", unicodedata.normalize("NFC", self.grapheme))

    def to_dict(self) -> dict[str, str]:
        return {"grapheme": self.grapheme, "roman": self.roman, "lang": self.lang}

    @classmethod
    def from_dict(cls, data: dict) -> TextPair:
        return cls(grapheme=data["grapheme"], roman=data["roman"], lang=data["lang"])


def normalize_text(text: str, lang: str = "") -> str:
    if not text:
        return ""
    text = unicodedata.normalize("NFC", text)
    if lang in _DOTLESS_I_LANGS:
        text = text.replace("I", "ı").replace("İ", "i")
    text = unicodedata.normalize("NFC", text.lower()).translate(_APOSTROPHES)
    chars = []
    for char in text:
        category = unicodedata.category(char)
        if char != "'" and category[0] in ("P", "S"):
            chars.append(" ")
        else:
            chars.append(char)
    return _WHITESPACE_RE.sub(" ", "".join(chars)).strip()


def tokenize_roman(text: str, alphabet: RomanAlphabet) -> list[int]:
    ids = []
    for position, char in enumerate(text):
        try:
            ids.append(alphabet.token_to_id[char])
        except KeyError:
            raise UnknownToken(char, position) from None
    return ids


def detokenize_roman(ids: Iterable[int], alphabet: RomanAlphabet) -> str:
    """Inverse of tokenize_roman; blanks are dropped."""
    chars = []
    for position, idx in enumerate(ids):
        idx = int(idx)
        if idx == alphabet.blank_id:
            continue
        if not 1 <= idx <= len(alphabet.tokens):
            raise UnknownToken(str(idx), position)
        chars.append(alphabet.tokens[idx - 1])
    return "".join(chars)


def is_roman(text: str, alphabet: RomanAlphabet) -> bool:
    return all(char in alphabet for char in text)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(hyp) < len(ref):
        hyp, ref = ref, hyp
    previous = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        current = [i]
        for j, r in enumerate(ref, start=1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (h != r),
                )
            )
        previous = current
    return previous[-1]


def cer(hyp: str, ref: str) -> float:
    # Spaces count as reference characters.
    if not ref:
        raise EmptyReference("CER needs a non-empty reference")
    return edit_distance(hyp, ref) / len(ref)


def wer(hyp: str, ref: str) -> float:
    ref_words = ref.split()
    if not ref_words:
        raise EmptyReference("WER needs a non-empty reference")
    return edit_distance(hyp.split(), ref_words) / len(ref_words)
