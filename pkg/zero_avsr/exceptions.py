"""Errors raised across the Zero-AVSR pipeline.

The CLI turns these into exit codes, so every failure a command can hit is a
subclass of ZeroAvsrError.
"""
from __future__ import annotations


class ZeroAvsrError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ZeroAvsrError, ValueError):
    """Config file or override could not be resolved."""


class UnknownToken(ZeroAvsrError, ValueError):
    def __init__(self, char: str, position: int) -> None:
        super().__init__(f"character {char!r} at position {position} is not in the alphabet")
        self.char = char
        self.position = position


class EmptyReference(ZeroAvsrError, ValueError):
    """Error rate requested against an empty reference."""


class InfeasibleMapping(ZeroAvsrError, RuntimeError):
    """No unambiguous lexicon could be built within the retry budget."""


class UnknownGrapheme(ZeroAvsrError, ValueError):
    def __init__(self, symbol: str, position: int) -> None:
        super().__init__(f"grapheme {symbol!r} at position {position} is not in the language")
        self.symbol = symbol
        self.position = position


class AmbiguousWord(ZeroAvsrError, RuntimeError):
    """Two lexicon words share a romanization."""


class SampleRateMismatch(ZeroAvsrError, ValueError):
    """Audio is not at the expected sample rate."""


class LengthMismatch(ZeroAvsrError, ValueError):
    def __init__(self, t_a: int, t_v: int) -> None:
        super().__init__(f"audio has {t_a} frames, video has {t_v}")
        self.t_a = t_a
        self.t_v = t_v


class SilentNoise(ZeroAvsrError, ValueError):
    """Noise signal has zero power."""


class DegenerateSignal(ZeroAvsrError, ValueError):
    """Clean signal has zero power, so SNR is undefined."""


class BadDimensions(ZeroAvsrError, ValueError):
    """Video frames are not 96x96."""


class DimensionMismatch(ZeroAvsrError, ValueError):
    """Feature widths or lengths do not match the model."""


class TargetTooLong(ZeroAvsrError, ValueError):
    """No CTC alignment of the target fits in the available frames."""


class DivergedLoss(ZeroAvsrError, RuntimeError):
    """Training loss became NaN or infinite."""


class FrozenTensorChanged(ZeroAvsrError, RuntimeError):
    """A tensor that must stay frozen changed during an optimizer step."""


class SequenceTooShort(ZeroAvsrError, ValueError):
    """Sequence too short for the length compressor."""


class ShapeMismatch(ZeroAvsrError, ValueError):
    """LoRA factors do not fit the base weight or input."""


class WidthMismatch(ZeroAvsrError, ValueError):
    """Speech embeddings do not match the LM embedding width."""


class EmptyTarget(ZeroAvsrError, ValueError):
    """LM loss requested with no target tokens."""


class UnknownLanguage(ZeroAvsrError, KeyError):
    def __init__(self, lang: str) -> None:
        super().__init__(lang)
        self.lang = lang

    def __str__(self) -> str:
        return f"language {self.lang!r} is not registered"


class SeenLanguageViolation(ZeroAvsrError, ValueError):
    """Speech from a language outside the seen set reached Task 1."""


class MissingLanguage(ZeroAvsrError, ValueError):
    """A registered language has no text in the corpus."""


class BackendError(ZeroAvsrError):
    """Base for de-romanizer backend failures."""


class BackendTimeout(BackendError, TimeoutError):
    """Remote backend did not answer within the retry budget."""


class BackendRefusal(BackendError):
    """Remote backend answered without a parsable transcription."""


class BackendUnavailable(BackendError, ConnectionError):
    """Remote backend is unreachable and nothing is cached."""
