"""Audio/visual front end: filterbanks, A/V sync, noise mixing, video augmentation."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import soundfile as sf
import torch
import torchaudio
from PIL import Image

from . import const
from .exceptions import (
    BadDimensions,
    DegenerateSignal,
    LengthMismatch,
    SampleRateMismatch,
    SilentNoise,
)

_LOGGER = logging.getLogger(__name__)


@dataclass
class AudioWave:
    samples: np.ndarray
    sample_rate: int = const.SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_rate: float = const.VIDEO_FPS

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames)
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature frames contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.frames)


_MEL = {}


def _mel_transform() -> torchaudio.transforms.MelSpectrogram:
    if "fbank" not in _MEL:
        win = const.SAMPLE_RATE * const.FBANK_WINDOW_MS // 1000
        hop = const.SAMPLE_RATE * const.FBANK_HOP_MS // 1000
        _MEL["fbank"] = torchaudio.transforms.MelSpectrogram(
            sample_rate=const.SAMPLE_RATE,
            n_fft=win,
            win_length=win,
            hop_length=hop,
            n_mels=const.FBANK_N_MELS,
            power=2.0,
            center=True,
            pad_mode="constant",
        ).to(torch.float64)
    return _MEL["fbank"]


def extract_audio_features(wave: AudioWave) -> FeatureSequence:
    """26 log-mel bands at 100 Hz, four frames stacked into one 25 Hz frame."""
    if wave.sample_rate != const.SAMPLE_RATE:
        raise SampleRateMismatch(f"expected {const.SAMPLE_RATE} Hz, got {wave.sample_rate}")
    samples = torch.from_numpy(wave.samples.astype(np.float64))
    with torch.no_grad():
        mel = _mel_transform()(samples)  # n_mels x frames
    logmel = torch.log(mel + const.FBANK_FLOOR).T.numpy()
    logmel = np.nan_to_num(logmel, nan=np.log(const.FBANK_FLOOR), posinf=np.finfo(np.float32).max)
    n = len(logmel) // const.FBANK_STACK
    stacked = logmel[: n * const.FBANK_STACK].reshape(n, const.AUDIO_FEATURE_DIM)
    return FeatureSequence(stacked.astype(np.float32), frame_rate=const.VIDEO_FPS)


def sync_lengths(
    f_a: FeatureSequence, f_v: FeatureSequence
) -> tuple[FeatureSequence, FeatureSequence]:
    if f_a.frame_rate != const.VIDEO_FPS or f_v.frame_rate != const.VIDEO_FPS:
        raise ValueError(f"both streams must run at {const.VIDEO_FPS} fps")
    t_a, t_v = len(f_a), len(f_v)
    if abs(t_a - t_v) > const.MAX_SYNC_DRIFT:
        raise LengthMismatch(t_a, t_v)
    t = min(t_a, t_v)
    return (
        FeatureSequence(f_a.frames[:t], f_a.frame_rate),
        FeatureSequence(f_v.frames[:t], f_v.frame_rate),
    )


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def mix_noise_array(
    clean: np.ndarray, noise: np.ndarray, snr_db: float, rng: np.random.Generator
) -> np.ndarray:
    """Add noise to clean at snr_db; both arrays run along axis 0.

    The noise is tiled to cover the clean signal and cropped at a random
    offset before scaling.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[1:] != clean.shape[1:]:
        raise ValueError(f"noise shape {noise.shape} does not fit clean shape {clean.shape}")
    p_clean = _power(clean)
    if p_clean == 0.0:
        raise DegenerateSignal("clean signal has zero power, SNR is undefined")
    if len(noise) == 0 or _power(noise) == 0.0:
        raise SilentNoise("noise signal has zero power")
    n = len(clean)
    reps = -(-(n + len(noise)) // len(noise))
    tiled = np.concatenate([noise] * reps)
    offset = int(rng.integers(len(noise)))
    segment = tiled[offset : offset + n]
    p_noise = _power(segment)
    if p_noise == 0.0:
        raise SilentNoise("selected noise segment has zero power")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + scale * segment


def mix_noise(clean: AudioWave, noise: AudioWave, snr_db: float, seed: int) -> AudioWave:
    if clean.sample_rate != noise.sample_rate:
        raise SampleRateMismatch(
            f"clean at {clean.sample_rate} Hz, noise at {noise.sample_rate} Hz"
        )
    mixed = mix_noise_array(clean.samples, noise.samples, snr_db, np.random.default_rng(seed))
    return AudioWave(mixed, clean.sample_rate)


class NoiseKind(str, Enum):
    WHITE = "white"
    PINK = "pink"
    BABBLE = "babble"


def pink_noise(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Noise with a 1/f power spectrum along axis 0."""
    n = shape[0]
    white = rng.standard_normal(tuple(shape))
    spectrum = np.fft.rfft(white, axis=0)
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1] if n > 1 else 1.0
    gain = 1.0 / np.sqrt(freqs)
    spectrum *= gain.reshape((-1,) + (1,) * (len(shape) - 1))
    pink = np.fft.irfft(spectrum, n=n, axis=0)
    return pink / (pink.std() or 1.0)


class NoiseBank:
    """Synthetic stand-ins for a noise corpus; kinds are drawn uniformly.

    Babble mixes three competing sources, so babble needs at least one
    source array with the same trailing shape as the signal.
    """

    def __init__(
        self,
        kinds: Sequence[NoiseKind | str] = tuple(NoiseKind),
        babble_sources: Sequence[np.ndarray] = (),
        n_talkers: int = 3,
    ) -> None:
        self.kinds = [NoiseKind(k) for k in kinds]
        self.babble_sources = [np.asarray(s, dtype=np.float64) for s in babble_sources]
        self.n_talkers = n_talkers
        if NoiseKind.BABBLE in self.kinds and not self.babble_sources:
            _LOGGER.warning("No babble sources given, babble noise disabled")
            self.kinds.remove(NoiseKind.BABBLE)
        if not self.kinds:
            raise ValueError("noise bank has no usable noise kinds")

    def make(self, kind: NoiseKind, shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        if kind is NoiseKind.WHITE:
            return rng.standard_normal(tuple(shape))
        if kind is NoiseKind.PINK:
            return pink_noise(shape, rng)
        n = shape[0]
        babble = np.zeros(tuple(shape))
        for _ in range(self.n_talkers):
            source = self.babble_sources[int(rng.integers(len(self.babble_sources)))]
            source = source - source.mean(axis=0)
            reps = -(-(n + len(source)) // len(source))
            offset = int(rng.integers(len(source)))
            babble += np.concatenate([source] * reps)[offset : offset + n]
        return babble

    def sample(self, shape: Sequence[int], rng: np.random.Generator) -> tuple[NoiseKind, np.ndarray]:
        kind = self.kinds[int(rng.integers(len(self.kinds)))]
        return kind, self.make(kind, shape, rng)


def augment_video(frames: np.ndarray, train_mode: bool, seed: int) -> np.ndarray:
    """Crop T×96×96 mouth frames to T×88×88.

    Training uses one random crop and one flip decision for the whole
    utterance; evaluation uses the centre crop.
    """
    frames = np.asarray(frames, dtype=np.float32)
    size = const.MOUTH_CROP_SIZE
    crop = const.VIDEO_CROP_SIZE
    if frames.ndim != 3 or frames.shape[1:] != (size, size):
        raise BadDimensions(f"expected T x {size} x {size} frames, got {frames.shape}")
    if train_mode:
        rng = np.random.default_rng(seed)
        top = int(rng.integers(size - crop + 1))
        left = int(rng.integers(size - crop + 1))
        flip = bool(rng.random() < const.FLIP_PROBABILITY)
    else:
        top = left = (size - crop) // 2
        flip = False
    out = np.empty((len(frames), crop, crop), dtype=np.float32)
    for t, frame in enumerate(frames):
        image = Image.fromarray(frame).crop((left, top, left + crop, top + crop))
        if flip:
            image = image.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
        out[t] = np.asarray(image, dtype=np.float32)
    return out


def load_mouth_crops(directory: str | Path) -> np.ndarray:
    """Read precomputed grayscale mouth crops (one PNG per frame, sorted by name)."""
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = []
    for path in paths:
        with Image.open(path) as image:
            frames.append(np.asarray(image.convert("L"), dtype=np.float32) / 255.0)
    return np.stack(frames)


def load_wav(path: str | Path) -> AudioWave:
    """Read a mono 16-bit PCM WAV file."""
    info = sf.info(str(path))
    if info.channels != 1:
        raise ValueError(f"{path}: expected mono audio, got {info.channels} channels")
    if info.subtype != "PCM_16":
        _LOGGER.warning("%s is %s, expected PCM_16", path, info.subtype)
    samples, rate = sf.read(str(path), dtype="float64")
    return AudioWave(samples, rate)
