"""AV-Romanizer: audio/visual encoders, fusion, transformer and CTC head.

f_a = F_a(x_a), f_v = F_v(x_v), f_av = B((f_a ⊕ f_v) W), then a linear head
over the Roman alphabet plus blank. Training lives in trainer.py.
"""
from __future__ import annotations

import copy
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import const
from .exceptions import ConfigError, DimensionMismatch, TargetTooLong
from .roman_core import RomanAlphabet, detokenize_roman

_LOGGER = logging.getLogger(__name__)

# Finite stand-in for log(0) so that unreachable CTC states keep finite gradients.
LOG_ZERO = -1e30


@dataclass
class RomanizerConfig:
    d_model: int = const.D_MODEL
    n_layers: int = const.N_LAYERS
    n_heads: int = const.N_HEADS
    d_ffn: int = const.D_FFN
    d_audio_in: int = const.AUDIO_FEATURE_DIM
    d_video_in: int = const.SYNTH_VIDEO_DIM
    alphabet: RomanAlphabet = field(default_factory=RomanAlphabet)
    dropout: float = const.DROPOUT
    # "affine" for prototype feature vectors, "conv" for 88x88 mouth crops
    visual_frontend: str = "affine"
    use_positions: bool = True

    def __post_init__(self) -> None:
        dims = (self.d_model, self.n_heads, self.d_ffn, self.d_audio_in, self.d_video_in)
        if min(dims) <= 0 or self.n_layers < 0:
            raise ConfigError("romanizer dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.visual_frontend not in ("affine", "conv"):
            raise ConfigError(f"unknown visual frontend {self.visual_frontend!r}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["alphabet"] = list(self.alphabet.tokens)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> RomanizerConfig:
        data = dict(data)
        if "alphabet" in data:
            data["alphabet"] = RomanAlphabet(tuple(data["alphabet"]))
        return cls(**data)


@dataclass
class Posteriorgram:
    log_probs: torch.Tensor  # T x (|alphabet| + 1)

    def __len__(self) -> int:
        return self.log_probs.shape[0]

    def numpy(self) -> np.ndarray:
        return self.log_probs.detach().cpu().double().numpy()


class SinusoidalPositions(nn.Module):
    def __init__(self, d_model: int, max_len: int = const.MAX_POSITIONS) -> None:
        super().__init__()
        position = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(position * div)
        pe[:, 1::2] = torch.cos(position * div)[:, : d_model // 2]
        self.register_buffer("pe", pe, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[: x.shape[-2]].to(x.dtype)


class ConvVisualEncoder(nn.Module):
    """Per-frame strided conv stack for 88x88 mouth crops."""

    def __init__(self, d_model: int) -> None:
        super().__init__()
        self.frames = nn.Sequential(
            nn.Conv2d(1, 8, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
        )
        self.proj = nn.Linear(16 * 4 * 4, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-2]
        flat = x.reshape(-1, 1, *x.shape[-2:])
        return self.proj(self.frames(flat)).reshape(*lead, -1)


class RomanizerModel(nn.Module):
    def __init__(self, config: RomanizerConfig) -> None:
        super().__init__()
        self.config = config
        d = config.d_model
        self.audio_encoder = nn.Linear(config.d_audio_in, d)
        if config.visual_frontend == "conv":
            self.visual_encoder: nn.Module = ConvVisualEncoder(d)
        else:
            self.visual_encoder = nn.Linear(config.d_video_in, d)
        self.fusion = nn.Linear(2 * d, d, bias=False)
        self.dropout = nn.Dropout(config.dropout)
        self.positions = SinusoidalPositions(d) if config.use_positions else None
        if config.n_layers > 0:
            layer = nn.TransformerEncoderLayer(
                d_model=d,
                nhead=config.n_heads,
                dim_feedforward=config.d_ffn,
                dropout=config.dropout,
                batch_first=True,
            )
            self.backbone: nn.Module | None = nn.TransformerEncoder(
                layer, config.n_layers, enable_nested_tensor=False
            )
        else:
            self.backbone = None
        self.head = nn.Linear(d, config.alphabet.size)

    @property
    def alphabet(self) -> RomanAlphabet:
        return self.config.alphabet

    def encode(
        self,
        x_a: torch.Tensor,
        x_v: torch.Tensor,
        padding_mask: torch.Tensor | None = None,
        modality: str | Sequence[str] = "AV",
    ) -> torch.Tensor:
        """Hidden states before the head, (B, T, D) or (T, D).

        modality is one of A, V, AV for the whole batch, or one entry per row.
        """
        f_a = self.audio_encoder(x_a)
        f_v = self.visual_encoder(x_v)
        # a missing modality is zeroed after its encoder so no bias leaks in
        if isinstance(modality, str):
            if modality == "A":
                f_v = torch.zeros_like(f_v)
            elif modality == "V":
                f_a = torch.zeros_like(f_a)
            elif modality != "AV":
                raise ValueError(f"unknown modality {modality!r}")
        else:
            f_a, f_v = _mask_rows(f_a, f_v, modality)
        x = self.fusion(torch.cat([f_a, f_v], dim=-1))
        if self.positions is not None:
            x = self.positions(x)
        x = self.dropout(x)
        if self.backbone is not None:
            single = x.dim() == 2
            if single:
                x = x.unsqueeze(0)
                padding_mask = None if padding_mask is None else padding_mask.unsqueeze(0)
            x = self.backbone(x, src_key_padding_mask=padding_mask)
            if single:
                x = x.squeeze(0)
        return x

    def forward(
        self,
        x_a: torch.Tensor,
        x_v: torch.Tensor,
        padding_mask: torch.Tensor | None = None,
        modality: str | Sequence[str] = "AV",
    ) -> torch.Tensor:
        hidden = self.encode(x_a, x_v, padding_mask, modality)
        return F.log_softmax(self.head(hidden), dim=-1)


def _mask_rows(f_a: torch.Tensor, f_v: torch.Tensor, modalities: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    if f_a.dim() != 3 or len(modalities) != f_a.shape[0]:
        raise ValueError(f"{len(modalities)} modalities for a batch of shape {tuple(f_a.shape)}")
    unknown = set(modalities) - {"A", "V", "AV"}
    if unknown:
        raise ValueError(f"unknown modality {sorted(unknown)}")
    keep_a = torch.tensor([m != "V" for m in modalities], device=f_a.device).view(-1, 1, 1)
    keep_v = torch.tensor([m != "A" for m in modalities], device=f_v.device).view(-1, 1, 1)
    return torch.where(keep_a, f_a, torch.zeros_like(f_a)), torch.where(keep_v, f_v, torch.zeros_like(f_v))


def _as_tensor(x, like: nn.Module) -> torch.Tensor:
    if hasattr(x, "frames"):
        x = x.frames
    param = next(like.parameters())
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(
        device=param.device, dtype=param.dtype
    )


def _check_inputs(model: RomanizerModel, x_a: torch.Tensor, x_v: torch.Tensor) -> None:
    cfg = model.config
    if x_a.shape[0] != x_v.shape[0]:
        raise DimensionMismatch(f"audio has {x_a.shape[0]} frames, video has {x_v.shape[0]}")
    if x_a.dim() != 2 or x_a.shape[-1] != cfg.d_audio_in:
        raise DimensionMismatch(f"audio features must be T x {cfg.d_audio_in}, got {tuple(x_a.shape)}")
    if cfg.visual_frontend == "affine" and (x_v.dim() != 2 or x_v.shape[-1] != cfg.d_video_in):
        raise DimensionMismatch(f"video features must be T x {cfg.d_video_in}, got {tuple(x_v.shape)}")
    if cfg.visual_frontend == "conv" and x_v.dim() != 3:
        raise DimensionMismatch(f"video frames must be T x H x W, got {tuple(x_v.shape)}")


def encode(model: RomanizerModel, f_a, f_v, modality: str = "AV") -> torch.Tensor:
    x_a = _as_tensor(f_a, model)
    x_v = _as_tensor(f_v, model)
    _check_inputs(model, x_a, x_v)
    if x_a.shape[0] == 0:
        return x_a.new_zeros(0, model.config.d_model)
    return model.encode(x_a, x_v, modality=modality)


def forward_logits(model: RomanizerModel, f_a, f_v, modality: str = "AV") -> Posteriorgram:
    hidden = encode(model, f_a, f_v, modality)
    return Posteriorgram(F.log_softmax(model.head(hidden), dim=-1))


def required_frames(target: Sequence[int]) -> int:
    """Shortest alignment length: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(post: Posteriorgram | torch.Tensor, target: Sequence[int], blank: int = const.BLANK_ID) -> torch.Tensor:
    """Negative log-likelihood of target by the CTC forward recursion in log space."""
    log_probs = post.log_probs if isinstance(post, Posteriorgram) else post
    target = [int(t) for t in target]
    if blank in target:
        raise ValueError("target must not contain the blank")
    n_frames = log_probs.shape[0]
    if required_frames(target) > n_frames:
        raise TargetTooLong(
            f"target needs {required_frames(target)} frames, posteriorgram has {n_frames}"
        )
    if not target:
        return -log_probs[:, blank].sum()

    ext = [blank]
    for label in target:
        ext += [label, blank]
    n_states = len(ext)
    ext_t = torch.tensor(ext, device=log_probs.device)
    skip = torch.zeros(n_states, dtype=torch.bool, device=log_probs.device)
    for s in range(2, n_states):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    neg = log_probs.new_full((n_states,), LOG_ZERO)
    alpha = torch.cat([log_probs[0, ext_t[:2]], neg[2:]])
    for t in range(1, n_frames):
        stay = alpha
        step = torch.cat([neg[:1], alpha[:-1]])
        jump = torch.where(skip, torch.cat([neg[:2], alpha[:-2]]), neg)
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + log_probs[t, ext_t]
    return -torch.logsumexp(alpha[-2:], dim=0)


def batch_ctc_loss(
    log_probs: torch.Tensor,
    lengths: torch.Tensor,
    targets: Sequence[Sequence[int]],
    blank: int = const.BLANK_ID,
) -> torch.Tensor:
    """Per-utterance CTC losses for a padded (B, T, V) batch."""
    flat = torch.tensor([t for target in targets for t in target], dtype=torch.long)
    target_lengths = torch.tensor([len(t) for t in targets], dtype=torch.long)
    return F.ctc_loss(
        log_probs.transpose(0, 1),
        flat,
        lengths.cpu(),
        target_lengths,
        blank=blank,
        reduction="none",
        zero_infinity=False,
    )


def _grad_check_loss(model: RomanizerModel, batch) -> torch.Tensor:
    losses = [ctc_loss(forward_logits(model, f_a, f_v), target) for f_a, f_v, target in batch]
    return torch.stack(losses).mean()


def ctc_grad_check(
    model: RomanizerModel,
    batch: Sequence[tuple],
    epsilon: float = 1e-4,
    params: Sequence[str] | None = None,
) -> float:
    """Largest relative gap between autograd and central-difference gradients.

    Runs on a float64 copy in eval mode. The gap of each tensor is taken
    relative to the larger of its two gradient maxima.
    """
    twin = copy.deepcopy(model).double().eval()
    named = dict(twin.named_parameters())
    names = list(named) if params is None else list(params)
    if not names:
        return 0.0
    twin.zero_grad()
    _grad_check_loss(twin, batch).backward()
    worst = 0.0
    with torch.no_grad():
        for name in names:
            param = named[name]
            analytic = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
            numeric = torch.zeros_like(param)
            flat = param.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + epsilon
                plus = _grad_check_loss(twin, batch).item()
                flat[i] = original - epsilon
                minus = _grad_check_loss(twin, batch).item()
                flat[i] = original
                numeric.view(-1)[i] = (plus - minus) / (2 * epsilon)
            scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
            worst = max(worst, (analytic - numeric).abs().max().item() / scale)
    return worst


def ctc_greedy_decode(post: Posteriorgram | np.ndarray, alphabet: RomanAlphabet) -> str:
    log_probs = post.numpy() if isinstance(post, Posteriorgram) else np.asarray(post)
    if len(log_probs) == 0:
        return ""
    # np.argmax keeps the first maximum, so ties go to the lowest id
    best = np.argmax(log_probs, axis=-1)
    collapsed = [int(b) for i, b in enumerate(best) if i == 0 or b != best[i - 1]]
    return detokenize_roman([b for b in collapsed if b != alphabet.blank_id], alphabet)


def ctc_beam_decode(
    post: Posteriorgram | np.ndarray, width: int, alphabet: RomanAlphabet
) -> list[tuple[str, float]]:
    """Prefix beam search; returns (text, log-probability) best first."""
    if width < 1:
        raise ValueError("beam width must be at least 1")
    log_probs = post.numpy() if isinstance(post, Posteriorgram) else np.asarray(post, dtype=np.float64)
    blank = alphabet.blank_id
    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, -np.inf)}
    for frame in log_probs:
        grown: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, blank_part=-np.inf, label_part=-np.inf):
            entry = grown.setdefault(prefix, [-np.inf, -np.inf])
            entry[0] = np.logaddexp(entry[0], blank_part)
            entry[1] = np.logaddexp(entry[1], label_part)

        for prefix, (p_b, p_nb) in beams.items():
            total = np.logaddexp(p_b, p_nb)
            add(prefix, blank_part=total + frame[blank])
            for label in range(len(frame)):
                if label == blank:
                    continue
                p = frame[label]
                if prefix and prefix[-1] == label:
                    add(prefix, label_part=p_nb + p)
                    add(prefix + (label,), label_part=p_b + p)
                else:
                    add(prefix + (label,), label_part=total + p)
        ranked = sorted(grown.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {prefix: (p[0], p[1]) for prefix, p in ranked[:width]}
    results = [
        (detokenize_roman(prefix, alphabet), float(np.logaddexp(p_b, p_nb)))
        for prefix, (p_b, p_nb) in beams.items()
    ]
    return sorted(results, key=lambda item: -item[1])


def collate(
    utterances: Sequence,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pad utterances into (B, T, D) tensors plus lengths and a padding mask."""
    lengths = torch.tensor([u.n_frames for u in utterances], dtype=torch.long)
    t_max = int(lengths.max())
    x_a = torch.zeros(len(utterances), t_max, utterances[0].audio_feats.shape[-1], dtype=dtype)
    x_v = torch.zeros(len(utterances), t_max, *utterances[0].video_feats.shape[1:], dtype=dtype)
    for i, utt in enumerate(utterances):
        x_a[i, : utt.n_frames] = torch.as_tensor(utt.audio_feats, dtype=dtype)
        x_v[i, : utt.n_frames] = torch.as_tensor(utt.video_feats, dtype=dtype)
    mask = torch.arange(t_max)[None, :] >= lengths[:, None]
    return x_a, x_v, lengths, mask


def save_checkpoint(model: RomanizerModel, path: str | Path, **extra) -> None:
    """Config, alphabet and float32 parameters in one torch container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": const.CHECKPOINT_FORMAT_VERSION,
        "kind": "romanizer",
        "config": model.config.to_dict(),
        "alphabet": list(model.alphabet.tokens),
        "parameters": {k: v.detach().cpu().float().contiguous() for k, v in model.state_dict().items()},
        **extra,
    }
    torch.save(payload, path)
    _LOGGER.info("Saved romanizer checkpoint to %s", path)


def load_checkpoint(path: str | Path) -> tuple[RomanizerModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != const.CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    model = RomanizerModel(RomanizerConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["parameters"])
    model.eval()
    return model, payload
