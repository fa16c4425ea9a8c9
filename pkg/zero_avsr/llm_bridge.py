"""Everything between the romanizer and graphemes.

Cascaded path: an instruction prompt plus pluggable de-romanizer backends.
Unified path: length compressor, adapter and LoRA around a small character
level decoder-only LM that stands in for a pre-trained LLM.
"""
from __future__ import annotations

import logging
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import const
from .exceptions import (
    BackendError,
    BackendRefusal,
    ConfigError,
    EmptyTarget,
    SequenceTooShort,
    ShapeMismatch,
    UnknownLanguage,
    UnknownToken,
    WidthMismatch,
)
from .remote import RemoteChatClient
from .roman_core import RomanAlphabet
from .synth_corpus import ToyLanguage, deromanize_oracle

_LOGGER = logging.getLogger(__name__)

IGNORE_INDEX = -100


# ---------------------------------------------------------------------------
# Vocabulary and toy LM
# ---------------------------------------------------------------------------


def lang_tag(lang: str) -> str:
    return const.LANG_TAG.format(lang=lang)


@dataclass(frozen=True)
class ToyVocab:
    """Character-level joint vocabulary: control tokens, language tags, Roman, graphemes."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        missing = [tok for tok in const.CONTROL_TOKENS if tok not in self.tokens]
        if missing:
            raise ValueError(f"vocabulary lacks control tokens {missing}")
        object.__setattr__(self, "token_to_id", {tok: i for i, tok in enumerate(self.tokens)})

    @classmethod
    def build(cls, scripts: Mapping[str, Sequence[str]], alphabet: RomanAlphabet) -> ToyVocab:
        tokens = list(const.CONTROL_TOKENS)
        tokens += [lang_tag(lang) for lang in sorted(scripts)]
        tokens += list(alphabet.tokens)
        seen = set(tokens)
        for lang in sorted(scripts):
            for symbol in scripts[lang]:
                if symbol not in seen:
                    seen.add(symbol)
                    tokens.append(symbol)
        return cls(tuple(tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[const.PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[const.BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[const.EOS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[const.SEP]

    def tag_id(self, lang: str) -> int:
        try:
            return self.token_to_id[lang_tag(lang)]
        except KeyError:
            raise UnknownLanguage(lang) from None

    def encode(self, text: str) -> list[int]:
        ids = []
        for position, char in enumerate(text):
            try:
                ids.append(self.token_to_id[char])
            except KeyError:
                raise UnknownToken(char, position) from None
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Characters only; control tokens and language tags are skipped."""
        out = []
        for idx in ids:
            token = self.tokens[int(idx)]
            if len(token) == 1:
                out.append(token)
        return "".join(out)


@dataclass
class ToyLMConfig:
    # language code -> grapheme symbols; fixes the vocabulary
    scripts: dict[str, list[str]]
    alphabet: RomanAlphabet = field(default_factory=RomanAlphabet)
    d_model: int = const.LM_D_MODEL
    n_layers: int = const.LM_N_LAYERS
    n_heads: int = const.LM_N_HEADS
    d_ffn: int = const.LM_D_FFN
    max_len: int = const.LM_MAX_LEN
    dropout: float = const.LM_DROPOUT
    tie_embeddings: bool = False

    def __post_init__(self) -> None:
        if not self.scripts:
            raise ValueError("the LM needs at least one registered language")
        if min(self.d_model, self.n_heads, self.n_layers, self.d_ffn, self.max_len) <= 0:
            raise ConfigError("LM dimensions must be positive")
        if self.d_model % self.n_heads or (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"d_model {self.d_model} / n_heads {self.n_heads} must give an even head width")

    @classmethod
    def for_languages(cls, languages: Iterable[ToyLanguage], **kwargs) -> ToyLMConfig:
        return cls(scripts={l.lang: list(l.graphemes) for l in languages}, **kwargs)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["alphabet"] = list(self.alphabet.tokens)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ToyLMConfig:
        data = dict(data)
        if "alphabet" in data:
            data["alphabet"] = RomanAlphabet(tuple(data["alphabet"]))
        return cls(**data)


class RotaryPositions(nn.Module):
    """Rotates query/key channel pairs by position-dependent angles.

    Same frequency ladder as the romanizer's sinusoidal table, applied as a
    rotation so attention scores depend on relative offsets only.
    """

    def __init__(self, head_dim: int, max_len: int) -> None:
        super().__init__()
        inv_freq = torch.exp(torch.arange(0, head_dim, 2, dtype=torch.float64) * (-math.log(10000.0) / head_dim))
        angles = torch.outer(torch.arange(max_len, dtype=torch.float64), inv_freq)
        self.register_buffer("cos", angles.cos(), persistent=False)
        self.register_buffer("sin", angles.sin(), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[-2]
        cos = self.cos[:length].to(x.dtype)
        sin = self.sin[:length].to(x.dtype)
        even, odd = x[..., 0::2], x[..., 1::2]
        return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float, max_len: int = const.LM_MAX_LEN) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.dropout = dropout
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.rotary = RotaryPositions(d_model // n_heads, max_len)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, l, self.n_heads, d // self.n_heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(
            self.rotary(heads(self.q_proj(x))),
            self.rotary(heads(self.k_proj(x))),
            heads(self.v_proj(x)),
            dropout_p=self.dropout if self.training else 0.0,
            is_causal=True,
        )
        return self.o_proj(out.transpose(1, 2).reshape(b, l, d))


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ffn: int, dropout: float, max_len: int = const.LM_MAX_LEN) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads, dropout, max_len)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, d_ffn), nn.GELU(), nn.Linear(d_ffn, d_model))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.mlp(self.ln2(x)))


class ToyLM(nn.Module):
    """Pre-norm decoder-only transformer over ToyVocab with rotary positions."""

    def __init__(self, config: ToyLMConfig) -> None:
        super().__init__()
        self.config = config
        self.vocab = ToyVocab.build(config.scripts, config.alphabet)
        d = config.d_model
        self.tok_emb = nn.Embedding(len(self.vocab), d)
        self.blocks = nn.ModuleList(
            DecoderBlock(d, config.n_heads, config.d_ffn, config.dropout, config.max_len)
            for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, len(self.vocab), bias=not config.tie_embeddings)
        if config.tie_embeddings:
            self.head.weight = self.tok_emb.weight

    @property
    def languages(self) -> list[str]:
        return sorted(self.config.scripts)

    def embed(self, ids: Sequence[int] | torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long, device=self.tok_emb.weight.device)
        return self.tok_emb(ids)

    def forward(self, inputs_embeds: torch.Tensor) -> torch.Tensor:
        """Logits for (B, L, d) or (L, d) input embeddings."""
        single = inputs_embeds.dim() == 2
        x = inputs_embeds.unsqueeze(0) if single else inputs_embeds
        length = x.shape[1]
        if length > self.config.max_len:
            raise ValueError(f"sequence of {length} exceeds the LM context of {self.config.max_len}")
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.ln_f(x))
        return logits.squeeze(0) if single else logits


def build_lm(config: ToyLMConfig, seed: int) -> ToyLM:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ToyLM(config)


def instruction_ids(vocab: ToyVocab, lang: str) -> list[int]:
    return [vocab.bos_id, vocab.tag_id(lang)]


def target_ids(vocab: ToyVocab, grapheme: str) -> list[int]:
    return vocab.encode(grapheme) + [vocab.eos_id]


def text_prompt(lm: ToyLM, roman: str, lang: str) -> torch.Tensor:
    """Embedded [BOS, tag, roman..., SEP]: the Task-2 input."""
    vocab = lm.vocab
    return lm.embed(instruction_ids(vocab, lang) + vocab.encode(roman) + [vocab.sep_id])


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


class LoraAdapter(nn.Module):
    """Low-rank update (alpha / r) B A for one d_out x d_in weight."""

    def __init__(self, d_in: int, d_out: int, rank: int = const.LORA_RANK, alpha: float = const.LORA_ALPHA) -> None:
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be at least 1")
        self.rank = rank
        self.alpha = float(alpha)
        self.lora_A = nn.Parameter(torch.empty(rank, d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scaling * self.lora_B @ self.lora_A


def lora_apply(
    base_weight: torch.Tensor,
    adapter: LoraAdapter,
    input: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    d_out, d_in = base_weight.shape
    if adapter.lora_A.shape[1] != d_in or adapter.lora_B.shape[0] != d_out:
        raise ShapeMismatch(
            f"adapter {tuple(adapter.lora_B.shape)}x{tuple(adapter.lora_A.shape)} "
            f"does not fit weight {tuple(base_weight.shape)}"
        )
    if input.shape[-1] != d_in:
        raise ShapeMismatch(f"input width {input.shape[-1]} != weight input width {d_in}")
    out = F.linear(input, base_weight, bias)
    return out + adapter.scaling * F.linear(F.linear(input, adapter.lora_A), adapter.lora_B)


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float) -> None:
        super().__init__()
        self.base = base
        self.base.requires_grad_(False)
        self.adapter = LoraAdapter(base.in_features, base.out_features, rank, alpha)
        self.adapter.to(device=base.weight.device, dtype=base.weight.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lora_apply(self.base.weight, self.adapter, x, self.base.bias)


def _parent_module(model: nn.Module, name: str) -> tuple[nn.Module, str]:
    *path, leaf = name.split(".")
    parent = model
    for part in path:
        parent = getattr(parent, part)
    return parent, leaf


def attach_lora(
    lm: ToyLM,
    rank: int = const.LORA_RANK,
    alpha: float = const.LORA_ALPHA,
    targets: Sequence[str] = const.LORA_TARGETS,
) -> dict[str, LoraAdapter]:
    """Wrap every Linear whose name ends in one of targets; returns the adapters by module name."""
    if any(isinstance(m, LoraLinear) for m in lm.modules()):
        raise ValueError("LoRA is already attached to this model")
    names = [
        name
        for name, module in lm.named_modules()
        if isinstance(module, nn.Linear) and name.split(".")[-1] in targets
    ]
    if not names:
        raise ValueError(f"no Linear layers named {list(targets)}")
    adapters = {}
    for name in names:
        parent, leaf = _parent_module(lm, name)
        wrapped = LoraLinear(getattr(parent, leaf), rank, alpha)
        setattr(parent, leaf, wrapped)
        adapters[name] = wrapped.adapter
    _LOGGER.debug("Attached rank-%d LoRA to %d layers", rank, len(adapters))
    return adapters


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for m in model.modules() if isinstance(m, LoraAdapter) for p in m.parameters()]


# ---------------------------------------------------------------------------
# Compressor, adapter, multimodal input
# ---------------------------------------------------------------------------


class LengthCompressor(nn.Module):
    """Kernel-2 stride-2 Conv1d with GELU: halves the frame rate."""

    def __init__(self, d_model: int) -> None:
        super().__init__()
        self.conv = nn.Conv1d(d_model, d_model, kernel_size=2, stride=2)
        self.act = nn.GELU()

    def identity_init(self) -> None:
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, :, 0] = torch.eye(self.conv.in_channels)
            self.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.conv(x.transpose(-1, -2))).transpose(-1, -2)


def compress(comp: LengthCompressor, f_av: torch.Tensor) -> torch.Tensor:
    if f_av.shape[-2] < 2:
        raise SequenceTooShort(f"compression needs at least 2 frames, got {f_av.shape[-2]}")
    if f_av.shape[-1] != comp.conv.in_channels:
        raise ShapeMismatch(f"feature width {f_av.shape[-1]} != compressor width {comp.conv.in_channels}")
    return comp(f_av)


class Adapter(nn.Module):
    def __init__(self, d_model: int, d_lm: int) -> None:
        super().__init__()
        self.proj = nn.Linear(d_model, d_lm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


def embed_multimodal(lm: ToyLM, av_emb: torch.Tensor, instruction: Sequence[int]) -> torch.Tensor:
    """[embed(instruction); av_emb; embed(SEP)]; positions are added inside the LM."""
    if av_emb.dim() != 2 or av_emb.shape[-1] != lm.config.d_model:
        raise WidthMismatch(f"speech embeddings of shape {tuple(av_emb.shape)} do not fit LM width {lm.config.d_model}")
    parts = []
    if len(instruction):
        parts.append(lm.embed(list(instruction)))
    parts.append(av_emb.to(lm.tok_emb.weight.dtype))
    parts.append(lm.embed([lm.vocab.sep_id]))
    return torch.cat(parts, dim=0)


# ---------------------------------------------------------------------------
# Loss and decoding
# ---------------------------------------------------------------------------


def batch_lm_loss(
    lm: ToyLM, prefixes: Sequence[torch.Tensor], targets: Sequence[Sequence[int]]
) -> torch.Tensor:
    """Mean next-token cross-entropy over target positions of a right-padded batch."""
    if len(prefixes) != len(targets):
        raise ValueError("one target per prefix")
    if not targets or any(len(t) == 0 for t in targets):
        raise EmptyTarget("lm_loss needs at least one target token per sequence")
    sequences, label_rows = [], []
    for prefix, target in zip(prefixes, targets):
        target = [int(t) for t in target]
        seq = torch.cat([prefix, lm.embed(target[:-1])]) if len(target) > 1 else prefix
        labels = [IGNORE_INDEX] * (len(prefix) - 1) + target
        sequences.append(seq)
        label_rows.append(labels)
    width = max(len(s) for s in sequences)
    batch = sequences[0].new_zeros(len(sequences), width, sequences[0].shape[-1])
    labels = torch.full((len(sequences), width), IGNORE_INDEX, dtype=torch.long, device=batch.device)
    for i, (seq, row) in enumerate(zip(sequences, label_rows)):
        batch[i, : len(seq)] = seq
        labels[i, : len(row)] = torch.tensor(row, dtype=torch.long)
    logits = lm(batch)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX)


def lm_loss(lm: ToyLM, inputs: torch.Tensor, targets: Sequence[int]) -> torch.Tensor:
    return batch_lm_loss(lm, [inputs], [targets])


@torch.no_grad()
def text_perplexity(lm: ToyLM, texts: Sequence[str], lang: str) -> float:
    """Perplexity of grapheme sentences framed as [BOS, tag] text [EOS]."""
    if not texts:
        raise ValueError("no texts to score")
    vocab = lm.vocab
    prefix = lm.embed(instruction_ids(vocab, lang))
    loss = batch_lm_loss(lm, [prefix] * len(texts), [target_ids(vocab, t) for t in texts])
    return float(torch.exp(loss))


@dataclass
class Hypothesis:
    ids: list[int]
    score: float
    finished: bool = False


@torch.no_grad()
def beam_search(
    lm: ToyLM,
    inputs: torch.Tensor,
    beam_width: int = const.BEAM_WIDTH,
    temperature: float = const.TEMPERATURE,
    max_len: int = const.MAX_DECODE_LEN,
    allowed_ids: Iterable[int] | None = None,
) -> list[Hypothesis]:
    """Deterministic beam search over temperature-scaled log-probabilities.

    Each step keeps the beam_width best extensions overall; an extension ending
    in EOS is retired as finished. Ties keep beam order, then lowest token id.
    Search stops early once no live beam can overtake the best finished one.
    """
    if beam_width < 1:
        raise ValueError("beam width must be at least 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    eos = lm.vocab.eos_id
    bias = None
    if allowed_ids is not None:
        bias = torch.full((len(lm.vocab),), -math.inf)
        bias[sorted(set(allowed_ids) | {eos})] = 0.0
    max_len = min(max_len, lm.config.max_len - len(inputs))

    alive = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max(max_len, 0)):
        batch = torch.stack([torch.cat([inputs, lm.embed(h.ids)]) if h.ids else inputs for h in alive])
        logits = lm(batch)[:, -1].double().cpu() / temperature
        if bias is not None:
            logits = logits + bias.double()
        log_probs = F.log_softmax(logits, dim=-1).numpy()
        candidates = []
        for hyp, row in zip(alive, log_probs):
            for token in np.argsort(-row, kind="stable")[:beam_width]:
                if np.isfinite(row[token]):
                    candidates.append((hyp.score + float(row[token]), hyp.ids + [int(token)]))
        candidates.sort(key=lambda c: -c[0])
        alive = []
        for score, ids in candidates[:beam_width]:
            if ids[-1] == eos:
                finished.append(Hypothesis(ids[:-1], score, finished=True))
            else:
                alive.append(Hypothesis(ids, score))
        if not alive:
            break
        if finished and max(f.score for f in finished) >= max(h.score for h in alive):
            break
    return sorted(finished + alive, key=lambda h: -h.score)


def generate(
    lm: ToyLM,
    inputs: torch.Tensor,
    beam_width: int = const.BEAM_WIDTH,
    temperature: float = const.TEMPERATURE,
    max_len: int = const.MAX_DECODE_LEN,
    allowed_ids: Iterable[int] | None = None,
) -> str:
    beams = beam_search(lm, inputs, beam_width, temperature, max_len, allowed_ids)
    return lm.vocab.decode(beams[0].ids) if beams else ""


def script_ids(lm: ToyLM, lang: str) -> list[int]:
    """Grapheme ids of one language plus the space."""
    if lang not in lm.config.scripts:
        raise UnknownLanguage(lang)
    vocab = lm.vocab
    return sorted({vocab.token_to_id[s] for s in lm.config.scripts[lang]} | {vocab.token_to_id[" "]})


# ---------------------------------------------------------------------------
# Unified bridge
# ---------------------------------------------------------------------------


class Bridge(nn.Module):
    """LM with LoRA, compressor and adapter: the unified decoder."""

    def __init__(
        self,
        lm: ToyLM,
        d_av: int,
        rank: int = const.LORA_RANK,
        alpha: float = const.LORA_ALPHA,
        targets: Sequence[str] = const.LORA_TARGETS,
    ) -> None:
        super().__init__()
        self.lm = lm
        self.lm.requires_grad_(False)
        self.lora = attach_lora(lm, rank, alpha, targets)
        self.compressor = LengthCompressor(d_av)
        self.adapter = Adapter(d_av, lm.config.d_model)
        self.settings = {"d_av": d_av, "rank": rank, "alpha": alpha, "targets": list(targets)}

    def trainable_parameters(self, task: int) -> list[nn.Parameter]:
        if task == 1:
            return lora_parameters(self.lm) + list(self.compressor.parameters()) + list(self.adapter.parameters())
        if task == 2:
            return lora_parameters(self.lm)
        raise ValueError(f"unknown task {task}")

    def speech_prompt(self, hidden: torch.Tensor, lang: str) -> torch.Tensor:
        av_emb = self.adapter(compress(self.compressor, hidden))
        return embed_multimodal(self.lm, av_emb, instruction_ids(self.lm.vocab, lang))

    def text_prompt(self, roman: str, lang: str) -> torch.Tensor:
        return text_prompt(self.lm, roman, lang)

    def task1_loss(self, hiddens: Sequence[torch.Tensor], graphemes: Sequence[str], langs: Sequence[str]) -> torch.Tensor:
        prefixes = [self.speech_prompt(h, lang) for h, lang in zip(hiddens, langs)]
        return batch_lm_loss(self.lm, prefixes, [target_ids(self.lm.vocab, g) for g in graphemes])

    def task2_loss(self, romans: Sequence[str], graphemes: Sequence[str], langs: Sequence[str]) -> torch.Tensor:
        prefixes = [self.text_prompt(r, lang) for r, lang in zip(romans, langs)]
        return batch_lm_loss(self.lm, prefixes, [target_ids(self.lm.vocab, g) for g in graphemes])

    def transcribe(
        self,
        hidden: torch.Tensor,
        lang: str,
        beam_width: int = const.BEAM_WIDTH,
        temperature: float = const.TEMPERATURE,
        max_len: int = const.MAX_DECODE_LEN,
    ) -> tuple[str, float]:
        """Best grapheme string and its log-score for one utterance's romanizer features."""
        with torch.no_grad():
            prompt = self.speech_prompt(hidden.to(self.lm.tok_emb.weight.dtype), lang)
        beams = beam_search(self.lm, prompt, beam_width, temperature, max_len, script_ids(self.lm, lang))
        if not beams:
            return "", 0.0
        return self.lm.vocab.decode(beams[0].ids), beams[0].score


def save_lm(lm: ToyLM, path: str | Path, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": const.CHECKPOINT_FORMAT_VERSION,
            "kind": "toy-lm",
            "config": lm.config.to_dict(),
            "parameters": {k: v.detach().cpu().contiguous() for k, v in lm.state_dict().items()},
            **extra,
        },
        path,
    )
    _LOGGER.info("Saved toy LM to %s", path)


def load_lm(path: str | Path) -> ToyLM:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "toy-lm":
        raise ValueError(f"{path} is not a toy LM checkpoint")
    lm = ToyLM(ToyLMConfig.from_dict(payload["config"]))
    lm.load_state_dict(payload["parameters"])
    return lm.eval()


def save_bridge(bridge: Bridge, path: str | Path, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": const.CHECKPOINT_FORMAT_VERSION,
            "kind": "bridge",
            "lm_config": bridge.lm.config.to_dict(),
            "settings": bridge.settings,
            "parameters": {k: v.detach().cpu().contiguous() for k, v in bridge.state_dict().items()},
            **extra,
        },
        path,
    )
    _LOGGER.info("Saved bridge to %s", path)


def load_bridge(path: str | Path) -> tuple[Bridge, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "bridge":
        raise ValueError(f"{path} is not a bridge checkpoint")
    settings = payload["settings"]
    bridge = Bridge(
        ToyLM(ToyLMConfig.from_dict(payload["lm_config"])),
        settings["d_av"],
        settings["rank"],
        settings["alpha"],
        settings["targets"],
    )
    bridge.load_state_dict(payload["parameters"])
    return bridge.eval(), payload


# ---------------------------------------------------------------------------
# Cascaded de-romanization
# ---------------------------------------------------------------------------

_TRANSCRIPT_RE = re.compile(
    re.escape(const.TRANSCRIPT_OPEN) + r"(.*?)" + re.escape(const.TRANSCRIPT_CLOSE), re.DOTALL
)


def build_prompt(roman: str, target_lang: str, language_names: Mapping[str, str] | None = None) -> str:
    names = const.LANGUAGE_NAMES if language_names is None else language_names
    try:
        language = names[target_lang]
    except KeyError:
        raise UnknownLanguage(target_lang) from None
    return const.DEROMANIZE_TEMPLATE.format(language=language, roman=roman)


def build_romanize_prompt(text: str, lang: str, language_names: Mapping[str, str] | None = None) -> str:
    names = const.LANGUAGE_NAMES if language_names is None else language_names
    if lang not in names:
        raise UnknownLanguage(lang)
    return const.ROMANIZE_TEMPLATE.format(language=names[lang], text=text)


def parse_transcription(reply: str) -> str:
    match = _TRANSCRIPT_RE.search(reply)
    if match is None:
        raise BackendRefusal(f"reply lacks {const.TRANSCRIPT_OPEN} markers: {reply[:80]!r}")
    return match.group(1).strip()


class DeromanizerKind(str, Enum):
    REMOTE_CHAT = "remote-chat"
    LEXICON_ORACLE = "lexicon-oracle"
    TOY_LM = "toy-lm"


class DeromanizerBackend:
    kind: DeromanizerKind

    def languages(self) -> set[str]:
        raise NotImplementedError

    def deromanize(self, roman: str, lang: str) -> str:
        raise NotImplementedError

    def healthy(self) -> bool:
        return True

    @property
    def concurrent(self) -> bool:
        return False


class LexiconOracleBackend(DeromanizerBackend):
    kind = DeromanizerKind.LEXICON_ORACLE

    def __init__(self, languages: Mapping[str, ToyLanguage]) -> None:
        self._languages = dict(languages)

    def languages(self) -> set[str]:
        return set(self._languages)

    def deromanize(self, roman: str, lang: str) -> str:
        return deromanize_oracle(roman, self._languages[lang])


class ToyLMBackend(DeromanizerBackend):
    """Greedy roman -> grapheme decoding with the Task-2 text prompt."""

    kind = DeromanizerKind.TOY_LM

    def __init__(self, lm: ToyLM, max_len: int = const.MAX_DECODE_LEN) -> None:
        self.lm = lm.eval()
        self.max_len = max_len

    def languages(self) -> set[str]:
        return set(self.lm.config.scripts)

    def deromanize(self, roman: str, lang: str) -> str:
        roman = "".join(c for c in roman if c in self.lm.vocab.token_to_id)
        prompt = text_prompt(self.lm, roman, lang)
        max_len = min(self.max_len, 2 * len(roman) + 8)
        return generate(self.lm, prompt, 1, 1.0, max_len, script_ids(self.lm, lang))


class RemoteChatBackend(DeromanizerBackend):
    kind = DeromanizerKind.REMOTE_CHAT

    def __init__(
        self,
        client: RemoteChatClient,
        language_names: Mapping[str, str] | None = None,
        in_flight: int = const.DEFAULT_IN_FLIGHT,
    ) -> None:
        self.client = client
        self.language_names = dict(const.LANGUAGE_NAMES)
        self.language_names.update(language_names or {})
        self.in_flight = in_flight

    def languages(self) -> set[str]:
        return set(self.language_names)

    def deromanize(self, roman: str, lang: str) -> str:
        return parse_transcription(self.client.complete(build_prompt(roman, lang, self.language_names)))

    def romanize(self, text: str, lang: str) -> str:
        return parse_transcription(self.client.complete(build_romanize_prompt(text, lang, self.language_names)))

    def healthy(self) -> bool:
        return len(self.client.cache) > 0 or self.client.reachable()

    @property
    def concurrent(self) -> bool:
        return True


def deromanize(backend: DeromanizerBackend, roman: str, lang: str) -> str:
    if lang not in backend.languages():
        raise UnknownLanguage(lang)
    return backend.deromanize(roman, lang)


def deromanize_many(
    backend: DeromanizerBackend,
    items: Sequence[tuple[str, str, str]],
    in_flight: int | None = None,
) -> dict[str, str | BackendError]:
    """De-romanize (id, roman, lang) items; backend errors are returned per id."""

    def one(item: tuple[str, str, str]) -> tuple[str, str | BackendError]:
        utt_id, roman, lang = item
        try:
            return utt_id, deromanize(backend, roman, lang)
        except BackendError as err:
            _LOGGER.warning("De-romanization of %s failed: %s", utt_id, err)
            return utt_id, err

    if backend.concurrent and len(items) > 1:
        workers = in_flight or getattr(backend, "in_flight", const.DEFAULT_IN_FLIGHT)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return dict(pool.map(one, items))
    return dict(one(item) for item in items)


def make_backend(
    settings: Mapping,
    *,
    languages: Mapping[str, ToyLanguage] | None = None,
    lm: ToyLM | None = None,
    cache_dir: str | Path | None = None,
) -> DeromanizerBackend:
    kind = DeromanizerKind(settings["kind"])
    if kind is DeromanizerKind.LEXICON_ORACLE:
        if not languages:
            raise ValueError("the lexicon oracle needs the toy languages")
        return LexiconOracleBackend(languages)
    if kind is DeromanizerKind.TOY_LM:
        if lm is None:
            raise ValueError("the toy-lm backend needs a trained LM")
        return ToyLMBackend(lm)
    client = RemoteChatClient(
        settings.get("endpoint"),
        settings.get("model", const.DEFAULT_REMOTE_MODEL),
        temperature=settings.get("temperature", 0.0),
        timeout=settings.get("timeout", const.DEFAULT_TIMEOUT),
        retries=settings.get("retries", const.DEFAULT_RETRIES),
        backoff=settings.get("backoff", const.DEFAULT_BACKOFF),
        cache_path=Path(cache_dir) / const.CACHE_FILENAME if cache_dir else settings.get("cache"),
    )
    names = {code: lang.name for code, lang in (languages or {}).items()}
    return RemoteChatBackend(client, names, settings.get("in_flight", const.DEFAULT_IN_FLIGHT))
