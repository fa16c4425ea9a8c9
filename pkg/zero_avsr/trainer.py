"""Learning-rate schedules, freeze audits and the training loops.

Three models are trained here: the AV-Romanizer (CTC, tri-stage schedule),
the toy LM (next-token pretraining on text of every language) and the
bridge (Task 1 speech-to-grapheme and Task 2 roman-to-grapheme, cosine
schedule). Every loop writes a metrics CSV and can checkpoint and resume
bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from . import const
from .av_frontend import NoiseBank, mix_noise_array
from .av_romanizer import (
    RomanizerConfig,
    RomanizerModel,
    batch_ctc_loss,
    collate,
    encode,
    required_frames,
)
from .exceptions import (
    ConfigError,
    DivergedLoss,
    FrozenTensorChanged,
    MissingLanguage,
    SeenLanguageViolation,
    TargetTooLong,
    UnknownLanguage,
)
from .llm_bridge import Bridge, ToyLM, ToyLMConfig, batch_lm_loss, build_lm, instruction_ids
from .roman_core import RomanAlphabet, TextPair, tokenize_roman
from .synth_corpus import Corpus, Utterance, derive_seed

_LOGGER = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TriStageSchedule:
    warmup_steps: int = const.TRISTAGE_WARMUP
    hold_steps: int = const.TRISTAGE_HOLD
    decay_steps: int = const.TRISTAGE_DECAY
    peak_lr: float = const.PEAK_LR
    init_scale: float = const.TRISTAGE_INIT_SCALE
    final_scale: float = const.TRISTAGE_FINAL_SCALE

    def __post_init__(self) -> None:
        if min(self.warmup_steps, self.hold_steps, self.decay_steps) < 0:
            raise ConfigError("schedule step counts must be non-negative")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.init_scale < 0 or self.final_scale <= 0:
            raise ConfigError("lr scales must be positive")

    def lr(self, step: int) -> float:
        if step < self.warmup_steps:
            init = self.peak_lr * self.init_scale
            return init + (self.peak_lr - init) * step / self.warmup_steps
        step -= self.warmup_steps
        if step < self.hold_steps:
            return self.peak_lr
        step -= self.hold_steps
        if step < self.decay_steps:
            return self.peak_lr * self.final_scale ** (step / self.decay_steps)
        return self.peak_lr * self.final_scale


@dataclass(frozen=True)
class CosineSchedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float = const.PEAK_LR

    def __post_init__(self) -> None:
        if self.warmup_steps < 0 or self.warmup_steps >= self.total_steps:
            raise ConfigError("cosine schedule needs 0 <= warmup_steps < total_steps")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")

    def lr(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        progress = min((step - self.warmup_steps) / (self.total_steps - self.warmup_steps), 1.0)
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


Schedule = TriStageSchedule | CosineSchedule


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    return schedule.lr(step)


def schedule_from_config(section: Mapping, total_steps: int) -> Schedule:
    kind = section.get("kind", "tristage")
    if kind == "tristage":
        return TriStageSchedule(
            warmup_steps=section.get("warmup_steps", const.TRISTAGE_WARMUP),
            hold_steps=section.get("hold_steps", const.TRISTAGE_HOLD),
            decay_steps=section.get("decay_steps", const.TRISTAGE_DECAY),
            peak_lr=section.get("peak_lr", const.ROMANIZER_PEAK_LR),
            init_scale=section.get("init_scale", const.TRISTAGE_INIT_SCALE),
            final_scale=section.get("final_scale", const.TRISTAGE_FINAL_SCALE),
        )
    if kind == "cosine":
        warmup = min(section.get("warmup_steps", const.COSINE_WARMUP), max(total_steps - 1, 0))
        return CosineSchedule(warmup, max(total_steps, 1), section.get("peak_lr", const.BRIDGE_PEAK_LR))
    raise ConfigError(f"unknown schedule kind {kind!r}")


# ---------------------------------------------------------------------------
# State, audits, metrics
# ---------------------------------------------------------------------------


@dataclass
class TrainOptions:
    steps: int
    batch_size: int = const.BATCH_SIZE
    # effective batch = batch_size x accumulation
    accumulation: int = 1
    log_interval: int = const.LOG_INTERVAL
    checkpoint_every: int = 0
    audit_every: int = 1
    out_dir: Path | None = None
    betas: tuple[float, float] = const.ADAM_BETAS
    eps: float = const.ADAM_EPS
    weight_decay: float = const.WEIGHT_DECAY
    progress: bool = False

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.accumulation < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and accumulation >= 1 required")
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)


@dataclass
class TrainState:
    step: int = 0
    ema: dict[str, float] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    ema_decay: float = 0.9

    @classmethod
    def fresh(cls, seed: int) -> TrainState:
        return cls(rng=np.random.default_rng(derive_seed(seed, 1)))

    def update_ema(self, task: str, loss: float) -> float:
        previous = self.ema.get(task)
        self.ema[task] = loss if previous is None else self.ema_decay * previous + (1 - self.ema_decay) * loss
        return self.ema[task]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "ema": dict(self.ema),
            "ema_decay": self.ema_decay,
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> TrainState:
        rng = np.random.default_rng()
        rng.bit_generator.state = data["rng"]
        torch.set_rng_state(data["torch_rng"])
        return cls(step=data["step"], ema=dict(data["ema"]), rng=rng, ema_decay=data["ema_decay"])


def tensor_digest(tensor: torch.Tensor) -> str:
    return hashlib.sha256(tensor.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


class FreezeAudit:
    """SHA-256 snapshot of tensors that an optimizer step must leave untouched."""

    def __init__(self, tensors: Mapping[str, torch.Tensor]) -> None:
        self.tensors = dict(tensors)
        self.reference = {name: tensor_digest(t) for name, t in self.tensors.items()}

    @classmethod
    def frozen_in(
        cls, modules: Mapping[str, nn.Module], trainable: Iterable[torch.Tensor]
    ) -> FreezeAudit:
        trainable_ids = {id(p) for p in trainable}
        tensors = {
            f"{prefix}.{name}": param
            for prefix, module in modules.items()
            for name, param in module.named_parameters()
            if id(param) not in trainable_ids
        }
        return cls(tensors)

    def changed(self) -> list[str]:
        return [name for name, t in self.tensors.items() if tensor_digest(t) != self.reference[name]]

    def check(self) -> None:
        changed = self.changed()
        if changed:
            raise FrozenTensorChanged(f"{len(changed)} frozen tensors changed: {changed[:5]}")


class MetricsLog:
    """step,task,loss,lr rows. A run starting at step 0 truncates the file;
    a resumed run keeps only the rows logged up to its checkpoint."""

    FIELDS = ("step", "task", "loss", "lr")

    def __init__(self, path: Path | None) -> None:
        self.path = path

    def start(self, step: int = 0) -> None:
        if self.path is None:
            return
        kept = []
        if step and self.path.exists():
            kept = [row for row in read_metrics(self.path) if int(row["step"]) <= step]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.FIELDS)
            writer.writerows([row[key] for key in self.FIELDS] for row in kept)

    def write(self, step: int, task: str, loss: float, lr: float) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([step, task, f"{loss:.6f}", f"{lr:.8g}"])


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def save_training_checkpoint(
    path: Path, modules: Mapping[str, nn.Module], optimizer: torch.optim.Optimizer, state: TrainState
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": const.CHECKPOINT_FORMAT_VERSION,
            "kind": "train-state",
            "modules": {name: m.state_dict() for name, m in modules.items()},
            "optimizer": optimizer.state_dict(),
            "state": state.to_dict(),
        },
        path,
    )
    _LOGGER.info("Checkpointed step %d to %s", state.step, path)


def load_training_checkpoint(
    path: str | Path, modules: Mapping[str, nn.Module], optimizer: torch.optim.Optimizer
) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "train-state":
        raise ValueError(f"{path} is not a training checkpoint")
    for name, module in modules.items():
        module.load_state_dict(payload["modules"][name])
    optimizer.load_state_dict(payload["optimizer"])
    state = TrainState.from_dict(payload["state"])
    _LOGGER.info("Resumed from %s at step %d", path, state.step)
    return state


class _Runner:
    """One optimizer, one schedule, one metrics file."""

    def __init__(
        self,
        name: str,
        params: Sequence[torch.Tensor],
        schedule: Schedule,
        options: TrainOptions,
        state: TrainState,
    ) -> None:
        self.name = name
        self.schedule = schedule
        self.options = options
        self.state = state
        self.optimizer = torch.optim.AdamW(
            params,
            lr=lr_at(schedule, 0),
            betas=tuple(options.betas),
            eps=options.eps,
            weight_decay=options.weight_decay,
        )
        out = options.out_dir
        self.metrics = MetricsLog(out / const.METRICS_FILENAME if out else None)
        self.checkpoint_path = out / f"{name}.train.pt" if out else None

    def open(self, modules: Mapping[str, nn.Module], resume: str | Path | None = None) -> TrainState:
        """Restore from resume when given, then start the metrics file at the current step."""
        if resume:
            self.state = load_training_checkpoint(resume, modules, self.optimizer)
        self.metrics.start(self.state.step)
        return self.state

    def step(
        self,
        task: str,
        loss_fn: Callable[[], torch.Tensor],
        audit: Callable[[], FreezeAudit] | None = None,
    ) -> float:
        state, options = self.state, self.options
        lr = lr_at(self.schedule, state.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        snapshot = audit() if audit and (state.step + 1) % options.audit_every == 0 else None
        self.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(options.accumulation):
            loss = loss_fn()
            if not torch.isfinite(loss):
                raise DivergedLoss(f"{self.name} {task} loss {loss.item()} at step {state.step}")
            (loss / options.accumulation).backward()
            total += loss.item() / options.accumulation
        self.optimizer.step()
        state.step += 1
        ema = state.update_ema(task, total)
        if snapshot is not None:
            snapshot.check()
        if state.step % options.log_interval == 0:
            self.metrics.write(state.step, task, total, lr)
            _LOGGER.debug("%s step %d %s loss %.4f (ema %.4f) lr %.3g", self.name, state.step, task, total, ema, lr)
        return total

    def maybe_checkpoint(self, modules: Mapping[str, nn.Module]) -> None:
        every = self.options.checkpoint_every
        if self.checkpoint_path and every and self.state.step % every == 0:
            save_training_checkpoint(self.checkpoint_path, modules, self.optimizer, self.state)


# ---------------------------------------------------------------------------
# Romanizer
# ---------------------------------------------------------------------------


def _draw_modality(rng: np.random.Generator, dropout: float) -> str:
    """AV with probability 1 - dropout, else A or V with equal odds."""
    if rng.random() >= dropout:
        return "AV"
    return "A" if rng.random() < 0.5 else "V"


def _noisy(utt: Utterance, rng: np.random.Generator, bank: NoiseBank | None, prob: float, snr_db: float) -> Utterance:
    if bank is None or rng.random() >= prob:
        return utt
    _, noise = bank.sample(utt.audio_feats.shape, rng)
    mixed = mix_noise_array(utt.audio_feats, noise, snr_db, rng)
    return replace(utt, audio_feats=mixed.astype(np.float32))


def train_romanizer(
    model: RomanizerModel,
    utterances: Sequence[Utterance],
    schedule: Schedule,
    options: TrainOptions,
    *,
    seed: int,
    modality_dropout: float = const.MODALITY_DROPOUT,
    noise_prob: float = const.NOISE_PROBABILITY,
    snr_db: float = const.TRAIN_SNR_DB,
    noise_bank: NoiseBank | None = None,
    resume: str | Path | None = None,
) -> TrainState:
    """CTC training with whole-utterance modality dropout and noise mixing; updates model in place."""
    if not utterances:
        raise ValueError("no utterances to train on")
    targets = [tokenize_roman(u.pair.roman, model.alphabet) for u in utterances]
    for utt, target in zip(utterances, targets):
        if required_frames(target) > utt.n_frames:
            raise TargetTooLong(f"{utt.id}: {len(target)} labels in {utt.n_frames} frames")
    torch.manual_seed(derive_seed(seed, 3))
    dtype = next(model.parameters()).dtype
    runner = _Runner("romanizer", list(model.parameters()), schedule, options, TrainState.fresh(seed))
    modules = {"romanizer": model}
    state = runner.open(modules, resume)

    def loss_fn() -> torch.Tensor:
        rng = state.rng
        idx = rng.integers(len(utterances), size=options.batch_size)
        modalities = [_draw_modality(rng, modality_dropout) for _ in idx]
        batch = [_noisy(utterances[i], rng, noise_bank, noise_prob, snr_db) for i in idx]
        x_a, x_v, lengths, mask = collate(batch, dtype)
        log_probs = model(x_a, x_v, mask, modalities)
        return batch_ctc_loss(log_probs, lengths, [targets[i] for i in idx]).mean()

    model.train()
    for _ in tqdm(range(state.step, options.steps), desc="romanizer", disable=not options.progress):
        runner.step("ctc", loss_fn)
        runner.maybe_checkpoint(modules)
    model.eval()
    _LOGGER.info("Romanizer trained for %d steps, loss ema %.4f", state.step, state.ema.get("ctc", float("nan")))
    return state


# ---------------------------------------------------------------------------
# Toy LM pretraining
# ---------------------------------------------------------------------------


def _check_coverage(pairs: Sequence[TextPair], registered: Iterable[str]) -> None:
    registered = set(registered)
    present = {p.lang for p in pairs}
    for lang in sorted(present - registered):
        raise UnknownLanguage(lang)
    missing = sorted(registered - present)
    if missing:
        raise MissingLanguage(f"no text for registered languages {missing}")


def pretrain_toy_lm(
    corpus: Sequence[TextPair],
    config: ToyLMConfig,
    steps: int,
    seed: int,
    *,
    options: TrainOptions | None = None,
    schedule: Schedule | None = None,
    pair_fraction: float = const.LM_PAIR_FRACTION,
    resume: str | Path | None = None,
) -> ToyLM:
    """Next-token training on grapheme text, roman text and roman->grapheme pairs of every language.

    pair_fraction of the sequences are [roman SEP grapheme] pairs; the rest
    split evenly between plain grapheme and plain roman text.
    """
    _check_coverage(corpus, config.scripts)
    if not 0.0 <= pair_fraction <= 1.0:
        raise ConfigError(f"pair_fraction must lie in [0, 1], got {pair_fraction}")
    options = replace(options, steps=steps) if options else TrainOptions(steps=steps)
    schedule = schedule or CosineSchedule(min(const.COSINE_WARMUP, max(steps - 1, 0)), max(steps, 1), const.LM_PEAK_LR)
    kind_odds = [(1.0 - pair_fraction) / 2, (1.0 - pair_fraction) / 2, pair_fraction]
    torch.manual_seed(derive_seed(seed, 3))
    lm = build_lm(config, seed)
    vocab = lm.vocab
    runner = _Runner("lm", list(lm.parameters()), schedule, options, TrainState.fresh(seed))
    modules = {"lm": lm}
    state = runner.open(modules, resume)

    def sequence(pair: TextPair, kind: int) -> list[int]:
        head = instruction_ids(vocab, pair.lang)
        if kind == 0:
            body = vocab.encode(pair.grapheme)
        elif kind == 1:
            body = vocab.encode(pair.roman)
        else:
            body = vocab.encode(pair.roman) + [vocab.sep_id] + vocab.encode(pair.grapheme)
        return head + body + [vocab.eos_id]

    def loss_fn() -> torch.Tensor:
        idx = state.rng.integers(len(corpus), size=options.batch_size)
        kinds = state.rng.choice(3, size=options.batch_size, p=kind_odds)
        seqs = [sequence(corpus[i], int(k)) for i, k in zip(idx, kinds)]
        return batch_lm_loss(lm, [lm.embed(s[:1]) for s in seqs], [s[1:] for s in seqs])

    lm.train()
    for _ in tqdm(range(state.step, steps), desc="lm", disable=not options.progress):
        runner.step("lm", loss_fn)
        runner.maybe_checkpoint(modules)
    _LOGGER.info("Toy LM pretrained for %d steps, loss ema %.4f", state.step, state.ema.get("lm", float("nan")))
    return lm.eval()


# ---------------------------------------------------------------------------
# Bridge: Task 1, Task 2 and the multi-task loop
# ---------------------------------------------------------------------------


@dataclass
class Task1Data:
    """Frozen romanizer features with their grapheme transcripts."""

    features: list[torch.Tensor]
    graphemes: list[str]
    langs: list[str]

    @classmethod
    def from_utterances(
        cls, romanizer: RomanizerModel, utterances: Sequence[Utterance], seen: Iterable[str]
    ) -> Task1Data:
        leaked = sorted({u.lang for u in utterances} - set(seen))
        if leaked:
            raise SeenLanguageViolation(f"Task 1 received speech of unseen languages {leaked}")
        romanizer.eval()
        with torch.no_grad():
            features = [encode(romanizer, u.audio_feats, u.video_feats) for u in utterances]
        return cls(features, [u.pair.grapheme for u in utterances], [u.lang for u in utterances])

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class Task2Data:
    romans: list[str]
    graphemes: list[str]
    langs: list[str]

    @classmethod
    def from_pairs(cls, pairs: Sequence[TextPair], registered: Iterable[str]) -> Task2Data:
        _check_coverage(pairs, registered)
        return cls([p.roman for p in pairs], [p.grapheme for p in pairs], [p.lang for p in pairs])

    def __len__(self) -> int:
        return len(self.romans)


def task_draws(mix_ratio: float, n: int, seed: int, mode: str = "interleaved") -> list[int]:
    """Task id (1 or 2) per step; a seeded Bernoulli(mix_ratio) draw when interleaved."""
    if not 0.0 < mix_ratio < 1.0:
        raise ValueError(f"mix_ratio must lie strictly between 0 and 1, got {mix_ratio}")
    if mode == "sequential":
        n1 = round(mix_ratio * n)
        return [1] * n1 + [2] * (n - n1)
    if mode != "interleaved":
        raise ValueError(f"unknown multitask mode {mode!r}")
    rng = np.random.default_rng(derive_seed(seed, 2))
    return [1 if r < mix_ratio else 2 for r in rng.random(n)]


def _run_bridge(
    bridge: Bridge,
    draws: Sequence[int],
    task1: Task1Data | None,
    task2: Task2Data | None,
    schedule: Schedule,
    options: TrainOptions,
    seed: int,
    romanizer: RomanizerModel | None,
    resume: str | Path | None,
) -> TrainState:
    torch.manual_seed(derive_seed(seed, 3))
    params = bridge.trainable_parameters(1 if 1 in draws else 2)
    runner = _Runner("bridge", params, schedule, options, TrainState.fresh(seed))
    modules = {"bridge": bridge}
    state = runner.open(modules, resume)
    audited = dict(modules)
    if romanizer is not None:
        audited["romanizer"] = romanizer

    def audit_for(task: int) -> Callable[[], FreezeAudit]:
        return lambda: FreezeAudit.frozen_in(audited, bridge.trainable_parameters(task))

    def task1_loss() -> torch.Tensor:
        idx = state.rng.integers(len(task1), size=options.batch_size)
        return bridge.task1_loss(
            [task1.features[i] for i in idx], [task1.graphemes[i] for i in idx], [task1.langs[i] for i in idx]
        )

    def task2_loss() -> torch.Tensor:
        idx = state.rng.integers(len(task2), size=options.batch_size)
        return bridge.task2_loss(
            [task2.romans[i] for i in idx], [task2.graphemes[i] for i in idx], [task2.langs[i] for i in idx]
        )

    bridge.train()
    for step in tqdm(range(state.step, len(draws)), desc="bridge", disable=not options.progress):
        if draws[step] == 1:
            runner.step("task1", task1_loss, audit_for(1))
        else:
            runner.step("task2", task2_loss, audit_for(2))
        runner.maybe_checkpoint(modules)
    bridge.eval()
    _LOGGER.info(
        "Bridge trained for %d steps, task1 ema %.4f, task2 ema %.4f",
        state.step,
        state.ema.get("task1", float("nan")),
        state.ema.get("task2", float("nan")),
    )
    return state


def train_task1(
    romanizer: RomanizerModel,
    bridge: Bridge,
    utterances: Sequence[Utterance],
    seen: Iterable[str],
    schedule: Schedule,
    options: TrainOptions,
    *,
    seed: int,
    resume: str | Path | None = None,
) -> TrainState:
    """Align romanizer features to the LM; only LoRA, compressor and adapter move."""
    data = Task1Data.from_utterances(romanizer, utterances, seen)
    return _run_bridge(bridge, [1] * options.steps, data, None, schedule, options, seed, romanizer, resume)


def train_task2(
    bridge: Bridge,
    pairs: Sequence[TextPair],
    schedule: Schedule,
    options: TrainOptions,
    *,
    seed: int,
    resume: str | Path | None = None,
) -> TrainState:
    """Roman-to-grapheme training on text of every registered language; only LoRA moves."""
    data = Task2Data.from_pairs(pairs, bridge.lm.config.scripts)
    return _run_bridge(bridge, [2] * options.steps, None, data, schedule, options, seed, None, resume)


def multitask_loop(
    bridge: Bridge,
    task1: Task1Data,
    task2: Task2Data,
    mix_ratio: float,
    total_steps: int,
    seed: int,
    *,
    schedule: Schedule,
    options: TrainOptions,
    romanizer: RomanizerModel | None = None,
    mode: str = "interleaved",
    resume: str | Path | None = None,
) -> TrainState:
    """Both tasks on one optimizer; the bridge is updated in place."""
    draws = task_draws(mix_ratio, total_steps, seed, mode)
    return _run_bridge(bridge, draws, task1, task2, schedule, replace(options, steps=total_steps), seed, romanizer, resume)


# ---------------------------------------------------------------------------
# Config-driven orchestration
# ---------------------------------------------------------------------------


@dataclass
class ZeroAvsrModels:
    romanizer: RomanizerModel
    lm: ToyLM | None = None
    bridge: Bridge | None = None


def options_from_config(section: Mapping, cfg: Mapping, out_dir: Path | None) -> TrainOptions:
    optimizer = cfg.get("schedule", {}).get("optimizer", {})
    return TrainOptions(
        steps=section["steps"],
        batch_size=section.get("batch_size", const.BATCH_SIZE),
        accumulation=section.get("accumulation", 1),
        log_interval=section.get("log_interval", const.LOG_INTERVAL),
        checkpoint_every=section.get("checkpoint_every", 0),
        audit_every=section.get("audit_every", 1),
        out_dir=out_dir,
        betas=tuple(optimizer.get("betas", const.ADAM_BETAS)),
        eps=optimizer.get("eps", const.ADAM_EPS),
        weight_decay=optimizer.get("weight_decay", const.WEIGHT_DECAY),
        progress=cfg.get("progress", False),
    )


def romanizer_config_from(section: Mapping, alphabet: RomanAlphabet | None = None) -> RomanizerConfig:
    keys = ("d_model", "n_layers", "n_heads", "d_ffn", "dropout", "visual_frontend", "use_positions", "d_audio_in", "d_video_in")
    return RomanizerConfig(alphabet=alphabet or RomanAlphabet(), **{k: section[k] for k in keys if k in section})


def noise_bank_from(section: Mapping, utterances: Sequence[Utterance]) -> NoiseBank | None:
    if not section.get("probability", 0.0) or not section.get("kinds"):
        return None
    return NoiseBank(section["kinds"], [u.audio_feats for u in utterances])


def run_romanizer_training(
    corpus: Corpus, langs: Iterable[str], cfg: Mapping, out_dir: Path | None, seed: int, resume: str | Path | None = None
) -> RomanizerModel:
    section = cfg["romanizer"]
    utterances = corpus.utterances("train", langs)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = RomanizerModel(romanizer_config_from(section))
    noise = cfg.get("noise", {})
    train_romanizer(
        model,
        utterances,
        schedule_from_config(cfg["schedule"]["romanizer"], section["steps"]),
        options_from_config(section, cfg, out_dir),
        seed=seed,
        modality_dropout=section.get("modality_dropout", const.MODALITY_DROPOUT),
        noise_prob=noise.get("probability", 0.0),
        snr_db=noise.get("snr_db", const.TRAIN_SNR_DB),
        noise_bank=noise_bank_from(noise, utterances),
        resume=resume,
    )
    return model


def lm_config_from(section: Mapping, corpus: Corpus) -> ToyLMConfig:
    keys = ("d_model", "n_layers", "n_heads", "d_ffn", "max_len", "dropout", "tie_embeddings")
    return ToyLMConfig.for_languages(corpus.languages.values(), **{k: section[k] for k in keys if k in section})


def run_lm_pretraining(
    corpus: Corpus, cfg: Mapping, out_dir: Path | None, seed: int, resume: str | Path | None = None
) -> ToyLM:
    section = cfg["lm"]
    return pretrain_toy_lm(
        corpus.text_pairs("train"),
        lm_config_from(section, corpus),
        section["steps"],
        seed,
        options=options_from_config(section, cfg, out_dir),
        schedule=schedule_from_config(cfg["schedule"]["lm"], section["steps"]),
        pair_fraction=section.get("pair_fraction", const.LM_PAIR_FRACTION),
        resume=resume,
    )


def run_bridge_training(
    romanizer: RomanizerModel,
    lm: ToyLM,
    corpus: Corpus,
    seen: Iterable[str],
    cfg: Mapping,
    out_dir: Path | None,
    seed: int,
    *,
    text_langs: Iterable[str] | None = None,
    allowed_speech: Iterable[str] | None = None,
    resume: str | Path | None = None,
) -> Bridge:
    """Task 1 on seen speech plus Task 2 on text; text_langs narrows Task 2 for ablations.

    allowed_speech is the set the romanizer was trained on; Task-1 speech
    outside it raises SeenLanguageViolation.
    """
    section = cfg["bridge"]
    seen = list(seen)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, 4))
        bridge = Bridge(
            lm,
            romanizer.config.d_model,
            section.get("lora_rank", const.LORA_RANK),
            section.get("lora_alpha", const.LORA_ALPHA),
            section.get("lora_targets", const.LORA_TARGETS),
        )
    allowed = seen if allowed_speech is None else list(allowed_speech)
    task1 = Task1Data.from_utterances(romanizer, corpus.utterances("train", seen), allowed)
    pairs = corpus.text_pairs("train", text_langs)
    registered = lm.config.scripts if text_langs is None else text_langs
    task2 = Task2Data.from_pairs(pairs, registered)
    multitask_loop(
        bridge,
        task1,
        task2,
        section.get("mix_ratio", const.MIX_RATIO),
        section["steps"],
        seed,
        schedule=schedule_from_config(cfg["schedule"]["bridge"], section["steps"]),
        options=options_from_config(section, cfg, out_dir),
        romanizer=romanizer,
        mode=section.get("mode", "interleaved"),
        resume=resume,
    )
    return bridge


def train_zero_avsr(
    corpus: Corpus,
    seen: Iterable[str],
    cfg: Mapping,
    out_dir: Path | None,
    seed: int,
    *,
    unified: bool = True,
    text_langs: Iterable[str] | None = None,
) -> ZeroAvsrModels:
    """Romanizer on seen speech, LM on all text, then the bridge when unified is set."""
    seen = list(seen)
    sub = (lambda name: out_dir / name) if out_dir else (lambda name: None)
    romanizer = run_romanizer_training(corpus, seen, cfg, sub("romanizer"), seed)
    if not unified:
        return ZeroAvsrModels(romanizer)
    lm = run_lm_pretraining(corpus, cfg, sub("lm"), seed)
    bridge = run_bridge_training(romanizer, lm, corpus, seen, cfg, sub("bridge"), seed, text_langs=text_langs)
    return ZeroAvsrModels(romanizer, lm, bridge)
