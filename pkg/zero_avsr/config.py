"""Run configuration: YAML file, dotted overrides, voluptuous validation.

Every section is optional; missing keys take their defaults from const.py.
The resolved document is what gets written next to a run's outputs, and its
SHA-256 is the config hash carried in evaluation reports.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import voluptuous as vol
import yaml
from voluptuous.humanize import humanize_error

from . import const
from .av_frontend import NoiseKind
from .exceptions import ConfigError
from .llm_bridge import DeromanizerKind
from .synth_corpus import SPLITS

_LOGGER = logging.getLogger(__name__)

POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
NON_NEGATIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=0))
POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0))
PROBABILITY = vol.All(vol.Coerce(float), vol.Range(min=0, max=1))
OPEN_UNIT = vol.All(vol.Coerce(float), vol.Range(min=0, max=1, min_included=False, max_included=False))
LANG_CODE = vol.All(str, vol.Length(min=1))
OPTIONAL_STR = vol.Any(None, str)

LANGUAGE_SCHEMA = vol.Schema(
    {
        vol.Required("code"): LANG_CODE,
        vol.Required("script"): vol.In([name for name, _, _ in const.SCRIPT_BLOCKS]),
        vol.Optional("family", default=const.DEFAULT_FAMILY): vol.In(list(const.FAMILY_CONSONANTS)),
        vol.Optional("seed"): vol.Coerce(int),
    }
)

CORPUS_SCHEMA = vol.Schema(
    {
        vol.Optional("languages", default=lambda: [dict(l) for l in const.DEFAULT_TOY_LANGUAGES]): vol.All(
            [LANGUAGE_SCHEMA], vol.Length(min=1)
        ),
        vol.Optional("n_graphemes", default=const.DEFAULT_N_GRAPHEMES): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("lexicon_size", default=const.DEFAULT_LEXICON_SIZE): POSITIVE_INT,
        vol.Optional("max_roman_len", default=const.MAX_ROMAN_UNIT): vol.All(vol.Coerce(int), vol.Range(min=1, max=3)),
        vol.Optional("utts_per_split", default=lambda: {"train": 400, "valid": 40, "test": 60}): {
            vol.In(SPLITS): NON_NEGATIVE_INT
        },
        vol.Optional("text_per_split", default=lambda: {"train": 1500, "test": 100}): {
            vol.In(("train", "test")): NON_NEGATIVE_INT
        },
        vol.Optional("max_words", default=4): POSITIVE_INT,
        vol.Optional("noise_sigma", default=0.5): NON_NEGATIVE_FLOAT,
        vol.Optional("lid_threshold", default=const.DEFAULT_LID_THRESHOLD): PROBABILITY,
        vol.Optional("lid_scale", default=0.02): POSITIVE_FLOAT,
    }
)

LANGUAGES_SCHEMA = vol.Schema(
    {
        # empty seen list: every corpus language not listed as unseen
        vol.Optional("seen", default=list): [LANG_CODE],
        vol.Optional("unseen", default=list): [LANG_CODE],
        vol.Optional("dominant", default=None): OPTIONAL_STR,
    }
)

TRAIN_KEYS = {
    vol.Optional("batch_size", default=const.BATCH_SIZE): POSITIVE_INT,
    vol.Optional("accumulation", default=1): POSITIVE_INT,
    vol.Optional("log_interval", default=const.LOG_INTERVAL): POSITIVE_INT,
    vol.Optional("checkpoint_every", default=0): NON_NEGATIVE_INT,
}

ROMANIZER_SCHEMA = vol.Schema(
    {
        vol.Optional("d_model", default=const.D_MODEL): POSITIVE_INT,
        vol.Optional("n_layers", default=const.N_LAYERS): NON_NEGATIVE_INT,
        vol.Optional("n_heads", default=const.N_HEADS): POSITIVE_INT,
        vol.Optional("d_ffn", default=const.D_FFN): POSITIVE_INT,
        vol.Optional("dropout", default=const.DROPOUT): vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)),
        vol.Optional("visual_frontend", default="affine"): vol.In(("affine", "conv")),
        vol.Optional("use_positions", default=True): bool,
        vol.Optional("modality_dropout", default=const.MODALITY_DROPOUT): PROBABILITY,
        vol.Optional("steps", default=1000): NON_NEGATIVE_INT,
        **TRAIN_KEYS,
    }
)

LM_SCHEMA = vol.Schema(
    {
        vol.Optional("d_model", default=const.LM_D_MODEL): POSITIVE_INT,
        vol.Optional("n_layers", default=const.LM_N_LAYERS): POSITIVE_INT,
        vol.Optional("n_heads", default=const.LM_N_HEADS): POSITIVE_INT,
        vol.Optional("d_ffn", default=const.LM_D_FFN): POSITIVE_INT,
        vol.Optional("max_len", default=const.LM_MAX_LEN): POSITIVE_INT,
        vol.Optional("dropout", default=const.LM_DROPOUT): vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)),
        vol.Optional("tie_embeddings", default=False): bool,
        vol.Optional("pair_fraction", default=const.LM_PAIR_FRACTION): PROBABILITY,
        vol.Optional("steps", default=2000): NON_NEGATIVE_INT,
        **TRAIN_KEYS,
    }
)

BRIDGE_SCHEMA = vol.Schema(
    {
        vol.Optional("lora_rank", default=const.LORA_RANK): POSITIVE_INT,
        vol.Optional("lora_alpha", default=const.LORA_ALPHA): POSITIVE_FLOAT,
        vol.Optional("lora_targets", default=lambda: list(const.LORA_TARGETS)): vol.All([str], vol.Length(min=1)),
        vol.Optional("mix_ratio", default=const.MIX_RATIO): OPEN_UNIT,
        vol.Optional("mode", default="interleaved"): vol.In(("interleaved", "sequential")),
        vol.Optional("audit_every", default=1): POSITIVE_INT,
        vol.Optional("steps", default=1000): NON_NEGATIVE_INT,
        **TRAIN_KEYS,
    }
)

TRISTAGE_SCHEMA = vol.Schema(
    {
        vol.Optional("kind", default="tristage"): "tristage",
        vol.Optional("warmup_steps", default=const.TRISTAGE_WARMUP): NON_NEGATIVE_INT,
        vol.Optional("hold_steps", default=const.TRISTAGE_HOLD): NON_NEGATIVE_INT,
        vol.Optional("decay_steps", default=const.TRISTAGE_DECAY): NON_NEGATIVE_INT,
        vol.Optional("peak_lr", default=const.ROMANIZER_PEAK_LR): POSITIVE_FLOAT,
        vol.Optional("init_scale", default=const.TRISTAGE_INIT_SCALE): NON_NEGATIVE_FLOAT,
        vol.Optional("final_scale", default=const.TRISTAGE_FINAL_SCALE): POSITIVE_FLOAT,
    }
)


def _cosine_schema(peak_lr: float) -> vol.Schema:
    return vol.Schema(
        {
            vol.Optional("kind", default="cosine"): "cosine",
            vol.Optional("warmup_steps", default=const.COSINE_WARMUP): NON_NEGATIVE_INT,
            vol.Optional("peak_lr", default=peak_lr): POSITIVE_FLOAT,
        }
    )


SCHEDULE_SCHEMA = vol.Schema(
    {
        vol.Optional("romanizer", default=dict): vol.Any(TRISTAGE_SCHEMA, _cosine_schema(const.ROMANIZER_PEAK_LR)),
        vol.Optional("lm", default=dict): _cosine_schema(const.LM_PEAK_LR),
        vol.Optional("bridge", default=dict): _cosine_schema(const.BRIDGE_PEAK_LR),
        vol.Optional("optimizer", default=dict): {
            vol.Optional("betas", default=lambda: list(const.ADAM_BETAS)): vol.All([vol.Coerce(float)], vol.Length(min=2, max=2)),
            vol.Optional("eps", default=const.ADAM_EPS): POSITIVE_FLOAT,
            vol.Optional("weight_decay", default=const.WEIGHT_DECAY): NON_NEGATIVE_FLOAT,
        },
    }
)

NOISE_SCHEMA = vol.Schema(
    {
        vol.Optional("probability", default=const.NOISE_PROBABILITY): PROBABILITY,
        vol.Optional("snr_db", default=const.TRAIN_SNR_DB): vol.Coerce(float),
        vol.Optional("kinds", default=lambda: [k.value for k in NoiseKind]): [vol.In([k.value for k in NoiseKind])],
    }
)

BACKEND_SCHEMA = vol.Schema(
    {
        vol.Optional("kind", default=DeromanizerKind.LEXICON_ORACLE.value): vol.In([k.value for k in DeromanizerKind]),
        vol.Optional("endpoint", default=None): OPTIONAL_STR,
        vol.Optional("model", default=const.DEFAULT_REMOTE_MODEL): str,
        vol.Optional("timeout", default=const.DEFAULT_TIMEOUT): POSITIVE_FLOAT,
        vol.Optional("retries", default=const.DEFAULT_RETRIES): NON_NEGATIVE_INT,
        vol.Optional("backoff", default=const.DEFAULT_BACKOFF): NON_NEGATIVE_FLOAT,
        vol.Optional("in_flight", default=const.DEFAULT_IN_FLIGHT): POSITIVE_INT,
        vol.Optional("temperature", default=0.0): NON_NEGATIVE_FLOAT,
        vol.Optional("cache", default=None): OPTIONAL_STR,
    }
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional("mode", default="cascaded"): vol.In(const.EVAL_MODES),
        vol.Optional("split", default="test"): vol.In(SPLITS),
        vol.Optional("max_utts", default=0): NON_NEGATIVE_INT,
        vol.Optional("modality", default="AV"): vol.In(("A", "V", "AV")),
        vol.Optional("beam_width", default=const.BEAM_WIDTH): POSITIVE_INT,
        vol.Optional("temperature", default=const.TEMPERATURE): POSITIVE_FLOAT,
        vol.Optional("max_len", default=const.MAX_DECODE_LEN): POSITIVE_INT,
        vol.Optional("snr_list", default=lambda: list(const.SNR_LIST)): vol.All([vol.Coerce(float)], vol.Length(min=1)),
        vol.Optional("modalities", default=lambda: list(const.MODALITIES)): vol.All(
            [vol.In(("A", "V", "AV"))], vol.Length(min=1)
        ),
        vol.Optional("unified", default=True): bool,
        vol.Optional("holdouts", default=list): [LANG_CODE],
        vol.Optional("seen_subsets", default=dict): {str: [LANG_CODE]},
        vol.Optional("backends", default=dict): {str: BACKEND_SCHEMA},
        vol.Optional("romanizer", default="model"): vol.In(("model", "oracle", "remote")),
    }
)

PATHS_SCHEMA = vol.Schema(
    {
        vol.Optional("corpus", default=None): OPTIONAL_STR,
        vol.Optional("romanizer", default=None): OPTIONAL_STR,
        vol.Optional("lm", default=None): OPTIONAL_STR,
        vol.Optional("bridge", default=None): OPTIONAL_STR,
        vol.Optional("resume", default=None): OPTIONAL_STR,
    }
)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("seed", default=0): vol.Coerce(int),
        vol.Optional("progress", default=False): bool,
        vol.Optional("corpus", default=dict): CORPUS_SCHEMA,
        vol.Optional("languages", default=dict): LANGUAGES_SCHEMA,
        vol.Optional("romanizer", default=dict): ROMANIZER_SCHEMA,
        vol.Optional("lm", default=dict): LM_SCHEMA,
        vol.Optional("bridge", default=dict): BRIDGE_SCHEMA,
        vol.Optional("schedule", default=dict): SCHEDULE_SCHEMA,
        vol.Optional("noise", default=dict): NOISE_SCHEMA,
        vol.Optional("backend", default=dict): BACKEND_SCHEMA,
        vol.Optional("eval", default=dict): EVAL_SCHEMA,
        vol.Optional("paths", default=dict): PATHS_SCHEMA,
    }
)


def load_yaml(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"{path} is not valid YAML: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return data


def parse_override(item: str) -> tuple[list[str], Any]:
    """'a.b=c' -> (['a', 'b'], c) with c read as a YAML scalar."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as err:
        raise ConfigError(f"override {item!r}: {err}") from err
    return key.strip().split("."), value


def apply_overrides(cfg: Mapping, overrides: Iterable[str]) -> dict:
    out = copy.deepcopy(dict(cfg))
    for item in overrides:
        keys, value = parse_override(item)
        node = out
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {key!r} is not a section")
            node = child
        node[keys[-1]] = value
    return out


def corpus_codes(cfg: Mapping) -> list[str]:
    return [entry["code"] for entry in cfg["corpus"]["languages"]]


def seen_languages(cfg: Mapping, available: Iterable[str] | None = None) -> list[str]:
    codes = list(available) if available is not None else corpus_codes(cfg)
    langs = cfg["languages"]
    if langs["seen"]:
        return list(langs["seen"])
    return [code for code in codes if code not in set(langs["unseen"])]


def _check_languages(cfg: Mapping) -> None:
    codes = corpus_codes(cfg)
    if len(set(codes)) != len(codes):
        raise ConfigError(f"duplicate language codes in corpus.languages: {codes}")
    langs = cfg["languages"]
    for key in ("seen", "unseen"):
        unknown = sorted(set(langs[key]) - set(codes))
        if unknown and cfg["paths"]["corpus"] is None:
            raise ConfigError(f"languages.{key} names codes not in corpus.languages: {unknown}")
    overlap = sorted(set(langs["seen"]) & set(langs["unseen"]))
    if overlap:
        raise ConfigError(f"languages {overlap} are listed as both seen and unseen")


def _check_shapes(cfg: Mapping) -> None:
    blocks = {name: size for name, _, size in const.SCRIPT_BLOCKS}
    n_graphemes = cfg["corpus"]["n_graphemes"]
    for entry in cfg["corpus"]["languages"]:
        if n_graphemes > blocks[entry["script"]]:
            raise ConfigError(
                f"corpus.n_graphemes={n_graphemes} exceeds the {blocks[entry['script']]} symbols "
                f"of the {entry['script']} block ({entry['code']})"
            )
    for section in ("romanizer", "lm"):
        d_model, n_heads = cfg[section]["d_model"], cfg[section]["n_heads"]
        if d_model % n_heads:
            raise ConfigError(f"{section}.d_model={d_model} is not divisible by {section}.n_heads={n_heads}")
    # rotary positions rotate channel pairs
    if (cfg["lm"]["d_model"] // cfg["lm"]["n_heads"]) % 2:
        raise ConfigError("lm.d_model / lm.n_heads must be even")


def validate(cfg: Mapping) -> dict:
    try:
        resolved = CONFIG_SCHEMA(copy.deepcopy(dict(cfg)))
    except vol.Invalid as err:
        raise ConfigError(humanize_error(dict(cfg), err)) from err
    _check_languages(resolved)
    _check_shapes(resolved)
    return resolved


def resolve_config(path: str | Path | None, overrides: Iterable[str] = (), seed: int | None = None) -> dict:
    cfg = apply_overrides(load_yaml(path), overrides)
    if seed is not None:
        cfg["seed"] = seed
    return validate(cfg)


def dump_config(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=True, allow_unicode=True, default_flow_style=False)


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


def write_resolved(cfg: Mapping, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / const.RESOLVED_CONFIG_FILENAME
    path.write_text(dump_config(cfg), encoding="utf-8")
    _LOGGER.info("Resolved config written to %s (hash %s)", path, config_hash(cfg)[:12])
    return path
