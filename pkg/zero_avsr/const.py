"""Constants for the Zero-AVSR desk-scale pipeline."""
from string import ascii_lowercase

CHECKPOINT_FORMAT_VERSION = 1

# Roman output vocabulary: 26 letters, space, apostrophe. Blank takes id 0.
ROMAN_TOKENS = tuple(ascii_lowercase) + (" ", "'")
BLANK_ID = 0

# Bump when normalize_text rules change so old reports stay comparable.
NORMALIZER_VERSION = "1"

# Audio front end
SAMPLE_RATE = 16000
VIDEO_FPS = 25
FBANK_WINDOW_MS = 25
FBANK_HOP_MS = 10
FBANK_N_MELS = 26
FBANK_STACK = 4
FBANK_FLOOR = 1e-10
AUDIO_FEATURE_DIM = FBANK_N_MELS * FBANK_STACK
MAX_SYNC_DRIFT = 2

# Video front end
MOUTH_CROP_SIZE = 96
VIDEO_CROP_SIZE = 88
FLIP_PROBABILITY = 0.5

# Synthetic corpus
DEFAULT_LEXICON_SIZE = 200
MIN_WORD_GRAPHEMES = 2
MAX_WORD_GRAPHEMES = 6
MIN_CHAR_FRAMES = 2
MAX_CHAR_FRAMES = 5
MAX_ROMAN_UNIT = 3
LEXICON_RETRIES = 50
SYNTH_VIDEO_DIM = 32
N_VISEMES = 10
VISEME_OFFSET_SCALE = 0.35
PROTOTYPE_SEED = 20250101
DEFAULT_LID_THRESHOLD = 0.95

# Feature store: <ref>.audio.bin / <ref>.video.bin, uint32 header (T, D) then float32 rows.
FEATURE_HEADER_DTYPE = "<u4"
FEATURE_DTYPE = "<f4"
AUDIO_SUFFIX = ".audio.bin"
VIDEO_SUFFIX = ".video.bin"

# Lowercase, NFC-stable, case-free letter blocks; one per toy language so
# grapheme inventories never overlap.
SCRIPT_BLOCKS = (
    ("greek", 0x03B1, 25),
    ("cyrillic", 0x0430, 32),
    ("armenian", 0x0561, 38),
    ("hebrew", 0x05D0, 27),
    ("georgian", 0x10D0, 33),
    ("hiragana", 0x3041, 86),
    ("ethiopic", 0x1200, 64),
    ("katakana", 0x30A1, 86),
)

# Syllable shapes used for grapheme romanizations, grouped per family.
VOWELS = "aeiou"
CONSONANTS = "bcdfghjklmnpqrstvwxyz"
FAMILY_CONSONANTS = {
    "romance": "bcdflmnprstv",
    "slavic": "bdgkmnprstvz",
    "semitic": "bdhklmnqrstw",
    "isolate": "bcdfghjklmnpqrstvwxyz",
}
DEFAULT_FAMILY = "isolate"

# Romanizer (toy defaults; the full-size setting is 1024/24/16/4096)
D_MODEL = 64
N_LAYERS = 4
N_HEADS = 4
D_FFN = 256
DROPOUT = 0.1
MODALITY_DROPOUT = 0.25
NOISE_PROBABILITY = 0.25
TRAIN_SNR_DB = 0.0
MAX_POSITIONS = 4096

# Schedules
TRISTAGE_INIT_SCALE = 0.01
TRISTAGE_FINAL_SCALE = 0.05
PEAK_LR = 1e-4
# desk-scale peaks for models trained from scratch
LM_PEAK_LR = 3e-3
BRIDGE_PEAK_LR = 1e-3
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01
# step counts at one hundredth of the full-size recipe
TRISTAGE_WARMUP = 100
TRISTAGE_HOLD = 400
TRISTAGE_DECAY = 500
COSINE_WARMUP = 5
ROMANIZER_PEAK_LR = 1e-3
BATCH_SIZE = 8
LOG_INTERVAL = 10

# Toy LM
LM_D_MODEL = 64
LM_N_LAYERS = 2
LM_N_HEADS = 4
LM_D_FFN = 256
LM_MAX_LEN = 512
LM_DROPOUT = 0.0
# share of pretraining sequences that are roman -> grapheme pairs
LM_PAIR_FRACTION = 0.5
LANG_TAG = "<{lang}>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
PAD = "<pad>"
CONTROL_TOKENS = (PAD, BOS, EOS, SEP)

# LoRA on attention q/v projections
LORA_RANK = 8
LORA_ALPHA = 16.0
LORA_TARGETS = ("q_proj", "v_proj")

# Unified decoding
BEAM_WIDTH = 2
TEMPERATURE = 0.3
MAX_DECODE_LEN = 128
MIX_RATIO = 0.5

# Remote chat backend
ENV_API_KEY = "ZEROAVSR_API_KEY"
ENV_API_KEY_FALLBACK = "OPENAI_API_KEY"
ENV_API_BASE = "ZEROAVSR_API_BASE"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_REMOTE_MODEL = "gpt-4o-mini"
DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 1.0
DEFAULT_IN_FLIGHT = 4
CACHE_FILENAME = "remote_cache.jsonl"

PROMPT_VERSION = "1"
TRANSCRIPT_OPEN = "<transcription>"
TRANSCRIPT_CLOSE = "</transcription>"
DEROMANIZE_TEMPLATE = (
    "Convert the following romanized {language} text into {language} written "
    "in its native script. Reply with the result only, wrapped as "
    + TRANSCRIPT_OPEN + "..." + TRANSCRIPT_CLOSE + ".\n"
    "Roman text: {roman}"
)
ROMANIZE_TEMPLATE = (
    "Romanize the following {language} text into unaccented lowercase Roman "
    "letters as it is pronounced. Reply with the result only, wrapped as "
    + TRANSCRIPT_OPEN + "..." + TRANSCRIPT_CLOSE + ".\n"
    "Text: {text}"
)

# Names used inside prompts; toy languages register theirs at load time.
LANGUAGE_NAMES = {
    "ara": "Arabic",
    "deu": "German",
    "ell": "Greek",
    "eng": "English",
    "spa": "Spanish",
    "fra": "French",
    "ita": "Italian",
    "por": "Portuguese",
    "rus": "Russian",
}

# Evaluation
SNR_LIST = (-5.0, 0.0, 5.0, 10.0, 15.0)
MODALITIES = ("A", "AV")

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_BACKEND = 4

RESOLVED_CONFIG_FILENAME = "config.resolved.yaml"
METRICS_FILENAME = "metrics.csv"
LANGUAGES_FILENAME = "languages.json"

# Default five-language toy setup for gen-corpus
DEFAULT_TOY_LANGUAGES = (
    {"code": "grk", "script": "greek", "family": "romance"},
    {"code": "cyr", "script": "cyrillic", "family": "slavic"},
    {"code": "arm", "script": "armenian", "family": "romance"},
    {"code": "heb", "script": "hebrew", "family": "semitic"},
    {"code": "geo", "script": "georgian", "family": "slavic"},
)
DEFAULT_N_GRAPHEMES = 20
EVAL_MODES = ("cascaded", "unified", "reconstruction", "noise_sweep", "zero_shot", "error_breakdown", "compare_backends", "ablation")
