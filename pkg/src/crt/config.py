"""Flat key/value experiment configuration with a closed schema.

The format is one ``key = value`` pair per line, ``#`` comments allowed.
Every key must appear in the schema; unknown keys are rejected by name,
because a silently ignored typo is the usual way an experiment stops being
the experiment its config claims.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimizerConfig

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    # model
    "layers": (int, 2),
    "d_m": (int, 64),
    "heads": (int, 2),
    "seg_len": (int, 32),
    "vocab": (int, 0),
    "d_ff": (int, 0),
    "cell": (str, "gru"),
    "use_memory_rnn": (bool, True),
    "use_pos_rnn": (bool, True),
    "bptt_window": (int, 2),
    "tie_output": (bool, False),
    "dropout": (float, 0.0),
    "ffn_activation": (str, "gelu"),
    "seed": (int, 0),
    # optimizer / schedule
    "lr": (float, 3e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "clip_norm": (float, 1.0),
    "warmup_steps": (int, 100),
    "steps": (int, 1000),
    "batch_lanes": (int, 4),
    "eval_every": (int, 250),
    # data
    "task": (str, "text"),          # "text" | "recall"
    "corpus": (str, ""),
    "tokenizer": (str, "char"),     # "char" | "word"
    "recall_k": (int, 8),
    "recall_gap": (int, 1),
    "recall_episodes": (int, 4000),
    # artifacts
    "checkpoint": (str, ""),
    "run_id": (str, ""),
    # analysis subcommands
    "bound_seeds": (int, 100),
    "flops_kinds": (str, "transformer,transformer-xl,crt-gru"),
    "flops_grid": (str, "3,17,512;3,35,512;3,70,512"),
}

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def default_config() -> dict:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _parse_value(key: str, raw: str):
    kind, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind is bool:
            try:
                return _BOOL_WORDS[raw.lower()]
            except KeyError:
                raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} is not a {kind.__name__}") from None


def set_key(cfg: dict, key: str, raw: str) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _parse_value(key, raw)


def load_config(path) -> dict:
    """Defaults overlaid with the file's assignments."""
    cfg = default_config()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg


def apply_overrides(cfg: dict, pairs) -> dict:
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, raw = pair.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg


def render_config(cfg: dict) -> str:
    return "".join(f"{key} = {cfg[key]}\n" for key in SCHEMA if key in cfg)


def to_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        layers=cfg["layers"], d_m=cfg["d_m"], heads=cfg["heads"], n=cfg["seg_len"],
        vocab=cfg["vocab"], d_ff=cfg["d_ff"], cell_kind=cfg["cell"],
        use_memory_rnn=cfg["use_memory_rnn"], use_pos_rnn=cfg["use_pos_rnn"],
        bptt_window=cfg["bptt_window"], tie_output=cfg["tie_output"],
        dropout=cfg["dropout"], ffn_activation=cfg["ffn_activation"], seed=cfg["seed"])


def to_optimizer_config(cfg: dict) -> OptimizerConfig:
    return OptimizerConfig(
        lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], adam_eps=cfg["adam_eps"],
        clip_norm=cfg["clip_norm"], warmup_steps=cfg["warmup_steps"], steps=cfg["steps"],
        batch_lanes=cfg["batch_lanes"], eval_every=cfg["eval_every"])


@dataclass
class DataConfig:
    task: str
    corpus: str
    tokenizer: str
    recall_k: int
    recall_gap: int
    recall_episodes: int


def to_data_config(cfg: dict) -> DataConfig:
    if cfg["task"] not in ("text", "recall"):
        raise ConfigError(f"unknown task {cfg['task']!r}")
    if cfg["tokenizer"] not in ("char", "word"):
        raise ConfigError(f"unknown tokenizer {cfg['tokenizer']!r}")
    return DataConfig(task=cfg["task"], corpus=cfg["corpus"], tokenizer=cfg["tokenizer"],
                      recall_k=cfg["recall_k"], recall_gap=cfg["recall_gap"],
                      recall_episodes=cfg["recall_episodes"])
