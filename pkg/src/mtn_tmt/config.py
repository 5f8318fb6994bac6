"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

TEXT_ONLY, VIDEO_TEXT = "text-only", "video-text"
STREAMS = ("question", "dialog", "caption", "summary", "audio", "video")
PERCEPTION = ("audio", "video")

HELP = {
    "d_model": "model width d",
    "heads": "attention heads (must divide d_model)",
    "d_ff": "feed-forward width; 0 means 4 * d_model",
    "vct_depth": "video-caption translator depth M",
    "dst_depth": "dialog-summary translator and hierarchical history encoder depth N",
    "answer_depth": "answer decoder depth",
    "qae_depth": "query-aware auto-encoder depth",
    "keep_prob": "dropout keep probability",
    "batch_size": "examples per batch",
    "epochs": "training epochs",
    "warmup": "Noam warmup steps (full-scale corpus value: 13000)",
    "lr_factor": "multiplier on the Noam learning rate",
    "adam_beta1": "Adam first-moment decay",
    "adam_beta2": "Adam second-moment decay",
    "adam_eps": "Adam epsilon",
    "clip_norm": "global gradient-norm clip; 0 disables",
    "alpha": "weight of the caption translation loss",
    "beta": "weight of the summary translation loss",
    "decay_weights": "multiply alpha and beta by 0.9 every 10 epochs",
    "task": "text-only or video-text",
    "use_vct": "video-caption translator: auto, on or off",
    "use_dst": "dialog-summary translator: auto, on or off",
    "memory_order": "answer-decoder cross-attention order",
    "scale_embeddings": "scale token embeddings by sqrt(d_model)",
    "positional": "add sinusoidal positions to token embeddings",
    "video_width": "video feature width; 0 reads it from the dataset manifest",
    "audio_width": "audio feature width; 0 reads it from the dataset manifest",
    "seed": "random seed",
    "max_answer_len": "generation length limit",
    "min_count": "vocabulary minimum token count",
    "train_data": "training dataset directory",
    "dev_data": "dev dataset directory",
    "vocab": "vocabulary file",
}


@dataclass
class RunConfig:
    d_model: int = 128
    heads: int = 4
    d_ff: int = 0
    vct_depth: int = 2
    dst_depth: int = 1
    answer_depth: int = 3
    qae_depth: int = 1
    keep_prob: float = 0.5
    batch_size: int = 32
    epochs: int = 35
    warmup: int = 400
    lr_factor: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    alpha: float = 0.3
    beta: float = 0.8
    decay_weights: bool = False
    task: str = VIDEO_TEXT
    use_vct: str = "auto"
    use_dst: str = "auto"
    memory_order: str = ",".join(STREAMS)
    scale_embeddings: bool = True
    positional: bool = True
    video_width: int = 0
    audio_width: int = 0
    seed: int = 0
    max_answer_len: int = 20
    min_count: int = 1
    train_data: str = ""
    dev_data: str = ""
    vocab: str = ""

    def __post_init__(self):
        self.validate()

    # -- derived ---------------------------------------------------------------

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def vct_enabled(self) -> bool:
        return self.use_vct == "on" or (self.use_vct == "auto" and self.task == VIDEO_TEXT)

    @property
    def dst_enabled(self) -> bool:
        return self.use_dst in ("auto", "on")

    @property
    def streams(self) -> list[str]:
        """Answer-decoder memories in cross-attention order for the task mode."""
        order = [s.strip() for s in self.memory_order.split(",") if s.strip()]
        if self.task == TEXT_ONLY:
            order = [s for s in order if s not in PERCEPTION]
        return order

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
        if self.task not in (TEXT_ONLY, VIDEO_TEXT):
            raise ConfigError(f"task must be {TEXT_ONLY} or {VIDEO_TEXT}, got {self.task!r}")
        for key in ("use_vct", "use_dst"):
            if getattr(self, key) not in ("auto", "on", "off"):
                raise ConfigError(f"{key} must be auto, on or off")
        if self.task == TEXT_ONLY and self.use_vct == "on":
            raise ConfigError("the video-caption translator needs video input; task is text-only")
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError("d_model must be even and >= 2")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        for key in ("vct_depth", "dst_depth", "answer_depth", "qae_depth", "batch_size", "warmup",
                    "max_answer_len", "min_count"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("epochs", "d_ff", "video_width", "audio_width", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        order = [s.strip() for s in self.memory_order.split(",") if s.strip()]
        if sorted(order) != sorted(STREAMS):
            raise ConfigError(f"memory_order must be a permutation of {','.join(STREAMS)}")

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, **overrides)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {k: _coerce(known[k], v) for k, v in values.items()}
        return cls(**parsed)

    def replace(self, **changes) -> "RunConfig":
        return self.from_mapping({**self.to_dict(), **{k: v for k, v in changes.items() if v is not None}})


def _coerce(field: dataclasses.Field, value):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if not isinstance(value, str):
        if kind == "float" and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    try:
        if kind == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{field.name}: cannot parse {value!r} as {kind}") from None
    return value
