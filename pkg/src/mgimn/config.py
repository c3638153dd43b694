"""Run configuration: a flat ``key = value`` text format with typed defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .episodes import EpisodeSpec
from .errors import ConfigError
from .matching import AblationFlags
from .model import KINDS, ModelConfig
from .rtc import MODES, RtcConfig

LR_RANGE = (1e-5, 1e-4)
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass
class RunConfig:
    # model
    model: str = "mgimn"
    hidden: int = 128
    layers: int = 2
    heads: int = 2
    max_seq_len: int = 32
    dropout: float = 0.1
    use_instance: bool = True
    use_class: bool = True
    use_episode: bool = True
    # episodes
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 5
    # training
    lr: float = 1e-4
    allow_any_lr: bool = False
    steps: int = 2000
    seed: int = 0
    split_seed: int = 0
    gfsl: bool = False
    val_every: int = 100
    val_episodes: int = 100
    # evaluation
    eval_episodes: int = 500
    retrieve_n: int = 10
    shots_k: int = 5
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    retrieval: str = "mean-vector"
    timing_warmup: int = 10
    timing_queries: int = 100
    # sweep
    sweep_split_seeds: int = 5
    sweep_init_seeds: int = 3
    # data
    dataset: str = ""
    min_per_class: int = 6
    synth_classes: int = 30
    synth_per_class: int = 40
    synth_vocab: int = 180
    synth_noise: float = 0.3
    synth_signature: int = 3
    synth_seed: int = 0
    # paths
    checkpoint: str = ""
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in KINDS:
            raise ConfigError(f"model must be one of {', '.join(KINDS)}, got {self.model!r}")
        if self.retrieval not in MODES:
            raise ConfigError(f"retrieval must be one of {', '.join(MODES)}, got {self.retrieval!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        lo, hi = LR_RANGE
        if not self.allow_any_lr and not lo <= self.lr <= hi:
            raise ConfigError(f"lr {self.lr:g} outside [{lo:g}, {hi:g}]; set allow_any_lr = true to override")
        for name in ("eval_episodes", "val_every", "val_episodes", "sweep_split_seeds",
                     "sweep_init_seeds", "timing_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.steps < 0 or self.timing_warmup < 0:
            raise ConfigError("steps and timing_warmup must be non-negative")
        self.model_config()
        self.episode_spec()
        self.rtc_config()
        return self

    def flags(self):
        return AblationFlags(self.use_instance, self.use_class, self.use_episode)

    def model_config(self):
        return ModelConfig(kind=self.model, hidden=self.hidden, layers=self.layers, heads=self.heads,
                           max_seq_len=self.max_seq_len, dropout=self.dropout, flags=self.flags())

    def episode_spec(self):
        return EpisodeSpec(self.n_way, self.k_shot, self.n_query)

    def rtc_config(self):
        return RtcConfig(retrieve_n=self.retrieve_n, shots_k=self.shots_k, k1=self.bm25_k1,
                         b=self.bm25_b, mode=self.retrieval)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


KEYS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = type(KEYS[key].default)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def parse_assignments(lines, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or strings)."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_assignments(fh, str(path)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values)
