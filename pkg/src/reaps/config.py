"""Run configuration and its flat ``key = value`` text form.

Grammar, one setting per line::

    # comment
    section.key = value
    key = value          # bare key, allowed when the name is unique

Tuples are comma separated (``model.channels = 16,32,64,64``). The bare key
``seed`` sets every seed at once. Unknown keys are errors; missing keys keep
their defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .synthdata import SynthSpec

ABLATIONS = ("full", "wo-part", "wo-attend")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 64)
    pool_after: tuple = (0, 1, 2)
    seq_len: int = 8  # N
    hidden: int = 64  # U, split evenly over the two LSTM directions
    crop_size: int = 64
    gap_mode: str = "sum"
    head_init: str = "normal"
    init_gain: float = 1.0
    input_offset: float = 0.5  # subtracted from [0, 1] pixels before the first conv
    joint_block_norm: float = 16.0  # each block of F rescaled to this L2 norm; 0 keeps raw values
    ablation: str = "full"
    stages: int = 1

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.gap_mode not in ("sum", "mean"):
            raise ValueError(f"gap_mode must be sum or mean, got {self.gap_mode!r}")
        if self.joint_block_norm < 0:
            raise ValueError(f"joint_block_norm must be >= 0, got {self.joint_block_norm}")
        if self.hidden % 2:
            raise ValueError(f"hidden size must be even, got {self.hidden}")

    @property
    def part_branch(self) -> bool:
        return self.ablation != "wo-part"


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    tau: float = 0.1
    lr0: float = 0.001
    momentum: float = 0.9
    decay_every: int = 60
    decay_factor: float = 0.1
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    final_head_mode: str = "joint"
    post_epochs: int = 10  # head-only epochs when final_head_mode = post

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "tau", "lr0", "momentum", "decay_factor"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v != v or v in (float("inf"), float("-inf")):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.final_head_mode not in ("joint", "post"):
            raise ValueError(f"final_head_mode must be joint or post, got {self.final_head_mode!r}")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("decay_every and batch_size must be positive, epochs non-negative")


def desk_train_config(**overrides) -> TrainConfig:
    """Paper hyper-parameters with the desk-scale schedule (decay every 20 epochs)."""
    return TrainConfig(**{"decay_every": 20, **overrides})


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    synth: SynthSpec = field(default_factory=SynthSpec)
    data_dir: str = ""  # external dataset root; empty means synthetic
    out: str = "runs/reaps"

    SECTIONS = ("model", "train", "synth")

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if not self.data_dir:
            self.synth.validate()

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        if key == "seed":
            seed = int(raw)
            self.train.seed = seed
            self.synth.seed = seed
            return
        if key in ("data_dir", "out"):
            setattr(self, key, raw.strip())
            return
        section, name = self._resolve(key)
        obj = getattr(self, section)
        current = getattr(obj, name)
        setattr(obj, name, _coerce(raw, current, key))

    def _resolve(self, key: str) -> tuple[str, str]:
        if "." in key:
            section, name = key.split(".", 1)
            if section not in self.SECTIONS or name not in _field_names(getattr(self, section)):
                raise KeyError(f"unknown config key {key!r}")
            return section, name
        hits = [s for s in self.SECTIONS if key in _field_names(getattr(self, s))]
        if not hits:
            raise KeyError(f"unknown config key {key!r}")
        if len(hits) > 1:
            raise KeyError(f"ambiguous config key {key!r}; qualify it as one of {[f'{s}.{key}' for s in hits]}")
        return hits[0], key

    def to_text(self) -> str:
        lines = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_render(getattr(obj, f.name))}")
        lines.append(f"data_dir = {self.data_dir}")
        lines.append(f"out = {self.out}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = base or cls()
        for key, value in parse_pairs(text):
            cfg.set(key, value)
        return cfg


def _field_names(obj) -> set:
    return {f.name for f in dataclasses.fields(obj)}


def parse_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {raw!r} ({type(current).__name__} expected)") from exc
    return raw
