"""Run configuration: nested dataclasses addressed by dotted keys.

File grammar (parsed with :mod:`configparser`)::

    # comment
    [lm]
    lr = 0.01
    alpha = 0.5

    [graph]
    k = 10

The section name and key form the dotted key (``lm.lr``). Values are coerced
to the type of the matching field; tuples are comma-separated. Unknown
sections or keys are rejected with the closest valid key as a hint.
"""
from __future__ import annotations

import configparser
import dataclasses
import difflib
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LMConfig:
    lr: float = 0.01
    epochs: int = 200
    hidden_dim: int = 64
    dropout: float = 0.0
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    momentum: float = 0.0
    alpha: float = 0.5
    distill_mode: str = "soft"
    pl_ratio: float = 0.5


@dataclass(frozen=True)
class GSLMConfig:
    lr: float = 0.01
    epochs: int = 200
    hidden: int = 128
    dropout: float = 0.5
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    beta: float = 0.5
    pl_ratio: float = 0.5
    pl_mode: str = "argmax"
    target_mode: str = "hard"
    strategy: str = "implicit"
    gamma_smooth: float = 1.0
    gamma_degree: float = 1.0
    gamma_sparse: float = 0.1
    adjacency_lr: float = 0.01


@dataclass(frozen=True)
class GraphConfig:
    k: int = 10
    threshold: float = 0.0
    # fusion weight on the original graph in the TR scenario; TI always uses 0
    lam: float = 0.5
    refresh: str = "per_round"


@dataclass(frozen=True)
class FeaturesConfig:
    source: str = "raw"
    method: str = "tfidf"
    max_features: int = 500


@dataclass(frozen=True)
class TrainConfig:
    em_rounds: int = 2
    scenario: str = "TR"
    seed: int = 0
    lm: LMConfig = field(default_factory=LMConfig)
    gslm: GSLMConfig = field(default_factory=GSLMConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)

    def __post_init__(self):
        if self.em_rounds < 0:
            raise ConfigError("em_rounds must be >= 0")
        if self.scenario.upper() not in ("TR", "TI"):
            raise ConfigError(f"scenario must be TR or TI, got {self.scenario!r}")
        object.__setattr__(self, "scenario", self.scenario.upper())
        for name, v in (("lm.alpha", self.lm.alpha), ("gslm.beta", self.gslm.beta),
                        ("graph.lam", self.graph.lam)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.graph.refresh not in ("per_round", "once"):
            raise ConfigError("graph.refresh must be per_round or once")
        if self.features.source not in ("raw", "cleaned"):
            raise ConfigError("features.source must be raw or cleaned")


@dataclass(frozen=True)
class SplitConfig:
    train_ratio: float = 0.1
    val_ratio: float = 0.1


@dataclass(frozen=True)
class SynthConfig:
    nodes_per_class: int = 100
    num_classes: int = 2
    intra_edge_prob: float = 0.10
    inter_edge_prob: float = 0.01
    vocab_size: int = 600
    tokens_per_node: int = 6
    class_token_skew: float = 0.7


@dataclass(frozen=True)
class LLMConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    api_key_env: str = "LLM_API_KEY"
    max_inflight: int = 4
    max_retries: int = 5
    timeout_ms: int = 60000
    template: str = "summary_classify"
    task_description: str = "Classify the node into one of the dataset classes."
    key_factors: str = "Focus on task-relevant content; ignore boilerplate, links and formatting."


@dataclass(frozen=True)
class AttackConfig:
    strategy: str = "heterophily_add"
    rates: tuple = (0.0, 0.05, 0.10, 0.20)
    seeds: int = 5
    jobs: int = 1


@dataclass(frozen=True)
class RunConfig:
    """Every configurable key of the engine; ``train`` holds the EM settings."""

    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    llm: LLMConfig = field(default_factory=LLMConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    # sections of TrainConfig are exposed at the top level: lm.lr, gslm.beta, ...
    _TRAIN_SECTIONS = ("lm", "gslm", "graph", "features")

    def flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(TrainConfig):
            v = getattr(self.train, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f"train.{f.name}"] = v
        for section in ("split", "synth", "llm", "attack"):
            sub = getattr(self, section)
            for g in dataclasses.fields(sub):
                out[f"{section}.{g.name}"] = getattr(sub, g.name)
        return out

    @classmethod
    def valid_keys(cls) -> list[str]:
        return list(cls().flat())

    def updated(self, overrides: dict) -> "RunConfig":
        """Return a copy with dotted-key overrides applied (values may be strings)."""
        valid = self.flat()
        grouped: dict = {}
        for key, raw in overrides.items():
            if key not in valid:
                hint = difflib.get_close_matches(key, list(valid), n=1)
                msg = f"unknown config key {key!r}"
                raise ConfigError(msg + (f"; did you mean {hint[0]!r}?" if hint else ""))
            section, name = key.split(".", 1)
            grouped.setdefault(section, {})[name] = _coerce(raw, type(valid[key]), key)
        train = self.train
        train_kw = dict(grouped.pop("train", {}))
        for section in self._TRAIN_SECTIONS:
            if section in grouped:
                train_kw[section] = dataclasses.replace(getattr(train, section), **grouped.pop(section))
        new = dataclasses.replace(self, train=dataclasses.replace(train, **train_kw))
        for section, kw in grouped.items():
            new = dataclasses.replace(new, **{section: dataclasses.replace(getattr(new, section), **kw)})
        return new

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls().updated(parse_config_text(Path(path).read_text()))

    def to_text(self) -> str:
        lines, current = [], None
        for key, value in self.flat().items():
            section, name = key.split(".", 1)
            if section != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                current = section
            lines.append(f"{name} = {_render(value)}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return {f"{s}.{k}": v for s in parser.sections() for k, v in parser.items(s)}


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        return tuple(raw) if typ is tuple else typ(raw)
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {typ.__name__})") from None


# --- seeds --------------------------------------------------------------------

def derive_seed(root: int, *keys) -> int:
    """Child seed for a named stream.

    String keys are mapped through CRC-32, then ``SeedSequence([root, *keys])``
    produces one 32-bit word. Identical ``(root, keys)`` always give the same seed.
    """
    words = [int(root)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return int(np.random.SeedSequence(words).generate_state(1)[0])

