"""Run configuration: a flat-section key-value file plus CLI overrides.

Sections map one-to-one onto the stage configs. Every key can be overridden
on the command line as `--section.key=value`; `S2GR_SEED` in the environment
overrides `run.seed` (explicit CLI overrides still win). Sub-stage seeds
default to the global seed unless a section sets its own.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig
from .tokenizer import QuantizerConfig


@dataclass
class PathsConfig:
    workdir: str = "runs/default"
    interactions: str = ""
    embeddings: str = ""
    hierarchy: str = ""


@dataclass
class CorpusConfig:
    min_test_len: int = 10
    max_history: int = 50


@dataclass
class GraphConfig:
    window: int = 5
    alpha: float = 0.15
    hops: int = 3
    source_split: str = "train"  # train | full

    def validate(self) -> None:
        if self.window < 2:
            raise ConfigError("graph.window must be >= 2")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("graph.alpha must lie in (0, 1]")
        if self.hops < 0:
            raise ConfigError("graph.hops must be >= 0")
        if self.source_split not in ("train", "full"):
            raise ConfigError("graph.source_split must be 'train' or 'full'")


@dataclass
class TokenizerStageConfig(QuantizerConfig):
    method: str = "coba"  # coba | rqvae | rqkmeans
    input_source: str = "aligned"  # aligned | raw


@dataclass
class SemanticsConfig:
    n_clusters: int = 32


@dataclass
class InferenceConfig:
    beam_width: int = 0  # 0 -> 2 * max(eval cutoffs)
    constrain: bool = True
    user_batch: int = 64


@dataclass
class EvalConfig:
    cutoffs: tuple[int, ...] = (5, 10)
    length_buckets: tuple[int, ...] = ()
    ablation_seeds: tuple[int, ...] = (42, 43, 44)


@dataclass
class RunSection:
    seed: int = 42
    threads: int = 1


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    graph: GraphConfig = field(default_factory=GraphConfig)
    tokenizer: TokenizerStageConfig = field(default_factory=TokenizerStageConfig)
    semantics: SemanticsConfig = field(default_factory=SemanticsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def validate(self) -> None:
        self.graph.validate()
        try:
            self.tokenizer.validate()
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.tokenizer.method not in ("coba", "rqvae", "rqkmeans"):
            raise ConfigError("tokenizer.method must be coba, rqvae, or rqkmeans")
        if self.tokenizer.input_source not in ("aligned", "raw"):
            raise ConfigError("tokenizer.input_source must be 'aligned' or 'raw'")
        if self.model.levels != self.tokenizer.levels:
            raise ConfigError(
                f"model.levels={self.model.levels} must equal tokenizer.levels={self.tokenizer.levels}")
        if self.model.codebook_size != self.tokenizer.codebook_size:
            raise ConfigError("model.codebook_size must equal tokenizer.codebook_size")
        think_supervision = not (self.model.no_reason or self.model.no_think_loss)
        if think_supervision and self.tokenizer.latent_dim != self.model.d_model:
            raise ConfigError(
                "thinking-token alignment compares decoder states with quantizer-space "
                f"centroids: tokenizer.latent_dim={self.tokenizer.latent_dim} must equal "
                f"model.d_model={self.model.d_model}")
        if self.semantics.n_clusters > self.tokenizer.codebook_size:
            raise ConfigError("semantics.n_clusters must be <= tokenizer.codebook_size")
        if not self.eval.cutoffs:
            raise ConfigError("eval.cutoffs must be nonempty")

    def canonical_text(self) -> str:
        """Stable serialization of the effective config (for hashing)."""
        lines = []
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            for f in fields(section):
                lines.append(f"{section_field.name}.{f.name}={getattr(section, f.name)}")
        return "\n".join(sorted(lines)) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
        if target_type in (tuple, tuple[int, ...]):
            return tuple(int(x) for x in raw.replace(",", " ").split()) if raw else ()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    raise ConfigError(f"{key}: unsupported config field type {target_type}")


def _field_types(section) -> dict[str, type]:
    out = {}
    for f in fields(section):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str, "bool": bool}.get(
                t, tuple if t.startswith("tuple") else str)
        out[f.name] = t
    return out


def _apply(cfg: RunConfig, section: str, key: str, raw: str, seen: set[tuple[str, str]]) -> None:
    if not hasattr(cfg, section):
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, section)
    types = _field_types(target)
    if key not in types:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(target, key, _coerce(raw, types[key], f"{section}.{key}"))
    seen.add((section, key))


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Parse the INI-style file, then env seed, then `section.key=value` overrides."""
    cfg = RunConfig()
    seen: set[tuple[str, str]] = set()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw, seen)

    env_seed = os.environ.get("S2GR_SEED")
    if env_seed is not None:
        _apply(cfg, "run", "seed", env_seed, seen)

    for override in overrides or []:
        if "=" not in override or "." not in override.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {override!r}")
        dotted, raw = override.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(cfg, section, key, raw, seen)

    # stage seeds follow the global seed unless pinned explicitly
    for section, key in (("synthetic", "seed"), ("tokenizer", "seed"), ("model", "seed")):
        if (section, key) not in seen:
            setattr(getattr(cfg, section), key, cfg.run.seed)
    cfg.validate()
    return cfg
