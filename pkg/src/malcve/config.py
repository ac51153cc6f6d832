"""The JSON configuration file shared by every subcommand.

Every section is optional; missing keys take the defaults below.  Relative
paths (the mock LLM script, for instance) resolve against the directory of
the config file.
"""
from __future__ import annotations

import copy
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from .decompile import DEFAULT_DECOMPILERS, DecompilerSpec, order_specs
from .embeddings import EmbeddingConfig
from .errors import ConfigError
from .llm.accounting import Price, price_from_dollars
from .llm.types import ModelHandle
from .rerank import FusionConfig

DEFAULT_MODEL = "gpt-4o-mini"

DEFAULTS: dict = {
    "decompilers": [
        {"name": s.name, "command": s.command_template, "timeout": s.timeout, "role": s.role}
        for s in DEFAULT_DECOMPILERS
    ],
    "fusion": FusionConfig().as_dict(),
    "models": {
        step: {"id": DEFAULT_MODEL, "context_limit": 128_000, "max_output_tokens": 4_096}
        for step in ("summarize", "queries", "predict")
    },
    "prices": {
        DEFAULT_MODEL: {"input": "0.15", "output": "0.60"},
        "text-embedding-3-small": {"input": "0", "output": "0", "embedding": "0.02"},
        "hashed-bow-v1": {"input": "0", "output": "0", "embedding": "0"},
    },
    "rate_budget": {"tokens_per_minute": 200_000, "requests_in_flight_max": 8},
    "embedding": {"provider": "local-deterministic", "model_id": "hashed-bow-v1", "dim": 1536,
                  "request_batch_size": 64, "max_retries": 3},
    "index": {"engine": "exact", "params": {}},
    "search_k": 100,
    "llm_backend": {"kind": "http"},
    "download": {"url_template": "", "auth_header": "Authorization",
                 "auth_env": "MALCVE_FETCH_API_KEY", "requests_per_interval": 4,
                 "interval_seconds": 60.0, "max_retries": 2},
    "workers": 1,
}


# Sections whose keys are fixed and merge key by key; the rest are replaced whole.
_STRICT_SECTIONS = ("fusion", "rate_budget", "embedding", "download")


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _STRICT_SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {key!r} must be an object")
            unknown = sorted(set(value) - set(base[key]))
            if unknown:
                raise ConfigError(f"unknown keys in {key!r}: {', '.join(unknown)}")
            out[key].update(copy.deepcopy(dict(value)))
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class Config:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: Path | str | None = None) -> Config:
        cfg = cls(_merge(DEFAULTS, data), Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | str | None) -> Config:
        if path is None:
            return cls.from_dict({})
        path = Path(path)
        try:
            data = json.loads(path.read_text("utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data, path.parent)

    def validate(self) -> None:
        try:
            self.decompilers
            self.fusion
            self.embedding
            self.models
            self.prices
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        for step, model in self.models.items():
            if model.model_id not in self.prices:
                raise ConfigError(f"model {model.model_id!r} for step {step} has no price entry")
        if self.embedding.model_id not in self.prices:
            raise ConfigError(f"embedding model {self.embedding.model_id!r} has no price entry")
        if self.raw["search_k"] <= 0 or self.raw["workers"] < 1:
            raise ConfigError("search_k must be positive and workers at least 1")
        if self.raw["llm_backend"].get("kind") not in ("http", "mock"):
            raise ConfigError("llm_backend.kind must be 'http' or 'mock'")

    def snapshot(self) -> dict:
        """The effective settings, as embedded in report metadata."""
        return copy.deepcopy(self.raw)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def decompilers(self) -> list[DecompilerSpec]:
        specs = [DecompilerSpec(d["name"], d["command"], float(d.get("timeout", 120)),
                                d.get("role", "primary")) for d in self.raw["decompilers"]]
        return order_specs(specs)

    @property
    def fusion(self) -> FusionConfig:
        f = dict(self.raw["fusion"])
        f["generic_token_stoplist"] = frozenset(f.get("generic_token_stoplist", []))
        return FusionConfig(**f)

    @property
    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(**self.raw["embedding"])

    @property
    def models(self) -> dict[str, ModelHandle]:
        return {step: ModelHandle(m["id"], int(m.get("context_limit", 128_000)),
                                  int(m.get("max_output_tokens", 4_096)))
                for step, m in self.raw["models"].items()}

    @property
    def prices(self) -> dict[str, Price]:
        return {model: price_from_dollars(p.get("input", 0), p.get("output", 0), p.get("embedding", 0))
                for model, p in self.raw["prices"].items()}

    @property
    def index_engine(self) -> str:
        return self.raw["index"]["engine"]

    @property
    def index_params(self) -> dict:
        return dict(self.raw["index"].get("params", {}))

    @property
    def search_k(self) -> int:
        return int(self.raw["search_k"])

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    def with_overrides(self, **values) -> Config:
        data = {k: v for k, v in values.items() if v is not None}
        return Config.from_dict({**self.raw, **data}, self.base_dir)
