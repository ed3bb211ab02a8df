"""Run configuration: one flat TOML file drives every subcommand.

Keys are flat (no tables) so the file doubles as a readable record of a
run's hyperparameters. Unknown keys are rejected rather than ignored;
silently dropped typos in threshold names would skew results without a
trace. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import tomli

from .backend.base import Backend, BackendConfig, TraceWriter
from .backend.http import HttpBackend
from .backend.mock import MockBackend
from .backend.templates import TemplateStore
from .types import PipelineError
from .wsi import SelectionPolicy


class ConfigError(PipelineError):
    pass


@dataclass(frozen=True)
class RunConfig:
    cohort: Path
    output_dir: Path
    experts: Optional[Path] = None
    backend: str = "mock"
    mock_mode: str = "oracle"
    fixtures: Optional[Path] = None
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "SURVCASE_API_KEY"
    timeout_s: float = 60.0
    retries: int = 3
    max_in_flight: int = 4
    embed_dim: int = 64
    tau_v: float = 0.93
    tau_t: float = 0.93
    policy: SelectionPolicy = SelectionPolicy.LITERAL
    k: int = 3
    d: int = 2
    weight_wsi: float = 0.5
    weight_gene: float = 0.5
    seed: int = 7
    folds: int = 5
    jobs: int = 1
    max_rounds: int = 3
    max_key_genes: int = 10
    eps: float = 4.0
    min_pts: int = 10
    attention_percentile: float = 90.0
    capture_prompts: bool = False
    config_sha256: str = ""

    def __post_init__(self) -> None:
        for name in ("tau_v", "tau_t"):
            tau = getattr(self, name)
            if not (0.0 < tau <= 1.0):
                raise ConfigError(f"{name} must be in (0, 1], got {tau}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.d != 2:
            raise ConfigError(f"only d = 2 is supported, got {self.d}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.max_rounds < 0:
            raise ConfigError(f"max_rounds must be >= 0, got {self.max_rounds}")
        if min(self.weight_wsi, self.weight_gene) < 0 or abs(
            self.weight_wsi + self.weight_gene - 1.0
        ) > 1e-9:
            raise ConfigError("weight_wsi and weight_gene must be >= 0 and sum to 1")
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"backend must be mock or http, got {self.backend!r}")
        if self.mock_mode not in ("oracle", "fixture"):
            raise ConfigError(f"mock_mode must be oracle or fixture, got {self.mock_mode!r}")
        if not self.cohort.is_file():
            raise ConfigError(f"cohort file not found: {self.cohort}")
        for name in ("experts", "fixtures"):
            p = getattr(self, name)
            if p is not None and not p.is_file():
                raise ConfigError(f"{name} file not found: {p}")

    @property
    def weights(self) -> tuple[float, float]:
        return (self.weight_wsi, self.weight_gene)


_PATH_KEYS = {"cohort", "output_dir", "experts", "fixtures"}
_VALID_KEYS = {f.name for f in fields(RunConfig)} - {"config_sha256"}


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        raw_bytes = p.read_bytes()
        data = tomli.loads(raw_bytes.decode("utf-8"))
    except OSError as exc:
        raise ConfigError(f"{p}: unreadable config: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: invalid TOML: {exc}") from exc

    unknown = sorted(set(data) - _VALID_KEYS)
    if unknown:
        raise ConfigError(f"{p}: unknown config keys: {', '.join(unknown)}")
    if "cohort" not in data:
        raise ConfigError(f"{p}: config must set 'cohort'")

    root = p.parent
    kwargs: dict = {}
    for key, value in data.items():
        if key in _PATH_KEYS:
            kwargs[key] = (root / str(value)).resolve()
        elif key == "policy":
            try:
                kwargs[key] = SelectionPolicy(str(value))
            except ValueError as exc:
                raise ConfigError(f"{p}: unknown policy {value!r}") from exc
        else:
            kwargs[key] = value
    kwargs.setdefault("output_dir", (root / "runs").resolve())
    kwargs["config_sha256"] = hashlib.sha256(raw_bytes).hexdigest()
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{p}: bad config value types: {exc}") from exc


def make_backend(cfg: RunConfig, trace: Optional[TraceWriter] = None) -> Backend:
    """Build the backend a run asks for; mock oracle reads the cohort tree."""
    bc = BackendConfig(
        kind=cfg.backend,
        endpoint=cfg.endpoint,
        model=cfg.model,
        api_key_env=cfg.api_key_env,
        timeout_s=cfg.timeout_s,
        retries=cfg.retries,
        max_in_flight=cfg.max_in_flight,
        embed_dim=cfg.embed_dim,
    )
    templates = TemplateStore()
    if cfg.backend == "http":
        return HttpBackend(bc, templates, trace)
    return MockBackend(
        bc,
        templates,
        trace,
        mode=cfg.mock_mode,
        fixtures=None if cfg.fixtures is None else str(cfg.fixtures),
        cohort_root=str(cfg.cohort.parent),
    )
