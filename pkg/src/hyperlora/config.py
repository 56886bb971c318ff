"""One JSON document drives every command.

The document has six optional sections — data, backbone, hyperlora, train,
eval, analysis — plus a mandatory top-level ``seed``. Every field has a
default, unknown keys are rejected by dotted name, and the fully resolved
("effective") document is echoed into each output directory so a run can be
reproduced from its own artifacts.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .datagen import SyntheticSpec
from .errors import ConfigError
from .hypernet import HyperNetConfig
from .training import TrainConfig

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic cohort shape; one spec per split, decorrelated by seed."""

    n_train: int = 1200
    n_val: int = 300
    n_test: int = 300
    n_tasks: int = 6
    family_sizes: tuple = (3, 3)
    prevalence: object = 0.35
    rho: float = 0.6
    missing_rate: object = 0.1
    sigma: float = 0.2
    height: int = 24
    width: int = 24
    depth: int = 6
    blob_amplitude: float = 1.0
    texture_std_lo: float = 0.0
    texture_std_hi: float = 2.0
    signal_kinds: tuple = ()

    def spec(self, seed: int, split: str) -> SyntheticSpec:
        n = {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]
        return SyntheticSpec(
            n_samples=n,
            n_tasks=self.n_tasks,
            family_sizes=tuple(self.family_sizes),
            prevalence=self.prevalence,
            rho=self.rho,
            missing_rate=self.missing_rate,
            sigma=self.sigma,
            height=self.height,
            width=self.width,
            depth=self.depth,
            seed=split_seed(seed, split),
            blob_amplitude=self.blob_amplitude,
            texture_std_lo=self.texture_std_lo,
            texture_std_hi=self.texture_std_hi,
            signal_kinds=tuple(self.signal_kinds),
        )


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    bootstrap_iters: int = 1000
    threshold_lo: float = 0.05
    threshold_hi: float = 0.80
    threshold_steps: int = 76

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.bootstrap_iters < 0:
            raise ValueError("bootstrap_iters must be >= 0")
        if self.threshold_steps < 1:
            raise ValueError("threshold_steps must be >= 1")


@dataclass(frozen=True)
class AnalysisConfig:
    mode: str = "materialized"
    k_min: int = 2
    k_max: int = 8

    def __post_init__(self):
        if self.mode not in ("factors", "materialized"):
            raise ValueError(f"mode must be 'factors' or 'materialized', got {self.mode!r}")
        if not 2 <= self.k_min <= self.k_max:
            raise ValueError("need 2 <= k_min <= k_max")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataConfig
    backbone: BackboneConfig
    hyperlora: HyperNetConfig
    train: TrainConfig
    eval: EvalConfig
    analysis: AnalysisConfig


def split_seed(seed: int, split: str) -> int:
    """Per-split generator seed. Sample streams key on (spec.seed, index), so
    splits sharing the run seed would repeat the same volumes; hashing the
    split position through a seed sequence keeps them disjoint."""
    idx = SPLITS.index(split)
    return int(np.random.SeedSequence([seed, 1009 + idx]).generate_state(1)[0])


_SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "hyperlora": HyperNetConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "analysis": AnalysisConfig,
}

# train.seed is injected from the top level, never set per-section
_HIDDEN_FIELDS = {"train": {"seed"}, "data": set(), "backbone": set(),
                  "hyperlora": set(), "eval": set(), "analysis": set()}


def _build_section(name: str, cls, raw: object, seed: int):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be a JSON object")
    allowed = {f.name for f in fields(cls)} - _HIDDEN_FIELDS[name]
    unknown = sorted(set(raw) - allowed)
    if unknown:
        dotted = ", ".join(f"{name}.{k}" for k in unknown)
        raise ConfigError(f"unknown config key: {dotted}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if isinstance(f.default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    if name == "train":
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc


def parse_config(doc: object) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "seed" not in doc:
        raise ConfigError("config requires a top-level integer seed")
    seed = doc["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config key: {', '.join(unknown)}")
    parts = {
        name: _build_section(name, cls, doc.get(name, {}), seed)
        for name, cls in _SECTIONS.items()
    }
    cfg = RunConfig(seed=seed, **parts)
    # cross-section checks that no single dataclass can see
    try:
        for split in SPLITS:
            cfg.data.spec(seed, split)
    except ValueError as exc:
        raise ConfigError(f"invalid data config: {exc}") from exc
    if cfg.data.height != cfg.backbone.image_side or cfg.data.width != cfg.backbone.image_side:
        raise ConfigError(
            f"backbone expects {cfg.backbone.image_side}x{cfg.backbone.image_side} slices "
            f"but data produces {cfg.data.height}x{cfg.data.width}"
        )
    if cfg.data.depth < 3:
        raise ConfigError("data.depth must be >= 3 to form slice triplets")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot open config file: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return parse_config(doc)


def effective_config(cfg: RunConfig) -> dict:
    doc = {"seed": cfg.seed}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        for hidden in _HIDDEN_FIELDS[name]:
            section.pop(hidden, None)
        doc[name] = section
    return doc


def write_effective_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(effective_config(cfg), indent=2, sort_keys=True) + "\n")
    return path


def thread_cap() -> int:
    """Parallelism ceiling from HYPERLORA_THREADS; 1 keeps runs bit-reproducible."""
    raw = os.environ.get("HYPERLORA_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"HYPERLORA_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("HYPERLORA_THREADS must be >= 1")
    return cap


def apply_thread_cap() -> int:
    """Clamp BLAS pools to the cap. Best-effort: environment hints cover
    libraries not yet initialised; threadpoolctl (when present) covers ones
    that already are."""
    cap = thread_cap()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(cap))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(cap)
    except ImportError:
        pass
    return cap
