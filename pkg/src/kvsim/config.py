"""TOML run configuration.

Every key is optional; an empty file gives GPT-NeoX on one 80 GB A100::

    [model]
    preset = "gpt-neox"      # or give num_layers / hidden_dim / ... directly
    max_seq_len = 2048

    [gpu]
    hbm_capacity = 80e9
    bw_hbm = 2.0e12
    bw_h2d = 16.0e9
    num_gpus = 1

    [cost]
    t_fixed = 0.03
    t_ff_per_seq = 1.5e-4
    t_attn_per_token = 1.5e-6
    t_prefill_per_token = 5e-5
    predictor_latency = 0.0037
    retrain_latency = 0.011

    [predictor]
    mode = "stochastic"
    bucket_accuracy = 0.9861
    mean_bucket_distance = 1.03
    short_fraction = 0.5
    num_buckets = 10

    [engine]
    rng_seed = 0
    eviction_overlap = "none"
    batch_size_cap = 0          # 0 = unlimited
    max_skip_iterations = 0     # 0 = unlimited
    row_placement = "append"
    slo_per_token = 0.1875
"""

from __future__ import annotations

import dataclasses
import sys
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import A100_80GB, PRESET_MODELS, ConfigError, GpuConfig, ModelConfig
from .engine import CostModel, EngineConfig
from .predictor import PredictorSpec

SECTIONS = {
    "model": ("preset", "name", "num_layers", "hidden_dim", "max_seq_len", "bytes_per_number", "weight_bytes"),
    "gpu": ("hbm_capacity", "bw_hbm", "bw_h2d", "num_gpus"),
    "cost": tuple(f.name for f in dataclasses.fields(CostModel)),
    "predictor": ("mode", "bucket_accuracy", "mean_bucket_distance", "short_fraction", "num_buckets"),
    "engine": ("rng_seed", "eviction_overlap", "batch_size_cap", "max_skip_iterations",
               "row_placement", "slo_per_token", "check_invariants"),
}

_INT_KEYS = {"num_layers", "hidden_dim", "max_seq_len", "bytes_per_number", "weight_bytes",
             "hbm_capacity", "num_gpus", "num_buckets", "rng_seed", "batch_size_cap",
             "max_skip_iterations"}


def _coerce(key: str, value: Any) -> Any:
    if key in _INT_KEYS:
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    return value


def _check_keys(doc: Dict[str, Any]) -> None:
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - set(SECTIONS[section])
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def config_from_dict(doc: Dict[str, Any]) -> EngineConfig:
    _check_keys(doc)
    m = {k: _coerce(k, v) for k, v in doc.get("model", {}).items()}
    preset = m.pop("preset", None if {"num_layers", "hidden_dim"} <= set(m) else "gpt-neox")
    try:
        if preset is not None:
            if preset not in PRESET_MODELS:
                raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(PRESET_MODELS)}")
            model = dataclasses.replace(PRESET_MODELS[preset], **m)
        else:
            m.setdefault("name", "custom")
            model = ModelConfig(**m)

        g = {k: _coerce(k, v) for k, v in doc.get("gpu", {}).items()}
        gpu = dataclasses.replace(A100_80GB, **g)

        cost = CostModel(**doc.get("cost", {}))

        p = dict(doc.get("predictor", {}))
        num_buckets = _coerce("num_buckets", p.pop("num_buckets", 10))

        e = {k: _coerce(k, v) for k, v in doc.get("engine", {}).items()}
        seed = e.get("rng_seed", 0)
        policy = PredictorSpec(rng_seed=seed, **p)
        for key in ("batch_size_cap", "max_skip_iterations"):
            if e.get(key) == 0:
                e[key] = None
        return EngineConfig(model=model, gpu=gpu, cost=cost, policy=policy,
                            num_buckets=num_buckets, **e)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path: Optional[str]) -> EngineConfig:
    if path is None:
        return EngineConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: EngineConfig) -> Dict[str, Any]:
    """Flat-section view of ``cfg``; feeds run metadata and round-trips through
    :func:`config_from_dict`."""
    model = dataclasses.asdict(cfg.model)
    model.pop("name")
    return {
        "model": {"name": cfg.model.name, **model},
        "gpu": dataclasses.asdict(cfg.gpu),
        "cost": dataclasses.asdict(cfg.cost),
        "predictor": {
            "mode": cfg.policy.mode.value,
            "bucket_accuracy": cfg.policy.bucket_accuracy,
            "mean_bucket_distance": cfg.policy.mean_bucket_distance,
            "short_fraction": cfg.policy.short_fraction,
            "num_buckets": cfg.num_buckets,
        },
        "engine": {
            "rng_seed": cfg.rng_seed,
            "eviction_overlap": cfg.eviction_overlap.value,
            "batch_size_cap": cfg.batch_size_cap or 0,
            "max_skip_iterations": cfg.max_skip_iterations or 0,
            "row_placement": cfg.row_placement,
            "slo_per_token": cfg.slo_per_token,
            "check_invariants": cfg.check_invariants,
        },
    }


def with_overrides(cfg: EngineConfig, *, policy: Optional[str] = None, seed: Optional[int] = None,
                   slo_per_token: Optional[float] = None, gpus: Optional[int] = None,
                   batch_cap: Optional[int] = None, accuracy: Optional[float] = None,
                   eviction_overlap: Optional[str] = None) -> EngineConfig:
    """Apply CLI-level overrides. ``policy`` accepts ``predicted`` for the stochastic mode."""
    spec = cfg.policy
    changes: Dict[str, Any] = {}
    if policy is not None:
        spec = dataclasses.replace(spec, mode=POLICY_ALIASES.get(policy, policy))
    if accuracy is not None:
        spec = dataclasses.replace(spec, bucket_accuracy=accuracy)
    if seed is not None:
        spec = dataclasses.replace(spec, rng_seed=seed)
        changes["rng_seed"] = seed
    changes["policy"] = spec
    if slo_per_token is not None:
        changes["slo_per_token"] = slo_per_token
    if gpus is not None:
        changes["gpu"] = dataclasses.replace(cfg.gpu, num_gpus=gpus)
    if batch_cap is not None:
        changes["batch_size_cap"] = batch_cap or None
    if eviction_overlap is not None:
        changes["eviction_overlap"] = eviction_overlap
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


POLICY_ALIASES = {"predicted": "stochastic"}
POLICIES = ("oracle", "max_length", "predicted", "bucket_oracle", "trace_provided")
