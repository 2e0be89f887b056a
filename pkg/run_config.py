#!/usr/bin/env python3
"""
Run configuration: flat `section.key=value` files on top of a named profile
Files are read with python-dotenv; `--set` overrides win over the file, the file over the profile.
"""

import io
import os
import textwrap
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from dotenv import dotenv_values

from base_forecaster import ModelConfig, OptimizerConfig
from lora_adapters import AdapterConfig
from mixft_errors import ConfigError
from mixft_pipeline import FinetuneSettings, RoutingMode
from series_data import WindowSpec
from tensor_store import sha256_text
from templates.desk_profile import get_desk_profile
from templates.paper_parity_profile import get_paper_parity_profile

PROFILES = {
    "desk": get_desk_profile,
    "paper-parity": get_paper_parity_profile,
}
PROFILE_ALIASES = {"full-scale": "paper-parity"}

SCHEMA: Dict[str, str] = {
    "run.profile": "str",
    "run.seeds": "int_list",
    "run.threads": "int",
    "window.context_length": "int",
    "window.horizon": "int",
    "window.stride": "int",
    "window.eval_stride": "int",
    "model.patch_size": "int",
    "model.hidden_dim": "int",
    "model.num_blocks": "int",
    "model.seed": "int",
    "adapter.rank": "int",
    "adapter.alpha": "float",
    "adapter.dropout": "float",
    "adapter.seed": "int",
    "optim.learning_rate": "float",
    "optim.weight_decay": "float",
    "optim.batch_size": "int",
    "optim.max_steps": "int",
    "pretrain.learning_rate": "float",
    "pretrain.weight_decay": "float",
    "pretrain.batch_size": "int",
    "pretrain.max_steps": "int",
    "pretrain.num_series": "int",
    "pretrain.length": "int",
    "mixture.k": "int",
    "mixture.candidate_ks": "int_list",
    "mixture.sweep_ks": "int_list",
    "mixture.partitioner": "str",
    "mixture.predictive": "str",
    "mixture.max_iters": "int",
    "mixture.tol": "float",
    "mixture.kmeans_restarts": "int",
    "pipeline.routing": "str",
    "pipeline.mixup_beta": "float",
    "pipeline.average_level": "str",
    "pipeline.validation_fraction": "float",
    "synth.series_per_dataset": "int",
    "synth.length": "int",
    "synth.segment_length": "int",
    "paths.corpus_dir": "str",
    "paths.artifact_dir": "str",
    "paths.report_dir": "str",
}

OUT_LAYOUT = {
    "paths.corpus_dir": "corpora",
    "paths.artifact_dir": "artifacts",
    "paths.report_dir": "report",
}

BOOL_TRUE = ("1", "true", "yes", "on")
BOOL_FALSE = ("0", "false", "no", "off")


def _coerce(key: str, raw) -> Any:
    kind = SCHEMA[key]
    text = str(raw).strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in BOOL_TRUE:
                return True
            if text.lower() in BOOL_FALSE:
                return False
            raise ValueError(text)
        if kind == "int_list":
            return [int(part) for part in text.split(",") if part.strip()]
        if kind == "float_list":
            return [float(part) for part in text.split(",") if part.strip()]
        return text
    except ValueError:
        raise ConfigError(f"Invalid value for {key} ({kind}): {raw!r}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return str(value)


def _check_keys(keys: Iterable[str], origin: str) -> None:
    unknown = sorted(set(keys) - set(SCHEMA))
    if unknown:
        raise ConfigError(
            f"Unknown config key(s) in {origin}: {', '.join(unknown)}. "
            f"Valid keys: {', '.join(sorted(SCHEMA))}"
        )


def parse_text(text: str, origin: str = "config") -> Dict[str, str]:
    """Raw key -> string values of a config text"""
    raw = dotenv_values(stream=io.StringIO(textwrap.dedent(text)), interpolate=False)
    _check_keys(raw, origin)
    return {key: value for key, value in raw.items() if value is not None}


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must look like section.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    _check_keys(overrides, "--set")
    return overrides


def canonical_profile(name: str) -> str:
    name = PROFILE_ALIASES.get(name, name)
    if name not in PROFILES:
        valid = ", ".join(list(PROFILES) + list(PROFILE_ALIASES))
        raise ConfigError(f"Unknown profile '{name}'; valid: {valid}")
    return name


def profile_values(name: str) -> Dict[str, str]:
    name = canonical_profile(name)
    return parse_text(PROFILES[name](), f"profile {name}")


@dataclass
class RunConfig:
    """Typed values for every key in SCHEMA"""
    values: Dict[str, Any]

    def __post_init__(self):
        missing = sorted(set(SCHEMA) - set(self.values))
        if missing:
            raise ConfigError(f"Config is missing keys: {', '.join(missing)}")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        RoutingMode.parse(self.values["pipeline.routing"])

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def profile(self) -> str:
        return self.values["run.profile"]

    @property
    def seeds(self) -> List[int]:
        return list(self.values["run.seeds"])

    @property
    def threads(self) -> int:
        return int(self.values["run.threads"])

    @property
    def routing(self) -> RoutingMode:
        return RoutingMode.parse(self.values["pipeline.routing"])

    def path(self, name: str) -> Path:
        return Path(self.values[f"paths.{name}"])

    def window_spec(self) -> WindowSpec:
        v = self.values
        return WindowSpec(v["window.context_length"], v["window.horizon"], v["window.stride"])

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            patch_size=v["model.patch_size"],
            hidden_dim=v["model.hidden_dim"],
            num_blocks=v["model.num_blocks"],
            horizon=v["window.horizon"],
            context_length=v["window.context_length"],
            seed=v["model.seed"],
        )

    def adapter_config(self, seed: int = 0) -> AdapterConfig:
        v = self.values
        return AdapterConfig(rank=v["adapter.rank"], alpha=v["adapter.alpha"],
                             dropout=v["adapter.dropout"], seed=v["adapter.seed"] + seed)

    def optimizer_config(self, section: str = "optim") -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(
            learning_rate=v[f"{section}.learning_rate"],
            weight_decay=v[f"{section}.weight_decay"],
            batch_size=v[f"{section}.batch_size"],
            max_steps=v[f"{section}.max_steps"],
        )

    def finetune_settings(self, seed: int, partitioner: Optional[str] = None,
                          threads: Optional[int] = None) -> FinetuneSettings:
        v = self.values
        return FinetuneSettings(
            window=self.window_spec(),
            adapter=self.adapter_config(seed),
            optim=self.optimizer_config("optim"),
            mixup_beta=v["pipeline.mixup_beta"],
            partitioner=partitioner or v["mixture.partitioner"],
            predictive=v["mixture.predictive"],
            average_level=v["pipeline.average_level"],
            vi_max_iters=v["mixture.max_iters"],
            vi_tol=v["mixture.tol"],
            kmeans_restarts=v["mixture.kmeans_restarts"],
            seed=seed,
            threads=threads or self.threads,
        )

    def serialize(self) -> str:
        return "".join(f"{key}={_format(self.values[key])}\n" for key in sorted(self.values))

    @property
    def config_hash(self) -> str:
        return sha256_text(self.serialize())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize())
        return path


def from_raw(raw: Dict[str, str]) -> RunConfig:
    return RunConfig({key: _coerce(key, value) for key, value in raw.items()})


def parse_config(text: str) -> RunConfig:
    """Parse serialized text; a profile fills keys the text does not set"""
    values = parse_text(text)
    merged = profile_values(values.get("run.profile", "desk"))
    merged.update(values)
    merged["run.profile"] = canonical_profile(merged["run.profile"])
    return from_raw(merged)


def load_config(path=None, overrides: Iterable[str] = (), out_dir=None,
                seed: Optional[int] = None, threads: Optional[int] = None) -> RunConfig:
    """Profile defaults < MIXFT_THREADS < config file < --out < --seed/--threads < --set"""
    file_values: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        file_values = parse_text(path.read_text(), str(path))
    override_values = parse_overrides(overrides)

    profile = override_values.get("run.profile") or file_values.get("run.profile") or "desk"
    merged = profile_values(profile)
    if os.getenv("MIXFT_THREADS"):
        merged["run.threads"] = os.environ["MIXFT_THREADS"]
    merged.update(file_values)
    if out_dir is not None:
        for key, leaf in OUT_LAYOUT.items():
            merged[key] = str(Path(out_dir) / leaf)
    if seed is not None:
        merged["run.seeds"] = str(seed)
    if threads is not None:
        merged["run.threads"] = str(threads)
    merged.update(override_values)
    merged["run.profile"] = canonical_profile(merged["run.profile"])
    return from_raw(merged)


__all__ = [
    "PROFILES",
    "PROFILE_ALIASES",
    "canonical_profile",
    "SCHEMA",
    "RunConfig",
    "parse_text",
    "parse_overrides",
    "profile_values",
    "from_raw",
    "parse_config",
    "load_config",
]
