#!/usr/bin/env python3
"""
Low-rank adapters for the base forecaster

An adapter adds scaling * B @ A to each adapted affine map, with A (r x in) and
B (out x r). B starts at zero so a fresh adapter leaves every forecast unchanged.
"""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from base_forecaster import (AdamW, BaseModel, ModelConfig, OptimizerConfig, adapted_maps,
                             check_divergence, loss_and_grads)
from mixft_errors import ConfigError, EmptyPartitionError, ShapeError
from series_data import DEFAULT_MIXUP_BETA, Window, mixup, normalize_batch, stack_windows
from tensor_store import load_tensors, read_json, save_tensors, write_json

logger = structlog.get_logger(__name__)

AVERAGE_LEVELS = ("factor", "delta")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 2
    alpha: float = 16.0
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("Adapter rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("Adapter dropout must be in [0, 1)")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraModule:
    factors: Dict[str, Tuple[np.ndarray, np.ndarray]]
    scaling: float
    config: AdapterConfig

    def parameters(self) -> Dict[str, np.ndarray]:
        """Views onto the factor arrays, keyed `<map>.A` / `<map>.B`"""
        flat = {}
        for name, (A, B) in self.factors.items():
            flat[f"{name}.A"] = A
            flat[f"{name}.B"] = B
        return flat

    @property
    def parameter_count(self) -> int:
        return int(sum(A.size + B.size for A, B in self.factors.values()))

    def copy(self) -> "LoraModule":
        return LoraModule({k: (A.copy(), B.copy()) for k, (A, B) in self.factors.items()},
                          self.scaling, self.config)

    def same_shape(self, other: "LoraModule") -> bool:
        if self.factors.keys() != other.factors.keys():
            return False
        return all(self.factors[k][0].shape == other.factors[k][0].shape
                   and self.factors[k][1].shape == other.factors[k][1].shape
                   for k in self.factors)

    def identical(self, other: "LoraModule") -> bool:
        return (self.scaling == other.scaling and self.same_shape(other)
                and all(np.array_equal(self.factors[k][0], other.factors[k][0])
                        and np.array_equal(self.factors[k][1], other.factors[k][1])
                        for k in self.factors))


@dataclass
class AdapterSet:
    """K adapters; index k serves sub-domain k (or dataset `keys[k]` for per-dataset sets)"""
    modules: List[LoraModule]
    keys: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.modules)

    def __getitem__(self, k: int) -> LoraModule:
        return self.modules[k]


def init_lora(model_shape, cfg: AdapterConfig) -> LoraModule:
    """A gets orthonormal rows from a QR of a Gaussian draw, B is zero"""
    if isinstance(model_shape, ModelConfig):
        model_shape = adapted_maps(model_shape)

    rng = np.random.default_rng(cfg.seed)
    factors = {}
    for name, (fan_out, fan_in) in model_shape.items():
        if cfg.rank > min(fan_in, fan_out):
            raise ConfigError(f"Rank {cfg.rank} exceeds min(in, out) = {min(fan_in, fan_out)} for {name}")
        q, r = np.linalg.qr(rng.standard_normal((fan_in, cfg.rank)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        factors[name] = (np.ascontiguousarray(q.T), np.zeros((fan_out, cfg.rank)))
    return LoraModule(factors, cfg.scaling, cfg)


def train_lora(model: BaseModel, lora: LoraModule, windows: Sequence[Window],
               replay: Optional[Sequence[Window]], opt: OptimizerConfig,
               rng: np.random.Generator, mixup_beta: float = DEFAULT_MIXUP_BETA,
               dropout: Optional[float] = None, label: str = "") -> Tuple[LoraModule, List[float]]:
    """Train adapter factors on one partition with replay and MixUp; the base model is not modified"""
    if not windows:
        raise EmptyPartitionError(f"Adapter {label or '?'} has no training windows; reduce K")

    contexts, targets = stack_windows(windows)
    replay_contexts = replay_targets = None
    if replay:
        replay_contexts, replay_targets = stack_windows(replay)
    else:
        logger.warning("replay_empty", adapter=label)

    batch = opt.batch_size
    if batch > contexts.shape[0]:
        logger.warning("batch_capped", adapter=label, requested=batch, available=contexts.shape[0])
        batch = contexts.shape[0]

    dropout = lora.config.dropout if dropout is None else dropout
    trained = lora.copy()
    optimizer = AdamW(opt)
    trace: List[float] = []

    for step in range(opt.max_steps):
        index = rng.choice(contexts.shape[0], size=batch, replace=False)
        batch_x, batch_y = contexts[index], targets[index]
        if replay_contexts is not None:
            replay_index = rng.choice(replay_contexts.shape[0], size=batch,
                                      replace=replay_contexts.shape[0] < batch)
            batch_x = np.concatenate([batch_x, replay_contexts[replay_index]])
            batch_y = np.concatenate([batch_y, replay_targets[replay_index]])

        normalized, loc, scale = normalize_batch(batch_x)
        mixed = mixup(normalized, (batch_y - loc) / scale, mixup_beta, rng)

        result = loss_and_grads(model, trained, mixed.contexts, mixed.targets,
                                train_adapter=True, dropout_rate=dropout, rng=rng)
        check_divergence(result.loss, step, f"adapter {label}")
        optimizer.step(trained.parameters(), result.adapter_grads)
        trace.append(result.loss)

    if trace:
        logger.info("adapter_trained", adapter=label, steps=len(trace),
                    first_loss=trace[0], last_loss=trace[-1], windows=len(windows))
    return trained, trace


def group_identical(modules: Sequence[LoraModule], weights: np.ndarray) -> List[Tuple[LoraModule, float]]:
    """Merge bitwise-identical modules and drop zero weights; order of first appearance"""
    groups: List[Tuple[LoraModule, float]] = []
    for module, weight in zip(modules, weights):
        if weight == 0.0:
            continue
        for i, (seen, total) in enumerate(groups):
            if seen is module or seen.identical(module):
                groups[i] = (seen, total + float(weight))
                break
        else:
            groups.append((module, float(weight)))
    return groups


def average_loras(modules: Sequence[LoraModule], weights, level: str = "factor") -> LoraModule:
    """Weighted average of adapters.

    level="factor" averages A and B separately. level="delta" averages the
    composed updates B @ A exactly by stacking weighted factors (rank K * r).
    """
    if level not in AVERAGE_LEVELS:
        raise ConfigError(f"Unknown averaging level '{level}'; valid: {', '.join(AVERAGE_LEVELS)}")
    if not modules:
        raise ShapeError("No adapters to average")

    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(modules),):
        raise ShapeError(f"{len(modules)} adapters but {weights.size} weights")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigError(f"Averaging weights must lie on the simplex, got sum {weights.sum()}")

    first = modules[0]
    for other in modules[1:]:
        if not first.same_shape(other) or other.scaling != first.scaling:
            raise ShapeError("Adapters to average differ in shape or scaling")

    groups = group_identical(modules, weights)
    if len(groups) == 1:
        return groups[0][0].copy()

    factors = {}
    for name in first.factors:
        if level == "factor":
            A = sum(w * m.factors[name][0] for m, w in groups)
            B = sum(w * m.factors[name][1] for m, w in groups)
        else:
            A = np.vstack([m.factors[name][0] for m, _ in groups])
            B = np.hstack([w * m.factors[name][1] for m, w in groups])
        factors[name] = (A, B)

    config = first.config
    if level == "delta":
        config = replace(config, rank=config.rank * len(groups))
    return LoraModule(factors, first.scaling, config)


def save_lora(module: LoraModule, directory) -> Path:
    directory = Path(directory)
    hashes = save_tensors(directory, module.parameters())
    write_json(directory / "manifest.json", {
        "config": asdict(module.config),
        "scaling": module.scaling,
        "maps": list(module.factors),
        "tensors": hashes,
    })
    return directory


def load_lora(directory) -> LoraModule:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    names = manifest["maps"]
    tensors = load_tensors(directory, [f"{n}.{f}" for n in names for f in ("A", "B")])
    factors = {n: (tensors[f"{n}.A"], tensors[f"{n}.B"]) for n in names}
    return LoraModule(factors, float(manifest["scaling"]), AdapterConfig(**manifest["config"]))


def save_adapter_set(adapters: AdapterSet, directory) -> List[Path]:
    directory = Path(directory)
    return [save_lora(module, directory / f"adapter_{k}") for k, module in enumerate(adapters.modules)]


def load_adapter_set(directory, count: int, keys: Optional[List[str]] = None) -> AdapterSet:
    directory = Path(directory)
    return AdapterSet([load_lora(directory / f"adapter_{k}") for k in range(count)], keys or [])


__all__ = [
    "AVERAGE_LEVELS",
    "AdapterConfig",
    "LoraModule",
    "AdapterSet",
    "init_lora",
    "train_lora",
    "group_identical",
    "average_loras",
    "save_lora",
    "load_lora",
    "save_adapter_set",
    "load_adapter_set",
]
