#!/usr/bin/env python3
"""
Compact patch forecaster standing in for a pretrained foundation model

    context -> instance norm -> patches -> patch embedding
            -> residual blocks (fc1, tanh, fc2) -> mean over tokens -> head -> denorm

Gradients are written out by hand; everything runs in float64.
Adapters are duck-typed: any object with `factors[name] -> (A, B)` and `scaling`
(see lora_adapters.LoraModule) can be attached to the maps in `adapted_maps`.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog

from mixft_errors import ConfigError, NumericalError, ShapeError
from series_data import Window, normalize_batch, stack_windows
from tensor_store import load_tensors, read_json, save_tensors, write_json

logger = structlog.get_logger(__name__)

DIVERGENCE_LIMIT = 1e6
EMBED_CHUNK = 2048


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    hidden_dim: int = 16
    num_blocks: int = 2
    horizon: int = 8
    context_length: int = 64
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.patch_size <= 0 or self.context_length % self.patch_size != 0:
            raise ConfigError(
                f"context_length {self.context_length} must be a multiple of patch_size {self.patch_size}"
            )
        if self.hidden_dim < 4:
            raise ConfigError("hidden_dim must be >= 4")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.activation != "tanh":
            raise ConfigError(f"Unsupported activation: {self.activation}")

    @property
    def num_tokens(self) -> int:
        return self.context_length // self.patch_size


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_steps: int = 500

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")

    @classmethod
    def paper_parity(cls) -> "OptimizerConfig":
        return cls(learning_rate=5e-5, batch_size=256)


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape; affine weights are (out, in)"""
    d = cfg.hidden_dim
    shapes = {"embed.weight": (d, cfg.patch_size), "embed.bias": (d,)}
    for b in range(cfg.num_blocks):
        for fc in ("fc1", "fc2"):
            shapes[f"block{b}.{fc}.weight"] = (d, d)
            shapes[f"block{b}.{fc}.bias"] = (d,)
    shapes["head.weight"] = (cfg.horizon, d)
    shapes["head.bias"] = (cfg.horizon,)
    return shapes


def adapted_maps(cfg: ModelConfig) -> Dict[str, Tuple[int, int]]:
    """Affine maps that take adapters: name -> (out, in); the patch embedding is excluded"""
    shapes = parameter_shapes(cfg)
    names = [f"block{b}.{fc}" for b in range(cfg.num_blocks) for fc in ("fc1", "fc2")] + ["head"]
    return {name: shapes[f"{name}.weight"] for name in names}


@dataclass
class BaseModel:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    step_count: int = 0

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "BaseModel":
        return BaseModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.step_count)


@dataclass
class ForwardResult:
    forecast: np.ndarray
    tokens: np.ndarray


@dataclass
class LossGrads:
    loss: float
    base_grads: Dict[str, np.ndarray]
    adapter_grads: Dict[str, np.ndarray] = field(default_factory=dict)


def init_model(cfg: ModelConfig) -> BaseModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases"""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        owner = name.rsplit(".", 1)[0]
        fan_in = parameter_shapes(cfg)[f"{owner}.weight"][1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    model = BaseModel(cfg, params)
    logger.debug("model_initialized", parameters=model.parameter_count, seed=cfg.seed)
    return model


def _check_contexts(model: BaseModel, contexts: np.ndarray) -> np.ndarray:
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim == 1:
        contexts = contexts[None, :]
    if contexts.ndim != 2 or contexts.shape[1] != model.config.context_length:
        raise ShapeError(
            f"Context length {contexts.shape[-1]} does not match L = {model.config.context_length}"
        )
    return contexts


def _affine(h, params, name, adapter, masks, cache):
    """h @ W.T + b, plus the adapter delta s * (mask(h) @ A.T) @ B.T when attached"""
    out = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
    if adapter is not None and name in adapter.factors:
        A, B = adapter.factors[name]
        dropped = h if masks is None else h * masks[name]
        low = dropped @ A.T
        out = out + adapter.scaling * (low @ B.T)
        if cache is not None:
            cache[f"{name}.dropped"] = dropped
            cache[f"{name}.low"] = low
    return out


def _dropout_masks(model: BaseModel, batch: int, rate: float, rng) -> Optional[Dict[str, np.ndarray]]:
    if rate <= 0.0 or rng is None:
        return None
    cfg = model.config
    keep = 1.0 - rate
    masks = {}
    for name, (_, fan_in) in adapted_maps(cfg).items():
        shape = (batch, fan_in) if name == "head" else (batch, cfg.num_tokens, fan_in)
        masks[name] = (rng.random(shape) < keep) / keep
    return masks


def _forward_normalized(model: BaseModel, adapter, normalized: np.ndarray,
                        masks=None, cache=None) -> Tuple[np.ndarray, np.ndarray]:
    cfg = model.config
    p = model.params
    patches = normalized.reshape(normalized.shape[0], cfg.num_tokens, cfg.patch_size)
    hidden = patches @ p["embed.weight"].T + p["embed.bias"]
    if cache is not None:
        cache["patches"] = patches

    for b in range(cfg.num_blocks):
        if cache is not None:
            cache[f"block{b}.input"] = hidden
        pre = _affine(hidden, p, f"block{b}.fc1", adapter, masks, cache)
        act = np.tanh(pre)
        if cache is not None:
            cache[f"block{b}.act"] = act
        hidden = hidden + _affine(act, p, f"block{b}.fc2", adapter, masks, cache)

    pooled = hidden.mean(axis=1)
    if cache is not None:
        cache["pooled"] = pooled
    out = _affine(pooled, p, "head", adapter, masks, cache)
    return out, hidden


def forward_batch(model: BaseModel, adapter, contexts) -> ForwardResult:
    """Batched forward; returns (N x H forecasts, N x tokens x d post-block states)"""
    contexts = _check_contexts(model, contexts)
    normalized, loc, scale = normalize_batch(contexts)
    out, tokens = _forward_normalized(model, adapter, normalized)
    return ForwardResult(out * scale + loc, tokens)


def forward(model: BaseModel, adapter, x) -> ForwardResult:
    """One context of length L -> forecast of length H and its token matrix"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward takes one context vector, got shape {x.shape}")
    result = forward_batch(model, adapter, x)
    return ForwardResult(result.forecast[0], result.tokens[0])


def embed_batch(model: BaseModel, contexts) -> np.ndarray:
    """Mean-pooled final token states from the adapter-free model, N x d"""
    contexts = _check_contexts(model, contexts)
    chunks = [
        forward_batch(model, None, contexts[i:i + EMBED_CHUNK]).tokens.mean(axis=1)
        for i in range(0, contexts.shape[0], EMBED_CHUNK)
    ]
    return np.concatenate(chunks, axis=0)


def embed(model: BaseModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"embed takes one context vector, got shape {x.shape}")
    return embed_batch(model, x)[0]


def _adapter_backward(name, grad_out, adapter, cache, grads):
    """Accumulate dA, dB for one map; returns the adapter path's input gradient"""
    A, B = adapter.factors[name]
    s = adapter.scaling
    dropped = cache[f"{name}.dropped"].reshape(-1, A.shape[1])
    low = cache[f"{name}.low"].reshape(-1, A.shape[0])
    flat = grad_out.reshape(-1, B.shape[0])

    grads[f"{name}.B"] = s * flat.T @ low
    d_low = s * flat @ B
    grads[f"{name}.A"] = d_low.T @ dropped
    return (d_low @ A).reshape(grad_out.shape[:-1] + (A.shape[1],))


def loss_and_grads(model: BaseModel, adapter, contexts, targets, *,
                   train_adapter: bool = False, dropout_rate: float = 0.0,
                   rng: Optional[np.random.Generator] = None) -> LossGrads:
    """MSE between forecast and target in the context's normalized space.

    With `train_adapter` the base model is frozen: base gradients are all zero
    and only adapter factors receive gradient.
    """
    contexts = _check_contexts(model, contexts)
    targets = np.asarray(targets, dtype=np.float64).reshape(contexts.shape[0], -1)
    if contexts.shape[0] == 0:
        raise ShapeError("Empty batch")
    if targets.shape[1] != model.config.horizon:
        raise ShapeError(f"Target length {targets.shape[1]} does not match H = {model.config.horizon}")
    if train_adapter and adapter is None:
        raise ConfigError("train_adapter requires an adapter")

    cfg = model.config
    p = model.params
    normalized, loc, scale = normalize_batch(contexts)
    target_n = (targets - loc) / scale

    masks = _dropout_masks(model, contexts.shape[0], dropout_rate, rng) if adapter is not None else None
    cache: Dict[str, np.ndarray] = {}
    out, _ = _forward_normalized(model, adapter, normalized, masks, cache)

    residual = out - target_n
    loss = float(np.mean(residual ** 2))
    grad_out = 2.0 * residual / residual.size

    base_grads = {name: np.zeros_like(value) for name, value in p.items()}
    adapter_grads: Dict[str, np.ndarray] = {}
    want_base = not train_adapter

    def has(name):
        return adapter is not None and name in adapter.factors

    # head
    pooled = cache["pooled"]
    if want_base:
        base_grads["head.weight"] = grad_out.T @ pooled
        base_grads["head.bias"] = grad_out.sum(axis=0)
    d_pooled = grad_out @ p["head.weight"]
    if has("head"):
        d_pooled = d_pooled + _adapter_backward("head", grad_out, adapter, cache, adapter_grads) * (
            1.0 if masks is None else masks["head"])

    d_hidden = np.repeat(d_pooled[:, None, :] / cfg.num_tokens, cfg.num_tokens, axis=1)

    for b in reversed(range(cfg.num_blocks)):
        fc1, fc2 = f"block{b}.fc1", f"block{b}.fc2"
        block_in = cache[f"block{b}.input"]
        act = cache[f"block{b}.act"]
        d = cfg.hidden_dim

        d_act = d_hidden @ p[f"{fc2}.weight"]
        if want_base:
            base_grads[f"{fc2}.weight"] = d_hidden.reshape(-1, d).T @ act.reshape(-1, d)
            base_grads[f"{fc2}.bias"] = d_hidden.reshape(-1, d).sum(axis=0)
        if has(fc2):
            d_act = d_act + _adapter_backward(fc2, d_hidden, adapter, cache, adapter_grads) * (
                1.0 if masks is None else masks[fc2])

        d_pre = d_act * (1.0 - act ** 2)
        d_in = d_pre @ p[f"{fc1}.weight"]
        if want_base:
            base_grads[f"{fc1}.weight"] = d_pre.reshape(-1, d).T @ block_in.reshape(-1, d)
            base_grads[f"{fc1}.bias"] = d_pre.reshape(-1, d).sum(axis=0)
        if has(fc1):
            d_in = d_in + _adapter_backward(fc1, d_pre, adapter, cache, adapter_grads) * (
                1.0 if masks is None else masks[fc1])

        d_hidden = d_hidden + d_in

    if want_base:
        patches = cache["patches"]
        base_grads["embed.weight"] = d_hidden.reshape(-1, cfg.hidden_dim).T @ patches.reshape(-1, cfg.patch_size)
        base_grads["embed.bias"] = d_hidden.reshape(-1, cfg.hidden_dim).sum(axis=0)

    return LossGrads(loss, base_grads, adapter_grads)


class AdamW:
    """Adam with decoupled weight decay over a name -> array mapping"""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps) + cfg.weight_decay * params[name]
            params[name] -= cfg.learning_rate * update


def check_divergence(loss: float, step: int, where: str) -> None:
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise NumericalError(f"{where} diverged at step {step}: loss={loss}")


def pretrain(model: BaseModel, windows: List[Window], opt: OptimizerConfig,
             rng: np.random.Generator) -> Tuple[BaseModel, List[float]]:
    """Full-parameter training on windows; returns a new model and the per-step loss trace"""
    contexts, targets = stack_windows(windows)
    trained = model.copy()
    optimizer = AdamW(opt)
    batch = min(opt.batch_size, contexts.shape[0])
    trace: List[float] = []

    for step in range(opt.max_steps):
        index = rng.choice(contexts.shape[0], size=batch, replace=False)
        result = loss_and_grads(trained, None, contexts[index], targets[index])
        check_divergence(result.loss, step, "pretrain")
        optimizer.step(trained.params, result.base_grads)
        trace.append(result.loss)
        if step % 100 == 0:
            logger.info("pretrain_step", step=step, loss=result.loss)

    trained.step_count = model.step_count + opt.max_steps
    return trained, trace


def save_model(model: BaseModel, directory) -> Path:
    directory = Path(directory)
    hashes = save_tensors(directory, model.params)
    write_json(directory / "manifest.json", {
        "config": asdict(model.config),
        "seed": model.config.seed,
        "step_count": model.step_count,
        "parameter_count": model.parameter_count,
        "tensors": hashes,
    })
    return directory


def load_model(directory) -> BaseModel:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    cfg = ModelConfig(**manifest["config"])
    params = load_tensors(directory, parameter_shapes(cfg).keys())
    for name, shape in parameter_shapes(cfg).items():
        if params[name].shape != shape:
            raise ShapeError(f"{directory}: {name} has shape {params[name].shape}, expected {shape}")
    return BaseModel(cfg, params, int(manifest.get("step_count", 0)))


__all__ = [
    "ModelConfig",
    "OptimizerConfig",
    "BaseModel",
    "ForwardResult",
    "LossGrads",
    "parameter_shapes",
    "adapted_maps",
    "init_model",
    "forward",
    "forward_batch",
    "embed",
    "embed_batch",
    "loss_and_grads",
    "AdamW",
    "pretrain",
    "check_divergence",
    "save_model",
    "load_model",
]
