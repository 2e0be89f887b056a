#!/usr/bin/env python3
"""
MixFT fine-tuning and zero-shot forecasting
Embeds fine-tuning windows, splits them into sub-domains with a Bayesian mixture,
trains one adapter per sub-domain and routes each new context to an adapter.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from base_forecaster import BaseModel, OptimizerConfig, embed_batch, forward, load_model
from bayesian_mixture import (PREDICTIVES, GmmPosterior, classification_entropy, classify_batch,
                              default_prior, fit_vi, kmeans_fit, load_posterior, nearest_centroid,
                              partition, save_posterior)
from evaluation_kit import EvalRecord, MaseSummary, RankTable, window_mase
from lora_adapters import (AVERAGE_LEVELS, AdapterConfig, AdapterSet, LoraModule, average_loras,
                           group_identical, init_lora, load_adapter_set, save_adapter_set, train_lora)
from mixft_errors import ConfigError, DataError, EmptyPartitionError, ShapeError
from series_data import (DEFAULT_MIXUP_BETA, Corpus, Window, WindowSpec, evaluation_corpus_windows,
                         evaluation_windows, holdout_split, stack_windows, window_corpus)
from tensor_store import load_tensors, read_json, save_tensors, sha256_directory, write_json

logger = structlog.get_logger(__name__)

PARTITIONERS = ("vi", "kmeans")


class RoutingMode(str, Enum):
    HARD = "hard"
    SOFT = "soft"
    ENSEMBLE = "ensemble"
    MU = "mu"

    @classmethod
    def parse(cls, value) -> "RoutingMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"Unknown routing mode: {value}; valid: {valid}") from None


@dataclass(frozen=True)
class FinetuneSettings:
    """Everything fine-tuning needs besides data and the base model"""
    window: WindowSpec = field(default_factory=WindowSpec)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    mixup_beta: float = DEFAULT_MIXUP_BETA
    partitioner: str = "vi"
    predictive: str = "student_t"
    average_level: str = "factor"
    vi_max_iters: int = 500
    vi_tol: float = 1e-6
    kmeans_restarts: int = 10
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.partitioner not in PARTITIONERS:
            raise ConfigError(f"Unknown partitioner '{self.partitioner}'; valid: {', '.join(PARTITIONERS)}")
        if self.predictive not in PREDICTIVES:
            raise ConfigError(f"Unknown predictive '{self.predictive}'; valid: {', '.join(PREDICTIVES)}")
        if self.average_level not in AVERAGE_LEVELS:
            raise ConfigError(f"Unknown averaging level '{self.average_level}'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def describe(self) -> Dict[str, Any]:
        return {
            "window": asdict(self.window),
            "adapter": asdict(self.adapter),
            "optim": asdict(self.optim),
            "mixup_beta": self.mixup_beta,
            "partitioner": self.partitioner,
            "predictive": self.predictive,
            "average_level": self.average_level,
            "vi_max_iters": self.vi_max_iters,
            "vi_tol": self.vi_tol,
            "kmeans_restarts": self.kmeans_restarts,
            "seed": self.seed,
        }


@dataclass
class MixftArtifact:
    """Frozen base model, fitted partitioner and one adapter per sub-domain"""
    model: BaseModel
    adapters: AdapterSet
    partitioner: str = "vi"
    posterior: Optional[GmmPosterior] = None
    centroids: Optional[np.ndarray] = None
    predictive: str = "student_t"
    average_level: str = "factor"
    manifest: Dict[str, Any] = field(default_factory=dict)
    base_model_ref: Optional[Dict[str, str]] = None

    def __post_init__(self):
        if self.partitioner == "vi" and self.posterior is None:
            raise ConfigError("A vi artifact needs a fitted posterior")
        if self.partitioner == "kmeans" and self.centroids is None:
            raise ConfigError("A kmeans artifact needs centroids")
        if len(self.adapters) != self.num_components:
            raise ShapeError(f"{len(self.adapters)} adapters for {self.num_components} components")

    @property
    def num_components(self) -> int:
        if self.partitioner == "kmeans":
            return int(self.centroids.shape[0])
        return self.posterior.num_components

    def route(self, contexts) -> Tuple[np.ndarray, np.ndarray]:
        """(chosen component per context, N x K routing probabilities)"""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        Z = embed_batch(self.model, contexts)
        if self.partitioner == "kmeans":
            chosen = nearest_centroid(Z, self.centroids)
            return chosen, np.eye(self.num_components)[chosen]
        chosen, log_probs = classify_batch(Z, self.posterior, self.predictive)
        return chosen, np.exp(log_probs)


@dataclass
class RouteCost:
    """Adapted forward passes actually run, and distinct adapters that contributed"""
    forward_passes: int = 0
    adapters_used: int = 0

    def __iadd__(self, other: "RouteCost") -> "RouteCost":
        self.forward_passes += other.forward_passes
        self.adapters_used += other.adapters_used
        return self


@dataclass
class RoutingDiagnostics:
    probs: np.ndarray
    chosen: int
    entropy_bits: float
    cost: RouteCost


@dataclass
class ForecastOutput:
    forecast: np.ndarray
    diagnostics: RoutingDiagnostics


@dataclass
class BatchForecast:
    forecasts: np.ndarray
    probs: np.ndarray
    chosen: np.ndarray
    cost: RouteCost


def route_forecast(model: BaseModel, modules: Sequence[LoraModule], x, probs, mode,
                   level: str = "factor", chosen: Optional[int] = None) -> Tuple[np.ndarray, RouteCost]:
    """Forecast one context under a routing mode"""
    mode = RoutingMode.parse(mode)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(modules),):
        raise ShapeError(f"{probs.size} routing probabilities for {len(modules)} adapters")

    cost = RouteCost()

    def run(module: LoraModule) -> np.ndarray:
        cost.forward_passes += 1
        return forward(model, module, x).forecast

    if mode is RoutingMode.HARD:
        k = int(np.argmax(probs)) if chosen is None else int(chosen)
        cost.adapters_used = 1
        return run(modules[k]), cost

    if mode in (RoutingMode.MU, RoutingMode.SOFT):
        weights = np.full(len(modules), 1.0 / len(modules)) if mode is RoutingMode.MU else probs
        cost.adapters_used = len(group_identical(modules, weights))
        return run(average_loras(modules, weights, level)), cost

    groups = group_identical(modules, probs)
    cost.adapters_used = len(groups)
    if len(groups) == 1:
        return run(groups[0][0]), cost
    total = sum(weight * run(module) for module, weight in groups)
    return total, cost


def forecast(artifact: MixftArtifact, x, mode=RoutingMode.HARD) -> ForecastOutput:
    """Zero-shot forecast of one context plus its routing diagnostics"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forecast takes one context vector, got shape {x.shape}")
    chosen, probs = artifact.route(x[None, :])
    y_hat, cost = route_forecast(artifact.model, artifact.adapters.modules, x, probs[0],
                                 mode, artifact.average_level, int(chosen[0]))
    return ForecastOutput(y_hat, RoutingDiagnostics(probs[0], int(chosen[0]),
                                                    classification_entropy(probs[0]), cost))


def forecast_batch(artifact: MixftArtifact, contexts, mode=RoutingMode.HARD) -> BatchForecast:
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    chosen, probs = artifact.route(contexts)
    rows, total = [], RouteCost()
    for x, p, k in zip(contexts, probs, chosen):
        y_hat, cost = route_forecast(artifact.model, artifact.adapters.modules, x, p, mode,
                                     artifact.average_level, int(k))
        rows.append(y_hat)
        total += cost
    return BatchForecast(np.stack(rows), probs, chosen, total)


def other_components(chosen, probs) -> np.ndarray:
    """Most probable component other than the chosen one, per context"""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    chosen = np.asarray(chosen, dtype=np.int64)
    if probs.shape[1] < 2:
        raise ConfigError("Other-component forecasts need at least two sub-domains")
    masked = probs.copy()
    masked[np.arange(chosen.size), chosen] = -np.inf
    return np.argmax(masked, axis=1)


def forecast_other_component(artifact: MixftArtifact, contexts) -> BatchForecast:
    """Forecast every context with an adapter it was not routed to"""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    chosen, probs = artifact.route(contexts)
    others = other_components(chosen, probs)
    modules = artifact.adapters.modules
    rows = [forward(artifact.model, modules[k], x).forecast for x, k in zip(contexts, others)]
    return BatchForecast(np.stack(rows), probs, others, RouteCost(len(rows), len(rows)))


def _windows_of(corpora: Sequence[Corpus], spec: WindowSpec) -> List[Window]:
    windows: List[Window] = []
    for corpus in corpora:
        windows.extend(window_corpus(corpus, spec))
    return windows


def _replay_windows(replay: Optional[Corpus], spec: WindowSpec) -> Optional[List[Window]]:
    if replay is None:
        return None
    return window_corpus(replay, spec)


def _train_adapters(model: BaseModel, subsets: Sequence[Sequence[Window]],
                    replay: Optional[List[Window]], settings: FinetuneSettings,
                    labels: Sequence[str]) -> List[Tuple[LoraModule, List[float]]]:
    """Adapter k starts from seed adapter.seed + k and draws batches from rng([seed, k])"""
    def train(k: int):
        cfg = replace(settings.adapter, seed=settings.adapter.seed + k)
        lora = init_lora(model.config, cfg)
        rng = np.random.default_rng([settings.seed, k])
        return train_lora(model, lora, subsets[k], replay, settings.optim, rng,
                          settings.mixup_beta, label=labels[k])

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        return list(pool.map(train, range(len(subsets))))


def finetune(corpora: Sequence[Corpus], model: BaseModel, K: int, settings: FinetuneSettings,
             replay: Optional[Corpus] = None) -> MixftArtifact:
    """Embed all windows, fit the mixture, split by hard assignment, train one adapter per split"""
    if K < 1:
        raise ConfigError("K must be >= 1")
    if not corpora:
        raise DataError("finetune needs at least one corpus")

    windows = _windows_of(corpora, settings.window)
    if not windows:
        raise DataError("Fine-tuning corpora produced no windows")
    contexts, _ = stack_windows(windows)
    Z = embed_batch(model, contexts)

    posterior = centroids = None
    if settings.partitioner == "vi":
        fit = fit_vi(Z, K, default_prior(Z, K), settings.vi_max_iters, settings.vi_tol,
                     init_seed=settings.seed)
        posterior = fit.posterior
        split = partition(windows, Z, posterior, predictive=settings.predictive)
    else:
        clusters = kmeans_fit(Z, K, restarts=settings.kmeans_restarts, seed=settings.seed)
        centroids = clusters.centroids
        split = partition(windows, Z, labels=clusters.labels, num_components=K)

    if split.empty:
        raise EmptyPartitionError(
            f"Sub-domains {split.empty} received no windows; reduce K (currently {K})",
            empty_components=split.empty,
        )

    trained = _train_adapters(model, split.subsets, _replay_windows(replay, settings.window),
                              settings, [f"k{k}" for k in range(K)])
    sizes = [len(s) for s in split.subsets]
    logger.info("finetuned", K=K, partitioner=settings.partitioner, partition_sizes=sizes)

    manifest = {
        "K": K,
        "datasets": [c.name for c in corpora],
        "partition_sizes": sizes,
        "final_losses": [trace[-1] if trace else None for _, trace in trained],
        "settings": settings.describe(),
    }
    return MixftArtifact(model, AdapterSet([module for module, _ in trained]), settings.partitioner,
                         posterior, centroids, settings.predictive, settings.average_level, manifest)


def shared_baseline(corpora: Sequence[Corpus], model: BaseModel, settings: FinetuneSettings,
                    replay: Optional[Corpus] = None) -> LoraModule:
    """One adapter on all fine-tuning windows"""
    windows = _windows_of(corpora, settings.window)
    if not windows:
        raise DataError("Fine-tuning corpora produced no windows")
    [(module, _)] = _train_adapters(model, [windows], _replay_windows(replay, settings.window),
                                    settings, ["shared"])
    return module


def per_dataset_baseline(corpora: Sequence[Corpus], model: BaseModel, settings: FinetuneSettings,
                         replay: Optional[Corpus] = None, shared_seed: bool = False) -> AdapterSet:
    """One adapter per dataset, keyed by dataset name; forecasts use their uniform average"""
    subsets, keys = [], []
    for corpus in corpora:
        windows = window_corpus(corpus, settings.window)
        if not windows:
            logger.warning("dataset_skipped", dataset=corpus.name, reason="no windows")
            continue
        subsets.append(windows)
        keys.append(corpus.name)
    if not subsets:
        raise DataError("No dataset produced fine-tuning windows")

    replay_windows = _replay_windows(replay, settings.window)
    if shared_seed:
        trained = [_train_adapters(model, [s], replay_windows, settings, [key])[0]
                   for s, key in zip(subsets, keys)]
    else:
        trained = _train_adapters(model, subsets, replay_windows, settings, keys)
    return AdapterSet([module for module, _ in trained], keys)


@dataclass
class Method:
    """Named forecaster over a batch of contexts (N x L -> N x H)"""
    name: str
    predict: Callable[[np.ndarray], np.ndarray]


def base_method(model: BaseModel, name: str = "Base") -> Method:
    return Method(name, lambda X: np.stack([forward(model, None, x).forecast for x in X]))


def adapter_method(name: str, model: BaseModel, module: LoraModule) -> Method:
    return Method(name, lambda X: np.stack([forward(model, module, x).forecast for x in X]))


def mu_method(name: str, model: BaseModel, adapters: AdapterSet, level: str = "factor") -> Method:
    uniform = np.full(len(adapters), 1.0 / len(adapters))
    return adapter_method(name, model, average_loras(adapters.modules, uniform, level))


def mixft_method(name: str, artifact: MixftArtifact, mode=RoutingMode.HARD) -> Method:
    return Method(name, lambda X: forecast_batch(artifact, X, mode).forecasts)


def other_component_method(name: str, artifact: MixftArtifact) -> Method:
    return Method(name, lambda X: forecast_other_component(artifact, X).forecasts)


def score_method(method: Method, windows: Sequence[Window]) -> MaseSummary:
    contexts, _ = stack_windows(windows)
    return window_mase(method.predict(contexts), windows)


def score_methods(methods: Sequence[Method], corpora: Sequence[Corpus], spec: WindowSpec,
                  stride: Optional[int] = None, seed: int = 0,
                  records: Optional[Dict[Tuple[str, str], EvalRecord]] = None
                  ) -> Dict[Tuple[str, str], EvalRecord]:
    """MASE of every method on every evaluation corpus, added under `seed`"""
    records = {} if records is None else records
    for corpus in corpora:
        windows = evaluation_corpus_windows(corpus, spec, stride)
        if not windows:
            logger.warning("evaluation_dataset_skipped", dataset=corpus.name)
            continue
        for method in methods:
            record = records.setdefault((corpus.name, method.name), EvalRecord(corpus.name, method.name))
            record.per_seed[seed] = score_method(method, windows)
    return records


def choose_k(candidate_ks: Sequence[int], average_ranks) -> int:
    """Lowest average rank; ties go to the smaller K"""
    ks = np.asarray(candidate_ks, dtype=np.int64)
    ranks = np.asarray(average_ranks, dtype=np.float64)
    if ks.size == 0 or ks.shape != ranks.shape:
        raise ConfigError("Need one average rank per candidate K")
    order = np.argsort(ks, kind="stable")
    ks, ranks = ks[order], ranks[order]
    return int(ks[np.flatnonzero(ranks <= ranks.min() + 1e-12)[0]])


@dataclass
class KSelection:
    chosen: int
    average_ranks: Dict[int, float]
    table: Optional[RankTable] = None
    excluded: List[str] = field(default_factory=list)


def validation_split(corpus: Corpus, spec: WindowSpec, fraction: float = 0.1) -> Tuple[Corpus, List[Window]]:
    """First (1 - fraction) of every series for training, windows inside the rest for validation"""
    heads, validation = [], []
    for series in corpus.series:
        head, tail = holdout_split(series, fraction)
        heads.append(head)
        if tail.length >= spec.context_length + spec.horizon:
            validation.extend(evaluation_windows(tail, spec, stride=1, dataset_id=corpus.name))
    return Corpus(corpus.name, heads), validation


def select_k(corpora: Sequence[Corpus], model: BaseModel, candidate_ks: Sequence[int],
             settings: FinetuneSettings, replay: Optional[Corpus] = None,
             fraction: float = 0.1) -> KSelection:
    """Pick K by average validation rank over fine-tuning datasets"""
    ks = sorted({int(k) for k in candidate_ks})
    if not ks:
        raise ConfigError("candidate_ks must not be empty")

    train_corpora, validation, excluded = [], {}, []
    for corpus in corpora:
        train, windows = validation_split(corpus, settings.window, fraction)
        train_corpora.append(train)
        if windows:
            validation[corpus.name] = windows
        else:
            logger.warning("validation_dataset_excluded", dataset=corpus.name,
                           reason="held-out segment shorter than L + H")
            excluded.append(corpus.name)
    if not validation:
        raise DataError("No fine-tuning dataset is long enough for validation")

    if len(ks) == 1:
        return KSelection(ks[0], {ks[0]: 1.0}, None, excluded)

    datasets = list(validation)
    inner = replace(settings, threads=1)

    def run(k: int) -> List[float]:
        try:
            artifact = finetune(train_corpora, model, k, inner, replay)
        except EmptyPartitionError as e:
            logger.warning("candidate_infeasible", K=k, empty=e.empty_components)
            return [np.inf] * len(datasets)
        method = mixft_method(f"K={k}", artifact)
        return [score_method(method, validation[d]).mean for d in datasets]

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        scores = list(pool.map(run, ks))

    table = RankTable([f"K={k}" for k in ks], datasets, np.array(scores)).without_missing()
    excluded = excluded + table.excluded
    ranks = table.average_ranks()
    chosen = choose_k(ks, ranks)
    logger.info("k_selected", chosen=chosen, ranks=dict(zip(ks, ranks.tolist())))
    return KSelection(chosen, dict(zip(ks, ranks.tolist())), table, excluded)


@dataclass
class SweepResult:
    table: RankTable
    records: Dict[Tuple[str, str], EvalRecord]
    artifacts: Dict[int, MixftArtifact]


def sweep_k(finetune_corpora: Sequence[Corpus], eval_corpora: Sequence[Corpus], model: BaseModel,
            ks: Sequence[int], settings: FinetuneSettings, replay: Optional[Corpus] = None,
            mode=RoutingMode.HARD, stride: Optional[int] = None) -> SweepResult:
    """Evaluate MixFT for every K on the evaluation corpora and rank the choices"""
    ks = sorted({int(k) for k in ks})
    artifacts, records = {}, {}
    for k in ks:
        artifacts[k] = finetune(finetune_corpora, model, k, settings, replay)
        score_methods([mixft_method(f"K={k}", artifacts[k], mode)], eval_corpora,
                      settings.window, stride, settings.seed, records)

    methods = [f"K={k}" for k in ks]
    datasets = list(dict.fromkeys(d for d, _ in records))
    scores = np.array([[records[(d, m)].mean for d in datasets] for m in methods])
    return SweepResult(RankTable(methods, datasets, scores).without_missing(), records, artifacts)


def save_artifact(artifact: MixftArtifact, directory, base_model_dir) -> Path:
    """manifest.json, gmm/ or kmeans/, adapter_k/ and base_model/reference.json"""
    directory = Path(directory)
    base_model_dir = Path(base_model_dir)
    reference = {"path": str(base_model_dir.resolve()), "hash": sha256_directory(base_model_dir)}
    write_json(directory / "base_model" / "reference.json", reference)

    if artifact.partitioner == "vi":
        save_posterior(artifact.posterior, directory / "gmm")
    else:
        save_tensors(directory / "kmeans", {"centroids": artifact.centroids})
    save_adapter_set(artifact.adapters, directory)

    write_json(directory / "manifest.json", {
        "K": artifact.num_components,
        "partitioner": artifact.partitioner,
        "predictive": artifact.predictive,
        "average_level": artifact.average_level,
        "keys": artifact.adapters.keys,
        "details": artifact.manifest,
    })
    artifact.base_model_ref = reference
    logger.info("artifact_saved", path=str(directory), K=artifact.num_components)
    return directory


def load_artifact(directory, base_model_dir=None) -> MixftArtifact:
    """Load an artifact; the base model must hash to the recorded value"""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    reference = read_json(directory / "base_model" / "reference.json")

    base_model_dir = Path(base_model_dir or reference["path"])
    actual = sha256_directory(base_model_dir) if base_model_dir.exists() else None
    if actual != reference["hash"]:
        raise DataError(f"Base model at {base_model_dir} does not match the model this artifact was tuned on")
    model = load_model(base_model_dir)

    K = int(manifest["K"])
    posterior = centroids = None
    if manifest["partitioner"] == "vi":
        posterior = load_posterior(directory / "gmm")
    else:
        centroids = load_tensors(directory / "kmeans", ["centroids"])["centroids"].reshape(K, -1)

    return MixftArtifact(
        model,
        load_adapter_set(directory, K, manifest.get("keys") or []),
        manifest["partitioner"],
        posterior,
        centroids,
        manifest["predictive"],
        manifest["average_level"],
        manifest.get("details", {}),
        reference,
    )


__all__ = [
    "PARTITIONERS",
    "RoutingMode",
    "FinetuneSettings",
    "MixftArtifact",
    "RoutingDiagnostics",
    "ForecastOutput",
    "BatchForecast",
    "RouteCost",
    "route_forecast",
    "forecast",
    "forecast_batch",
    "other_components",
    "forecast_other_component",
    "finetune",
    "shared_baseline",
    "per_dataset_baseline",
    "Method",
    "base_method",
    "adapter_method",
    "mu_method",
    "mixft_method",
    "other_component_method",
    "score_method",
    "score_methods",
    "choose_k",
    "KSelection",
    "validation_split",
    "select_k",
    "SweepResult",
    "sweep_k",
    "save_artifact",
    "load_artifact",
]
