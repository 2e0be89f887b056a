#!/usr/bin/env python3
"""
Synthetic regime-switching corpus generator
Free local data for developing and checking the whole pipeline without real benchmarks
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog

from mixft_errors import ConfigError
from series_data import Corpus, TimeSeries

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class RegimeParams:
    """Generator parameters of one regime"""
    period: float
    amplitude: float = 1.0
    noise_scale: float = 0.1
    trend_slope: float = 0.0


@dataclass(frozen=True)
class RegimeSpec:
    """Markov chain over regimes, switched every `segment_length` steps"""
    regimes: Tuple[RegimeParams, ...]
    transition: np.ndarray
    segment_length: int = 100
    segment_jitter: int = 0
    initial: str = "cycle"
    seed: int = 0
    seasonality: Optional[int] = None

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=np.float64)
        k = len(self.regimes)
        if k < 1:
            raise ConfigError("RegimeSpec needs at least one regime")
        if transition.shape != (k, k):
            raise ConfigError(f"Transition matrix must be {k}x{k}, got {transition.shape}")
        if np.any(transition < 0) or np.any(np.abs(transition.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigError("Transition rows must be non-negative and sum to 1")
        if any(r.period < 2 for r in self.regimes):
            raise ConfigError("All regime periods must be >= 2")
        if self.segment_length < 1 or self.segment_jitter < 0 or self.segment_jitter >= self.segment_length:
            raise ConfigError("Segment length must be >= 1 with jitter in [0, length)")
        if self.initial not in ("cycle", "uniform"):
            raise ConfigError(f"Unknown initial regime rule: {self.initial}")
        object.__setattr__(self, "transition", transition)

    @property
    def num_regimes(self) -> int:
        return len(self.regimes)

    @property
    def season(self) -> int:
        if self.seasonality is not None:
            return int(self.seasonality)
        return int(round(min(r.period for r in self.regimes)))


class SyntheticRegimeGenerator:
    """Generates labeled regime-switching series from a RegimeSpec"""

    def __init__(self, spec: RegimeSpec):
        self.spec = spec

    def regime_path(self, length: int, series_index: int, rng: np.random.Generator) -> np.ndarray:
        """Per-step regime labels from the Markov chain over segments"""
        spec = self.spec
        if spec.initial == "cycle":
            current = series_index % spec.num_regimes
        else:
            current = int(rng.integers(spec.num_regimes))

        labels = np.empty(length, dtype=np.int64)
        position = 0
        while position < length:
            seg = spec.segment_length
            if spec.segment_jitter:
                seg += int(rng.integers(-spec.segment_jitter, spec.segment_jitter + 1))
            labels[position:position + seg] = current
            position += seg
            current = int(rng.choice(spec.num_regimes, p=spec.transition[current]))
        return labels

    def render(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Values for a label path; each segment restarts its local trend"""
        t = np.arange(labels.size, dtype=np.float64)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        values = np.empty(labels.size, dtype=np.float64)

        boundaries = np.flatnonzero(np.diff(labels)) + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [labels.size]])
        for start, end in zip(starts, ends):
            regime = self.spec.regimes[labels[start]]
            local = t[start:end]
            values[start:end] = (
                regime.amplitude * np.sin(2.0 * np.pi * local / regime.period + phase)
                + regime.trend_slope * (local - start)
                + regime.noise_scale * rng.standard_normal(end - start)
            )
        return values

    def generate(self, name: str, num_series: int, length: int, seed: Optional[int] = None) -> Corpus:
        seed = self.spec.seed if seed is None else seed
        series = []
        for index in range(num_series):
            rng = np.random.default_rng([seed, index])
            labels = self.regime_path(length, index, rng)
            values = self.render(labels, rng)
            series.append(TimeSeries(
                id=f"{name}_{index:03d}",
                values=values[:, None],
                seasonality=self.spec.season,
                channel_names=["value"],
                regime_labels=labels,
            ))
        logger.debug("synthetic_corpus", name=name, num_series=num_series, length=length, seed=seed)
        return Corpus(name, series)


def synth_corpus(spec: RegimeSpec, num_series: int, length: int, seed: Optional[int] = None,
                 name: str = "synthetic") -> Corpus:
    """Seed-deterministic labeled corpus; labels give the regime at every time step"""
    return SyntheticRegimeGenerator(spec).generate(name, num_series, length, seed)


def two_regime_spec(stay: float = 0.5, segment_length: int = 100, seed: int = 0,
                    periods: Sequence[float] = (8.0, 24.0),
                    noise_scales: Sequence[float] = (0.05, 0.35)) -> RegimeSpec:
    """Short fast-seasonal regime against a long slow-seasonal one with different noise"""
    regimes = tuple(
        RegimeParams(period=p, amplitude=1.0, noise_scale=n, trend_slope=0.0)
        for p, n in zip(periods, noise_scales)
    )
    transition = np.array([[stay, 1.0 - stay], [1.0 - stay, stay]])
    return RegimeSpec(regimes, transition, segment_length=segment_length, seed=seed,
                      seasonality=int(min(periods)))


def pretraining_corpus(num_series: int = 24, length: int = 400, seed: int = 0,
                       period_range: Tuple[float, float] = (4.0, 32.0)) -> Corpus:
    """Generic sinusoids with random period, amplitude, noise and slope"""
    series = []
    for index in range(num_series):
        rng = np.random.default_rng([seed, 10_000 + index])
        regime = RegimeParams(
            period=float(rng.uniform(*period_range)),
            amplitude=float(rng.uniform(0.5, 2.0)),
            noise_scale=float(rng.uniform(0.02, 0.3)),
            trend_slope=float(rng.uniform(-0.005, 0.005)),
        )
        spec = RegimeSpec((regime,), np.ones((1, 1)), segment_length=length, seed=seed,
                          seasonality=max(2, int(round(regime.period))))
        generated = SyntheticRegimeGenerator(spec).generate("pretrain", 1, length, seed=seed + index)
        only = generated.series[0]
        series.append(TimeSeries(f"pretrain_{index:03d}", only.values, only.seasonality,
                                 only.channel_names, only.regime_labels))
    return Corpus("pretrain", series)


@dataclass
class DeskCorpora:
    """Every corpus one desk-scale experiment needs"""
    pretrain: Corpus
    finetune: List[Corpus] = field(default_factory=list)
    evaluation: List[Corpus] = field(default_factory=list)


def desk_corpora(seed: int = 0, series_per_dataset: int = 4, length: int = 800,
                 segment_length: int = 100, pretrain_series: int = 24,
                 pretrain_length: int = 400) -> DeskCorpora:
    """Fine-tuning datasets mix the two regimes in different proportions; evaluation
    datasets are fresh draws from related chains"""
    finetune_stays = (0.8, 0.5, 0.2)
    evaluation_stays = (0.7, 0.3)

    finetune = [
        synth_corpus(two_regime_spec(stay, segment_length, seed), series_per_dataset, length,
                     seed=seed * 100 + i, name=f"ft{i}")
        for i, stay in enumerate(finetune_stays)
    ]
    evaluation = [
        synth_corpus(two_regime_spec(stay, segment_length, seed), series_per_dataset, length,
                     seed=seed * 100 + 50 + i, name=f"eval{i}")
        for i, stay in enumerate(evaluation_stays)
    ]
    pretrain = pretraining_corpus(pretrain_series, pretrain_length, seed=seed)
    return DeskCorpora(pretrain, finetune, evaluation)


__all__ = [
    "RegimeParams",
    "RegimeSpec",
    "SyntheticRegimeGenerator",
    "synth_corpus",
    "two_regime_spec",
    "pretraining_corpus",
    "DeskCorpora",
    "desk_corpora",
]
