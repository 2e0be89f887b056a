#!/usr/bin/env python3
"""
Forecast scoring and reporting
MASE, average rank, classification entropy, membership timelines and the report directory
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import structlog
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from bayesian_mixture import classification_entropy
from mixft_errors import ConfigError, DataError, ShapeError, UndefinedMaseError
from series_data import Corpus, TimeSeries, Window, context_windows, evaluation_corpus_windows
from templates.report_readme import get_report_readme

logger = structlog.get_logger(__name__)

FLOAT_FORMAT = "%.10g"
SVG_SALT = "mixft"

plt.rcParams["svg.hashsalt"] = SVG_SALT


def mase(y_hat, y, x, seasonality: int) -> float:
    """((L - S) / H) * sum|y_hat - y| / sum_{i <= L-S} |x_i - x_{i+S}|"""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y_hat.shape != y.shape or y.ndim != 1:
        raise ShapeError(f"Forecast shape {y_hat.shape} does not match target shape {y.shape}")

    L, H, S = x.size, y.size, int(seasonality)
    if not 1 <= S < L:
        raise DataError(f"Seasonality {S} must lie in [1, L) with L = {L}")

    naive = float(np.abs(x[S:] - x[:-S]).sum())
    if naive == 0.0:
        raise UndefinedMaseError("Context is constant at its seasonal lag; MASE is undefined")
    return ((L - S) / H) * float(np.abs(y_hat - y).sum()) / naive


@dataclass
class MaseSummary:
    values: np.ndarray
    undefined: int = 0

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.values.size else math.nan

    @property
    def stderr(self) -> float:
        if self.values.size < 2:
            return 0.0
        return float(self.values.std(ddof=1) / math.sqrt(self.values.size))


def window_mase(forecasts, windows: Sequence[Window]) -> MaseSummary:
    """MASE per window; undefined windows are counted and left out"""
    forecasts = np.asarray(forecasts, dtype=np.float64)
    if forecasts.shape[0] != len(windows):
        raise ShapeError(f"{forecasts.shape[0]} forecasts for {len(windows)} windows")

    values, undefined = [], 0
    for y_hat, w in zip(forecasts, windows):
        try:
            values.append(mase(y_hat, w.target, w.context, w.seasonality))
        except UndefinedMaseError:
            undefined += 1
    if undefined:
        logger.warning("undefined_mase_windows", count=undefined, total=len(windows))
    return MaseSummary(np.asarray(values, dtype=np.float64), undefined)


def average_rank(scores) -> np.ndarray:
    """Methods x datasets scores -> per-method average rank (ascending, ties share the mean)"""
    return rank_matrix(scores).mean(axis=1)


def rank_matrix(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError("Scores must be a methods x datasets matrix")
    if np.isnan(scores).any():
        raise DataError("Rank table has missing cells")
    return rankdata(scores, method="average", axis=0)


@dataclass
class RankTable:
    """Methods x datasets matrix of scores, lower is better"""
    methods: List[str]
    datasets: List[str]
    scores: np.ndarray
    excluded: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.methods), len(self.datasets)):
            raise ShapeError(
                f"Scores shape {self.scores.shape} does not match "
                f"{len(self.methods)} methods x {len(self.datasets)} datasets"
            )

    def ranks(self) -> np.ndarray:
        return rank_matrix(self.scores)

    def average_ranks(self) -> np.ndarray:
        return average_rank(self.scores)

    def without_missing(self) -> "RankTable":
        """Drop datasets with a missing (undefined) score for any method"""
        missing = np.isnan(self.scores).any(axis=0)
        if not missing.any():
            return self
        dropped = [d for d, m in zip(self.datasets, missing) if m]
        logger.warning("datasets_excluded_from_ranks", datasets=dropped, count=len(dropped),
                       reason="undefined MASE")
        if missing.all():
            raise DataError(f"Every dataset has undefined MASE; nothing to rank ({', '.join(dropped)})")
        keep = ~missing
        return RankTable(self.methods, [d for d, k in zip(self.datasets, keep) if k],
                         self.scores[:, keep], self.excluded + dropped)

    def best(self) -> str:
        """Lowest average rank; ties go to the earlier method"""
        return self.methods[int(np.argmin(self.average_ranks()))]

    def to_frame(self) -> pd.DataFrame:
        ranks = self.ranks()
        frame = pd.DataFrame({"method": self.methods, "average_rank": self.average_ranks()})
        for j, dataset in enumerate(self.datasets):
            frame[f"rank_{dataset}"] = ranks[:, j]
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, method_column: str = "method") -> "RankTable":
        """Wide frame: one row per method, one score column per dataset"""
        datasets = [c for c in frame.columns if c != method_column]
        return cls(frame[method_column].astype(str).tolist(), datasets,
                   frame[datasets].to_numpy(dtype=np.float64))

    @classmethod
    def from_csv(cls, path, method_column: str = "method") -> "RankTable":
        path = Path(path)
        if not path.exists():
            raise DataError(f"Score table not found: {path}")
        return cls.from_frame(pd.read_csv(path), method_column)


@dataclass
class EvalRecord:
    """MASE of one method on one dataset across training seeds"""
    dataset_id: str
    method: str
    per_seed: Dict[int, MaseSummary] = field(default_factory=dict)

    @property
    def seed_means(self) -> np.ndarray:
        return np.array([self.per_seed[s].mean for s in sorted(self.per_seed)])

    @property
    def mean(self) -> float:
        return float(self.seed_means.mean())

    @property
    def stderr(self) -> float:
        means = self.seed_means
        if means.size < 2:
            return 0.0
        return float(means.std(ddof=1) / math.sqrt(means.size))


def records_table(records: Sequence[EvalRecord]) -> RankTable:
    """Rank table of seed-averaged MASE; methods and datasets keep first-seen order"""
    methods: List[str] = []
    datasets: List[str] = []
    for record in records:
        if record.method not in methods:
            methods.append(record.method)
        if record.dataset_id not in datasets:
            datasets.append(record.dataset_id)

    scores = np.full((len(methods), len(datasets)), np.nan)
    for record in records:
        scores[methods.index(record.method), datasets.index(record.dataset_id)] = record.mean
    return RankTable(methods, datasets, scores).without_missing()


def mase_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    rows = []
    for record in records:
        for seed in sorted(record.per_seed):
            summary = record.per_seed[seed]
            rows.append({"dataset": record.dataset_id, "method": record.method, "seed": str(seed),
                         "mean": summary.mean, "stderr": summary.stderr,
                         "windows": int(summary.values.size), "undefined": summary.undefined})
        rows.append({"dataset": record.dataset_id, "method": record.method, "seed": "all",
                     "mean": record.mean, "stderr": record.stderr,
                     "windows": int(sum(s.values.size for s in record.per_seed.values())),
                     "undefined": int(sum(s.undefined for s in record.per_seed.values()))})
    return pd.DataFrame(rows, columns=["dataset", "method", "seed", "mean", "stderr",
                                       "windows", "undefined"])


@dataclass
class EntropySummary:
    per_dataset: Dict[str, float]
    counts: Dict[str, int]
    overall: float

    def to_frame(self) -> pd.DataFrame:
        rows = [{"dataset": name, "windows": self.counts[name], "mean_entropy_bits": value}
                for name, value in self.per_dataset.items()]
        rows.append({"dataset": "overall", "windows": int(sum(self.counts.values())),
                     "mean_entropy_bits": self.overall})
        return pd.DataFrame(rows, columns=["dataset", "windows", "mean_entropy_bits"])


def entropy_report(artifact, corpora: Sequence[Corpus], spec, stride: Optional[int] = None) -> EntropySummary:
    """Average classification entropy (bits) of the routing probabilities per dataset"""
    per_dataset, counts, every = {}, {}, []
    for corpus in corpora:
        windows = evaluation_corpus_windows(corpus, spec, stride)
        if not windows:
            logger.warning("entropy_dataset_skipped", dataset=corpus.name)
            continue
        _, probs = artifact.route(np.stack([w.context for w in windows]))
        entropies = [classification_entropy(p) for p in probs]
        per_dataset[corpus.name] = float(np.mean(entropies))
        counts[corpus.name] = len(entropies)
        every.extend(entropies)
    overall = float(np.mean(every)) if every else 0.0
    return EntropySummary(per_dataset, counts, overall)


@dataclass
class Timeline:
    series_id: str
    channel: int
    time_index: np.ndarray
    component: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"time_index": self.time_index, "component": self.component})


def membership_timeline(artifact, series: TimeSeries, channel: int = 0) -> Timeline:
    """Sub-domain of every stride-1 context, indexed by the last observed step"""
    L = artifact.model.config.context_length
    starts, contexts = context_windows(series, L, channel)
    chosen, _ = artifact.route(contexts)
    return Timeline(series.id, channel, starts + L - 1, np.asarray(chosen, dtype=np.int64))


@dataclass
class ComponentExamples:
    """Most confidently routed evaluation contexts of each sub-domain"""
    component: np.ndarray
    probability: np.ndarray
    windows: List[Window]

    def to_frame(self) -> pd.DataFrame:
        component = np.asarray(self.component, dtype=np.int64)
        rank = np.array([np.sum(component[:i] == k) + 1 for i, k in enumerate(component)], dtype=np.int64)
        return pd.DataFrame({
            "component": component,
            "rank": rank,
            "dataset": [w.dataset_id for w in self.windows],
            "series": [w.series_id for w in self.windows],
            "channel": [w.channel_index for w in self.windows],
            "start_index": [w.start_index for w in self.windows],
            "probability": np.asarray(self.probability, dtype=np.float64),
        })


def component_examples(artifact, corpora: Sequence[Corpus], spec, per_component: int = 3,
                       stride: Optional[int] = None) -> ComponentExamples:
    """Top contexts per sub-domain by routing probability; ties keep corpus order"""
    if per_component < 1:
        raise ConfigError("per_component must be >= 1")
    windows = [w for corpus in corpora for w in evaluation_corpus_windows(corpus, spec, stride)]
    if not windows:
        raise DataError("No evaluation windows to draw sub-domain examples from")
    chosen, probs = artifact.route(np.stack([w.context for w in windows]))
    confidence = probs[np.arange(len(windows)), chosen]

    picked: List[int] = []
    for k in range(artifact.num_components):
        members = np.flatnonzero(chosen == k)
        if not members.size:
            logger.warning("component_without_examples", component=k)
            continue
        order = members[np.argsort(-confidence[members], kind="stable")]
        picked.extend(int(i) for i in order[:per_component])
    return ComponentExamples(np.asarray(chosen)[picked], confidence[picked], [windows[i] for i in picked])


def routing_accuracy(predicted, truth) -> float:
    """Agreement with reference labels under the best one-to-one relabelling"""
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise ShapeError("Label vectors must be non-empty and of equal length")
    size = int(max(predicted.max(), truth.max())) + 1
    confusion = np.zeros((size, size), dtype=np.int64)
    np.add.at(confusion, (predicted, truth), 1)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / predicted.size)


class ReportWriter:
    """Writes the CSV tables, SVG charts and README of one report directory"""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []

    def _csv(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.directory / name
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.files.append(name)
        return path

    def _svg(self, fig, name: str) -> Path:
        path = self.directory / name
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        self.files.append(name)
        return path

    def write_mase(self, records: Sequence[EvalRecord]) -> Path:
        path = self._csv(mase_frame(records), "mase.csv")
        self._mase_chart(records_table(records))
        return path

    def write_ranks(self, table: RankTable, name: str = "ranks.csv") -> Path:
        if table.excluded:
            excluded = pd.DataFrame({"dataset": table.excluded, "reason": "undefined MASE"})
            self._csv(excluded, name.replace(".csv", "_excluded.csv"))
        return self._csv(table.to_frame(), name)

    def write_entropy(self, summary: EntropySummary) -> Path:
        return self._csv(summary.to_frame(), "entropy.csv")

    def write_timeline(self, timeline: Timeline) -> Path:
        stem = f"timeline_{timeline.series_id}_{timeline.channel}"
        path = self._csv(timeline.to_frame(), f"{stem}.csv")

        fig, ax = plt.subplots(figsize=(8, 2.5))
        ax.step(timeline.time_index, timeline.component, where="post")
        ax.set_xlabel("time index")
        ax.set_ylabel("component")
        if timeline.component.size:
            ax.set_yticks(range(int(timeline.component.max()) + 1))
        ax.set_title(f"{timeline.series_id} channel {timeline.channel}")
        fig.tight_layout()
        self._svg(fig, f"{stem}.svg")
        return path

    def write_component_examples(self, examples: ComponentExamples) -> Path:
        path = self._csv(examples.to_frame(), "component_examples.csv")

        components = sorted(set(int(k) for k in examples.component))
        fig, axes = plt.subplots(max(1, len(components)), 1, squeeze=False,
                                 figsize=(7, 2.2 * max(1, len(components))))
        for ax, k in zip(axes[:, 0], components):
            for c, p, w in zip(examples.component, examples.probability, examples.windows):
                if int(c) == k:
                    ax.plot(np.arange(w.context.size), w.context, label=f"{w.series_id}@{w.start_index} ({p:.2f})")
            ax.set_title(f"component {k}")
            ax.legend(fontsize="x-small")
        axes[-1, 0].set_xlabel("context step")
        fig.tight_layout()
        self._svg(fig, "component_examples.svg")
        return path

    def write_elbo(self, trace: Sequence[float]) -> Path:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(np.arange(len(trace)), trace, marker=".")
        ax.set_xlabel("iteration")
        ax.set_ylabel("ELBO")
        fig.tight_layout()
        return self._svg(fig, "elbo.svg")

    def _mase_chart(self, table: RankTable) -> Path:
        fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(table.datasets)), 3.5))
        width = 0.8 / max(1, len(table.methods))
        positions = np.arange(len(table.datasets))
        for i, method in enumerate(table.methods):
            ax.bar(positions + i * width, table.scores[i], width, label=method)
        ax.set_xticks(positions + 0.4 - width / 2)
        ax.set_xticklabels(table.datasets)
        ax.set_ylabel("MASE")
        ax.legend(fontsize="small")
        fig.tight_layout()
        return self._svg(fig, "mase.svg")

    def write_readme(self, config_hash: str, seeds: Sequence[int]) -> Path:
        path = self.directory / "README.md"
        path.write_text(get_report_readme(config_hash, seeds, self.files))
        return path


__all__ = [
    "mase",
    "MaseSummary",
    "window_mase",
    "average_rank",
    "rank_matrix",
    "RankTable",
    "EvalRecord",
    "records_table",
    "mase_frame",
    "EntropySummary",
    "entropy_report",
    "Timeline",
    "membership_timeline",
    "ComponentExamples",
    "component_examples",
    "routing_accuracy",
    "ReportWriter",
]
