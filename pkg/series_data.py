#!/usr/bin/env python3
"""
Time series ingestion, windowing, instance normalization and MixUp
Each channel of a multichannel series is windowed as its own univariate stream
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from mixft_errors import DataError, ParseError
from tensor_store import read_json, write_json

logger = structlog.get_logger(__name__)

SCALE_FLOOR = 1e-8
DEFAULT_MIXUP_BETA = 0.2


@dataclass(frozen=True)
class TimeSeries:
    """T x c matrix of samples plus the seasonality used by MASE"""
    id: str
    values: np.ndarray
    seasonality: int
    channel_names: Optional[List[str]] = None
    regime_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError(f"Series {self.id}: values must be T x c, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError(f"Series {self.id}: non-finite values present")
        if int(self.seasonality) < 1:
            raise DataError(f"Series {self.id}: seasonality must be a positive integer")
        object.__setattr__(self, "values", values)
        if self.regime_labels is not None:
            labels = np.asarray(self.regime_labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise DataError(f"Series {self.id}: one regime label per time step required")
            object.__setattr__(self, "regime_labels", labels)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class Corpus:
    """A named dataset: one or more series sharing a source"""
    name: str
    series: List[TimeSeries] = field(default_factory=list)

    @property
    def has_labels(self) -> bool:
        return bool(self.series) and all(s.regime_labels is not None for s in self.series)

    def __len__(self):
        return len(self.series)


@dataclass(frozen=True)
class WindowSpec:
    context_length: int = 64
    horizon: int = 8
    stride: int = 1

    def __post_init__(self):
        if self.context_length <= 0 or self.horizon <= 0 or self.stride <= 0:
            raise DataError(
                f"Window spec needs positive L, H and stride, got "
                f"L={self.context_length} H={self.horizon} stride={self.stride}"
            )

    @classmethod
    def paper_parity(cls) -> "WindowSpec":
        return cls(context_length=520, horizon=30, stride=1)


@dataclass(frozen=True)
class Window:
    context: np.ndarray
    target: np.ndarray
    dataset_id: str
    series_id: str
    channel_index: int
    start_index: int
    regime_label: Optional[int] = None
    seasonality: int = 1


def ingest_csv(path, seasonality: int, series_id: Optional[str] = None,
               has_header: bool = False) -> TimeSeries:
    """Read a numeric CSV; a leading non-numeric timestamp column is dropped"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")

    rows: List[List[float]] = []
    width = None
    skip_first_column = None

    with open(path, newline="") as f:
        for line_number, record in enumerate(csv.reader(f), start=1):
            if has_header and line_number == 1:
                continue
            if not record or all(not cell.strip() for cell in record):
                continue

            if skip_first_column is None:
                skip_first_column = len(record) > 1 and not _is_number(record[0])
            fields = record[1:] if skip_first_column else record

            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise ParseError(
                    f"{path}: line {line_number} has {len(fields)} columns, expected {width}",
                    line=line_number,
                )

            try:
                parsed = [float(cell) for cell in fields]
            except ValueError:
                raise ParseError(f"{path}: line {line_number} is not numeric", line=line_number)

            if not all(math.isfinite(v) for v in parsed):
                raise DataError(f"{path}: non-finite value on line {line_number}")
            rows.append(parsed)

    if not rows:
        raise DataError(f"{path}: no data rows")

    logger.debug("csv_ingested", path=str(path), rows=len(rows), channels=width)
    return TimeSeries(
        id=series_id or path.stem,
        values=np.array(rows, dtype=np.float64),
        seasonality=int(seasonality),
    )


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def training_window_count(length: int, spec: WindowSpec) -> int:
    """Windows with a full horizon target at stride 1: T - L - H + 1"""
    return max(0, length - spec.context_length - spec.horizon + 1)


def context_window_count(length: int, context_length: int) -> int:
    """Contexts followed by at least one step: T - L"""
    return max(0, length - context_length)


def window(series: TimeSeries, spec: WindowSpec, dataset_id: Optional[str] = None) -> List[Window]:
    """Cut every channel into (context, target) pairs every `stride` steps"""
    L, H = spec.context_length, spec.horizon
    if series.length < L + H:
        raise DataError(
            f"Series {series.id}: length {series.length} < L + H = {L + H}; no windows"
        )

    if series.seasonality >= L:
        raise DataError(f"Series {series.id}: seasonality {series.seasonality} must be < L = {L}")

    starts = range(0, series.length - L - H + 1, spec.stride)
    windows = []
    for channel in range(series.num_channels):
        stream = series.values[:, channel]
        for j in starts:
            label = None
            if series.regime_labels is not None:
                label = int(series.regime_labels[j + L - 1])
            windows.append(Window(
                context=stream[j:j + L].copy(),
                target=stream[j + L:j + L + H].copy(),
                dataset_id=dataset_id or series.id,
                series_id=series.id,
                channel_index=channel,
                start_index=j,
                regime_label=label,
                seasonality=series.seasonality,
            ))
    return windows


def context_windows(series: TimeSeries, context_length: int, channel: int = 0,
                    stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Every context of one channel (no target needed); returns (starts, N x L contexts)"""
    if series.length < context_length:
        raise DataError(f"Series {series.id}: length {series.length} < L = {context_length}")
    stream = series.values[:, channel]
    starts = np.arange(0, series.length - context_length + 1, stride)
    contexts = np.stack([stream[j:j + context_length] for j in starts])
    return starts, contexts


def window_corpus(corpus: Corpus, spec: WindowSpec) -> List[Window]:
    """Window every series of a corpus; series too short are skipped with a warning"""
    windows: List[Window] = []
    for series in corpus.series:
        if series.length < spec.context_length + spec.horizon:
            logger.warning("series_too_short", corpus=corpus.name, series=series.id,
                           length=series.length)
            continue
        windows.extend(window(series, spec, dataset_id=corpus.name))
    return windows


def evaluation_windows(series: TimeSeries, spec: WindowSpec, stride: Optional[int] = None,
                       dataset_id: Optional[str] = None) -> List[Window]:
    """Windows whose targets do not overlap; stride defaults to the horizon"""
    stride = spec.horizon if stride is None else stride
    return window(series, WindowSpec(spec.context_length, spec.horizon, stride), dataset_id)


def evaluation_corpus_windows(corpus: Corpus, spec: WindowSpec,
                              stride: Optional[int] = None) -> List[Window]:
    windows: List[Window] = []
    for series in corpus.series:
        if series.length < spec.context_length + spec.horizon:
            logger.warning("series_too_short", corpus=corpus.name, series=series.id,
                           length=series.length)
            continue
        windows.extend(evaluation_windows(series, spec, stride, dataset_id=corpus.name))
    return windows


def stack_windows(windows: Sequence[Window]) -> Tuple[np.ndarray, np.ndarray]:
    """(N x L contexts, N x H targets)"""
    if not windows:
        raise DataError("No windows to stack")
    contexts = np.stack([w.context for w in windows])
    targets = np.stack([w.target for w in windows])
    return contexts, targets


def instance_normalize(x) -> Tuple[np.ndarray, float, float]:
    """Mean/std scaling of one context; std is floored at SCALE_FLOOR"""
    x = np.asarray(x, dtype=np.float64)
    loc = float(np.mean(x))
    scale = max(float(np.std(x)), SCALE_FLOOR)
    return (x - loc) / scale, loc, scale


def normalize_batch(contexts: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise instance normalization; returns (normalized, loc[:, None], scale[:, None])"""
    contexts = np.asarray(contexts, dtype=np.float64)
    loc = contexts.mean(axis=-1, keepdims=True)
    scale = np.maximum(contexts.std(axis=-1, keepdims=True), SCALE_FLOOR)
    return (contexts - loc) / scale, loc, scale


def denormalize(y_hat, loc, scale):
    return np.asarray(y_hat, dtype=np.float64) * scale + loc


@dataclass
class MixupResult:
    contexts: np.ndarray
    targets: np.ndarray
    lam: np.ndarray
    partners: np.ndarray
    passthrough: bool = False


def mixup(contexts: np.ndarray, targets: np.ndarray, beta_param: float,
          rng: np.random.Generator, lam=None) -> MixupResult:
    """Mix each (x, y) pair with a uniformly drawn partner; lam ~ Beta(b, b) per pair"""
    contexts = np.asarray(contexts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    size = contexts.shape[0]

    if size < 2:
        logger.warning("mixup_passthrough", batch_size=size)
        return MixupResult(contexts, targets, np.ones(size), np.arange(size), passthrough=True)

    if lam is None:
        lam = rng.beta(beta_param, beta_param, size=size)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (size,)).copy()
    partners = rng.integers(0, size, size=size)

    weight = lam[:, None]
    mixed_x = weight * contexts + (1.0 - weight) * contexts[partners]
    mixed_y = weight * targets + (1.0 - weight) * targets[partners]
    return MixupResult(mixed_x, mixed_y, lam, partners)


def holdout_split(series: TimeSeries, fraction: float = 0.1) -> Tuple[TimeSeries, TimeSeries]:
    """Split off the last `fraction` of a series; the two parts share no time step"""
    cut = int(round(series.length * (1.0 - fraction)))
    head_labels = tail_labels = None
    if series.regime_labels is not None:
        head_labels, tail_labels = series.regime_labels[:cut], series.regime_labels[cut:]
    head = TimeSeries(f"{series.id}", series.values[:cut], series.seasonality,
                      series.channel_names, head_labels)
    tail = TimeSeries(f"{series.id}", series.values[cut:], series.seasonality,
                      series.channel_names, tail_labels)
    return head, tail


def save_corpus(corpus: Corpus, directory) -> Path:
    """Write one CSV per series plus manifest.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    for series in corpus.series:
        np.savetxt(directory / f"{series.id}.csv", series.values, delimiter=",", fmt="%.17g")
        entry: Dict = {
            "id": series.id,
            "seasonality": series.seasonality,
            "channel_names": series.channel_names,
            "labels": None,
        }
        if series.regime_labels is not None:
            label_file = f"{series.id}.labels.csv"
            np.savetxt(directory / label_file, series.regime_labels, fmt="%d")
            entry["labels"] = label_file
        entries.append(entry)

    write_json(directory / "manifest.json", {"name": corpus.name, "series": entries})
    return directory


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")

    series = []
    for entry in manifest["series"]:
        loaded = ingest_csv(directory / f"{entry['id']}.csv", entry["seasonality"], entry["id"])
        labels = None
        if entry.get("labels"):
            labels = np.loadtxt(directory / entry["labels"], dtype=np.int64, ndmin=1)
        series.append(TimeSeries(entry["id"], loaded.values, entry["seasonality"],
                                 entry.get("channel_names"), labels))
    return Corpus(manifest["name"], series)


__all__ = [
    "SCALE_FLOOR",
    "DEFAULT_MIXUP_BETA",
    "TimeSeries",
    "Corpus",
    "WindowSpec",
    "Window",
    "ingest_csv",
    "training_window_count",
    "context_window_count",
    "window",
    "context_windows",
    "window_corpus",
    "evaluation_windows",
    "evaluation_corpus_windows",
    "stack_windows",
    "instance_normalize",
    "normalize_batch",
    "denormalize",
    "MixupResult",
    "mixup",
    "holdout_split",
    "save_corpus",
    "load_corpus",
]
