#!/usr/bin/env python3
"""
Bayesian Gaussian mixture with a normal-inverse-diagonal-Wishart prior

Per component k and dimension d the precision follows Gamma(nu/2, rate W_d/2)
and the mean, given the precision, N(m_d, 1/(kappa * precision)). The
variational posterior keeps this form; it is fitted by coordinate ascent and
classifies new points through the per-dimension Student-t predictive.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import stats
from scipy.special import digamma, entr, gammaln, log_softmax, softmax, xlogy
from sklearn.cluster import kmeans_plusplus

from mixft_errors import ConfigError, DataError, NumericalError, ShapeError
from tensor_store import load_tensors, read_json, save_tensors, write_json

logger = structlog.get_logger(__name__)

VARIANCE_FLOOR = 1e-8
DEGENERATE_MASS = 1e-6
ELBO_SLACK = 1e-8
PREDICTIVES = ("student_t", "plugin")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmPrior:
    mean: np.ndarray
    kappa: float
    nu: float
    scale: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if mean.ndim != 1 or scale.shape != mean.shape:
            raise ShapeError("Prior mean and scale must be vectors of equal length")
        if np.any(scale <= 0) or np.any(alpha <= 0):
            raise ConfigError("Prior scale W and concentration alpha must be positive")
        if self.kappa <= 0 or self.nu < 1:
            raise ConfigError("Prior needs kappa > 0 and nu >= 1")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "alpha", alpha)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def num_components(self) -> int:
        return self.alpha.size


@dataclass
class GmmPosterior:
    prior: GmmPrior
    mean: np.ndarray      # K x d
    kappa: np.ndarray     # K
    nu: np.ndarray        # K
    scale: np.ndarray     # K x d
    alpha: np.ndarray     # K
    elbo_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    degenerate: List[int] = field(default_factory=list)

    @property
    def num_components(self) -> int:
        return self.alpha.size

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


@dataclass
class VIResult:
    posterior: GmmPosterior
    responsibilities: np.ndarray


@dataclass
class Assignment:
    component: int
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class PartitionResult:
    subsets: List[list]
    labels: np.ndarray
    empty: List[int] = field(default_factory=list)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    objective_trace: List[float] = field(default_factory=list)


def default_prior(Z, K: int) -> GmmPrior:
    """m = data mean, kappa = 1, nu = dim, W = per-dimension data variance, alpha = 1/K"""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise DataError("default_prior needs an N x d matrix with N >= 2")
    if K < 1:
        raise ConfigError("K must be >= 1")

    variance = np.var(Z, axis=0, ddof=1)
    flat = variance < VARIANCE_FLOOR
    if np.any(flat):
        logger.warning("prior_variance_floored", dimensions=np.flatnonzero(flat).tolist())
        variance = np.where(flat, VARIANCE_FLOOR, variance)

    return GmmPrior(
        mean=Z.mean(axis=0),
        kappa=1.0,
        nu=float(Z.shape[1]),
        scale=variance,
        alpha=np.full(K, 1.0 / K),
    )


def _m_step(Z: np.ndarray, resp: np.ndarray, prior: GmmPrior) -> GmmPosterior:
    nk = resp.sum(axis=0)
    safe = np.where(nk > 0, nk, 1.0)
    zbar = (resp.T @ Z) / safe[:, None]
    zbar = np.where(nk[:, None] > 0, zbar, prior.mean)
    spread = np.einsum("nk,nkd->kd", resp, (Z[:, None, :] - zbar[None, :, :]) ** 2)

    kappa = prior.kappa + nk
    mean = (prior.kappa * prior.mean + nk[:, None] * zbar) / kappa[:, None]
    nu = prior.nu + nk
    scale = (prior.scale + spread
             + (prior.kappa * nk / kappa)[:, None] * (zbar - prior.mean) ** 2)
    alpha = prior.alpha + nk
    return GmmPosterior(prior, mean, kappa, nu, scale, alpha)


def _log_rho(Z: np.ndarray, post: GmmPosterior) -> np.ndarray:
    """Expected log joint of each point with each component, N x K"""
    log_weight = digamma(post.alpha) - digamma(post.alpha.sum())
    expected_log_precision = digamma(post.nu / 2.0)[:, None] - np.log(post.scale / 2.0)
    expected_precision = post.nu[:, None] / post.scale
    sq = (Z[:, None, :] - post.mean[None, :, :]) ** 2
    per_dim = (expected_log_precision[None] - LOG_2PI
               - expected_precision[None] * sq - (1.0 / post.kappa)[None, :, None])
    return log_weight[None, :] + 0.5 * per_dim.sum(axis=2)


def _normal_gamma_log_norm(kappa, shape, rate):
    """log of Gamma(a) b^-a (2 pi / kappa)^(1/2) without the 2 pi term"""
    return gammaln(shape) - shape * np.log(rate) - 0.5 * np.log(kappa)


def _dirichlet_log_norm(alpha: np.ndarray) -> float:
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum())


def evidence_lower_bound(Z: np.ndarray, resp: np.ndarray, post: GmmPosterior) -> float:
    """Bound at (q(c) = resp, q(params) = conjugate update from resp)"""
    prior = post.prior
    n, d = Z.shape
    entropy = -float(xlogy(resp, resp).sum())

    weights_term = _dirichlet_log_norm(prior.alpha) - _dirichlet_log_norm(post.alpha)
    posterior_norm = _normal_gamma_log_norm(
        post.kappa[:, None], (post.nu / 2.0)[:, None], post.scale / 2.0).sum()
    prior_norm = _normal_gamma_log_norm(prior.kappa, prior.nu / 2.0, prior.scale / 2.0).sum()
    gaussian_term = float(posterior_norm - post.num_components * prior_norm) - 0.5 * n * d * LOG_2PI
    return entropy + weights_term + gaussian_term


def collapsed_log_joint(Z, labels, prior: GmmPrior) -> float:
    """log p(Z, c) with weights and component parameters integrated out"""
    Z = np.asarray(Z, dtype=np.float64)
    resp = np.eye(prior.num_components)[np.asarray(labels)]
    post = _m_step(Z, resp, prior)
    return evidence_lower_bound(Z, resp, post)


def fit_vi(Z, K: int, prior: Optional[GmmPrior] = None, max_iters: int = 500, tol: float = 1e-6,
           init_seed: int = 0, init_resp: Optional[np.ndarray] = None) -> VIResult:
    """Coordinate ascent until the relative bound change drops below tol"""
    Z = np.asarray(Z, dtype=np.float64)
    if tol <= 0:
        raise ConfigError("tol must be > 0")
    if Z.ndim != 2:
        raise ShapeError(f"Embeddings must be N x d, got shape {Z.shape}")
    n = Z.shape[0]
    if n <= K:
        raise DataError(f"fit_vi needs N > K, got N={n}, K={K}")
    prior = prior if prior is not None else default_prior(Z, K)
    if prior.num_components != K or prior.dim != Z.shape[1]:
        raise ShapeError("Prior does not match K or the embedding dimension")

    if init_resp is None:
        labels = kmeans_fit(Z, K, max_iters=100, restarts=1, seed=init_seed).labels
        resp = np.eye(K)[labels]
    else:
        resp = np.asarray(init_resp, dtype=np.float64)

    post = _m_step(Z, resp, prior)
    trace = [evidence_lower_bound(Z, resp, post)]
    converged = False
    iteration = 0

    for iteration in range(1, max_iters + 1):
        resp = softmax(_log_rho(Z, post), axis=1)
        post = _m_step(Z, resp, prior)
        elbo = evidence_lower_bound(Z, resp, post)

        if not np.isfinite(elbo):
            raise NumericalError(f"Non-finite ELBO at iteration {iteration}")
        previous = trace[-1]
        if elbo < previous - ELBO_SLACK * abs(previous):
            raise NumericalError(
                f"ELBO decreased at iteration {iteration}: {previous!r} -> {elbo!r}"
            )
        trace.append(elbo)
        if abs(elbo - previous) < tol * abs(previous):
            converged = True
            break

    mass = post.alpha.sum() - prior.alpha.sum()
    if abs(mass - n) > 1e-6:
        raise NumericalError(f"Responsibility mass {mass} does not match N={n}")

    nk = post.alpha - prior.alpha
    degenerate = np.flatnonzero(nk < DEGENERATE_MASS).tolist()
    if degenerate:
        logger.warning("degenerate_components", components=degenerate)

    post.elbo_trace = trace
    post.iterations = iteration
    post.converged = converged
    post.degenerate = degenerate
    logger.info("vi_fitted", K=K, N=n, iterations=iteration, converged=converged, elbo=trace[-1])
    return VIResult(post, resp)


def predictive_log_probs_batch(Z, post: GmmPosterior, predictive: str = "student_t") -> np.ndarray:
    """Normalized log p(c = k | z) for each row of Z, N x K"""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != post.dim:
        raise ShapeError(f"Embedding dimension {Z.shape[1]} does not match posterior dimension {post.dim}")

    if predictive == "student_t":
        log_weight = np.log(post.alpha / post.alpha.sum())
        scale2 = post.scale * (post.kappa + 1.0)[:, None] / (post.kappa * post.nu)[:, None]
        density = stats.t.logpdf(Z[:, None, :], df=post.nu[None, :, None],
                                 loc=post.mean[None], scale=np.sqrt(scale2)[None])
    elif predictive == "plugin":
        log_weight = digamma(post.alpha) - digamma(post.alpha.sum())
        variance = post.scale / post.nu[:, None]
        density = stats.norm.logpdf(Z[:, None, :], loc=post.mean[None], scale=np.sqrt(variance)[None])
    else:
        raise ConfigError(f"Unknown predictive '{predictive}'; valid: {', '.join(PREDICTIVES)}")

    return log_softmax(log_weight[None, :] + density.sum(axis=2), axis=1)


def posterior_predictive_logprobs(z, post: GmmPosterior, predictive: str = "student_t") -> np.ndarray:
    return predictive_log_probs_batch(np.asarray(z, dtype=np.float64)[None, :], post, predictive)[0]


def classify(z, post: GmmPosterior, predictive: str = "student_t") -> Assignment:
    """Most probable component; ties go to the lowest index"""
    log_probs = posterior_predictive_logprobs(z, post, predictive)
    return Assignment(int(np.argmax(log_probs)), log_probs)


def classify_batch(Z, post: GmmPosterior, predictive: str = "student_t") -> Tuple[np.ndarray, np.ndarray]:
    log_probs = predictive_log_probs_batch(Z, post, predictive)
    return np.argmax(log_probs, axis=1), log_probs


def partition(windows: Sequence, embeddings, post: Optional[GmmPosterior] = None,
              labels: Optional[np.ndarray] = None, num_components: Optional[int] = None,
              predictive: str = "student_t") -> PartitionResult:
    """Split windows into K disjoint sets by hard assignment"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(windows) != embeddings.shape[0]:
        raise ShapeError(f"{len(windows)} windows but {embeddings.shape[0]} embeddings")

    if labels is None:
        if post is None:
            raise ConfigError("partition needs a posterior or precomputed labels")
        labels, _ = classify_batch(embeddings, post, predictive)
        num_components = post.num_components
    labels = np.asarray(labels, dtype=np.int64)
    num_components = num_components or int(labels.max()) + 1

    subsets: List[list] = [[] for _ in range(num_components)]
    for window, label in zip(windows, labels):
        subsets[label].append(window)

    empty = [k for k, subset in enumerate(subsets) if not subset]
    if empty:
        logger.warning("empty_partition", components=empty, advice="reduce K")
    return PartitionResult(subsets, labels, empty)


def _squared_distances(Z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((Z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_plus_plus(Z: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers, _ = kmeans_plusplus(Z, K, random_state=int(rng.integers(2**31 - 1)))
    return np.array(centers, dtype=np.float64)


def _lloyd(Z: np.ndarray, centroids: np.ndarray, max_iters: int) -> KMeansResult:
    K = centroids.shape[0]
    labels = None
    trace: List[float] = []
    for _ in range(max_iters):
        distances = _squared_distances(Z, centroids)
        new_labels = np.argmin(distances, axis=1)
        trace.append(float(distances[np.arange(Z.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels

        point_cost = distances[np.arange(Z.shape[0]), labels]
        for k in range(K):
            members = labels == k
            if members.any():
                centroids[k] = Z[members].mean(axis=0)
            else:
                farthest = int(np.argmax(point_cost))
                centroids[k] = Z[farthest]
                point_cost[farthest] = 0.0
                logger.debug("kmeans_reseed", cluster=k, point=farthest)

    distances = _squared_distances(Z, centroids)
    labels = np.argmin(distances, axis=1)
    inertia = float(distances[np.arange(Z.shape[0]), labels].sum())
    return KMeansResult(centroids, labels, inertia, trace)


def kmeans_fit(Z, K: int, max_iters: int = 300, restarts: int = 10, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best restart by within-cluster sum of squares"""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] < K:
        raise DataError(f"kmeans_fit needs N >= K, got N={Z.shape[0]}, K={K}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        result = _lloyd(Z, _kmeans_plus_plus(Z, K, rng), max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def nearest_centroid(Z, centroids) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return np.argmin(_squared_distances(Z, np.asarray(centroids)), axis=1)


def classification_entropy(probs) -> float:
    """Shannon entropy in bits; 0 log 0 = 0"""
    probs = np.asarray(probs, dtype=np.float64)
    return float(entr(probs).sum() / math.log(2.0))


def save_posterior(post: GmmPosterior, directory) -> Path:
    directory = Path(directory)
    hashes = save_tensors(directory, {
        "prior_mean": post.prior.mean,
        "prior_scale": post.prior.scale,
        "prior_alpha": post.prior.alpha,
        "mean": post.mean,
        "kappa": post.kappa,
        "nu": post.nu,
        "scale": post.scale,
        "alpha": post.alpha,
        "elbo_trace": np.asarray(post.elbo_trace, dtype=np.float64),
    })
    write_json(directory / "manifest.json", {
        "K": post.num_components,
        "d": post.dim,
        "prior": {"kappa": post.prior.kappa, "nu": post.prior.nu},
        "iterations": post.iterations,
        "converged": post.converged,
        "degenerate": post.degenerate,
        "tensors": hashes,
    })
    return directory


def load_posterior(directory) -> GmmPosterior:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    t = load_tensors(directory, ["prior_mean", "prior_scale", "prior_alpha", "mean", "kappa",
                                 "nu", "scale", "alpha", "elbo_trace"])
    K, d = int(manifest["K"]), int(manifest["d"])
    prior = GmmPrior(t["prior_mean"].reshape(d), float(manifest["prior"]["kappa"]),
                     float(manifest["prior"]["nu"]), t["prior_scale"].reshape(d),
                     t["prior_alpha"].reshape(K))
    return GmmPosterior(
        prior,
        t["mean"].reshape(K, d),
        t["kappa"].reshape(K),
        t["nu"].reshape(K),
        t["scale"].reshape(K, d),
        t["alpha"].reshape(K),
        elbo_trace=t["elbo_trace"].reshape(-1).tolist(),
        iterations=int(manifest.get("iterations", 0)),
        converged=bool(manifest.get("converged", False)),
        degenerate=list(manifest.get("degenerate", [])),
    )


__all__ = [
    "PREDICTIVES",
    "GmmPrior",
    "GmmPosterior",
    "VIResult",
    "Assignment",
    "PartitionResult",
    "KMeansResult",
    "default_prior",
    "evidence_lower_bound",
    "collapsed_log_joint",
    "fit_vi",
    "predictive_log_probs_batch",
    "posterior_predictive_logprobs",
    "classify",
    "classify_batch",
    "partition",
    "kmeans_fit",
    "nearest_centroid",
    "classification_entropy",
    "save_posterior",
    "load_posterior",
]
