"""Synthetic set-learning tasks and their losses.

gaussian
    Each set is one draw from a 5-dimensional Gaussian, read as a set of
    five scalars. Label 0: N(0, I). Label 1: N(0, Sigma) where Sigma is the
    identity except for correlation ``rho`` between coordinates 2 and 4
    (1-based).

counting
    Each set holds 6 to 10 noisy 2-D copies of ``c`` well-separated cluster
    centers; the label is ``c``. Every chosen cluster appears at least once.

Random streams come from ``SeedSequence(seed, spawn_key=key)``, so a batch
depends only on ``(seed, stream, index)`` and not on what was drawn before.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from . import autodiff as ad
from .autodiff import Tensor
from .latent_graph import ConfigError, SetLayout

__all__ = [
    "GaussianTaskSpec",
    "CountingTaskSpec",
    "stream_rng",
    "build_covariance",
    "sample_gaussian_set",
    "gaussian_batch",
    "sample_counting_set",
    "counting_batch",
    "counting_label_marginal",
    "poisson_nll",
    "poisson_nll_from_log_rate",
    "poisson_mode",
    "binary_ce",
    "binary_ce_with_logits",
    "gaussian_bayes_accuracy",
    "dump_sets",
    "load_sets",
]

TRAIN_STREAM = 0
EVAL_STREAM = 1
TEST_STREAM = 2


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


@dataclass
class GaussianTaskSpec:
    rho: float = 0.95
    dim: int = 5
    pair: tuple[int, int] = (2, 4)
    batch_size: int = 128

    def __post_init__(self):
        self.pair = tuple(int(i) for i in self.pair)
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        i, j = self.pair
        if not (1 <= i <= self.dim and 1 <= j <= self.dim and i != j):
            raise ConfigError(f"pair {self.pair} is not two distinct 1-based indices")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("gaussian batches are balanced; batch_size must be even")


@dataclass
class CountingTaskSpec:
    n_min: int = 6
    n_max: int = 10
    max_clusters: int = 10
    dim: int = 2
    noise: float = 0.1
    center_range: tuple[float, float] = (-1.0, 1.0)
    min_separation: float = 0.5
    batch_size: int = 32

    def __post_init__(self):
        self.center_range = tuple(float(v) for v in self.center_range)
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.max_clusters < 1:
            raise ConfigError("max_clusters must be at least 1")
        if self.noise < 0 or self.min_separation < 0:
            raise ConfigError("noise and min_separation must be nonnegative")


def build_covariance(rho: float, dim: int = 5, pair: tuple[int, int] = (2, 4)) -> np.ndarray:
    """Identity with ``rho`` at the (1-based) symmetric position ``pair``."""
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"rho must lie in [0, 1), got {rho}")
    sigma = np.eye(dim)
    i, j = pair[0] - 1, pair[1] - 1
    sigma[i, j] = sigma[j, i] = rho
    return sigma


def _cholesky(sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ConfigError("covariance is not positive definite") from None


def sample_gaussian_set(sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw ``L z`` returned as a ``(p, 1)`` set of scalars."""
    chol = _cholesky(np.asarray(sigma, dtype=np.float64))
    z = rng.standard_normal(chol.shape[0])
    return (chol @ z)[:, None]


def gaussian_batch(
    spec: GaussianTaskSpec, rng: np.random.Generator, size: int | None = None
) -> tuple[np.ndarray, SetLayout, np.ndarray]:
    """Balanced batch: first half from N(0, I) (label 0), second half from N(0, Sigma).

    Returns stacked elements ``(size * p, 1)``, their layout and labels ``(size, 1)``.
    """
    size = spec.batch_size if size is None else size
    if size % 2:
        raise ConfigError("gaussian batches are balanced; size must be even")
    half = size // 2
    chol = _cholesky(build_covariance(spec.rho, spec.dim, spec.pair))
    z = rng.standard_normal((size, spec.dim))
    z[half:] = z[half:] @ chol.T
    labels = np.r_[np.zeros(half), np.ones(half)][:, None]
    layout = SetLayout(np.arange(size + 1) * spec.dim)
    return z.reshape(-1, 1), layout, labels


def _centers(spec: CountingTaskSpec, c: int, rng: np.random.Generator) -> np.ndarray:
    """Sequential rejection sampling of ``c`` centers at least ``min_separation`` apart."""
    lo, hi = spec.center_range
    sep2 = spec.min_separation**2
    for _ in range(100):
        pts = np.empty((c, spec.dim))
        count = 0
        for cand in rng.uniform(lo, hi, size=(64 * c, spec.dim)):
            if count and (((pts[:count] - cand) ** 2).sum(axis=1) < sep2).any():
                continue
            pts[count] = cand
            count += 1
            if count == c:
                return pts
    raise ConfigError(f"cannot place {c} centers {spec.min_separation} apart")


def sample_counting_set(
    spec: CountingTaskSpec,
    rng: np.random.Generator,
    n: int | None = None,
    c: int | None = None,
    return_assignment: bool = False,
):
    """Draw ``n``, then ``c <= min(n, max_clusters)``, then the elements.

    ``n`` and ``c`` can be pinned for testing. With ``return_assignment``
    the cluster index of every element comes back as a third value.
    """
    if n is None:
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
    if c is None:
        c = int(rng.integers(1, min(n, spec.max_clusters) + 1))
    if not 1 <= c <= n:
        raise ConfigError(f"need 1 <= c <= n, got c={c}, n={n}")
    centers = _centers(spec, c, rng)
    counts = 1 + rng.multinomial(n - c, np.full(c, 1.0 / c))
    assign = rng.permutation(np.repeat(np.arange(c), counts))
    elements = centers[assign] + spec.noise * rng.standard_normal((n, spec.dim))
    if return_assignment:
        return elements, c, assign
    return elements, c


def counting_batch(
    spec: CountingTaskSpec, rng: np.random.Generator, size: int | None = None
) -> tuple[np.ndarray, SetLayout, np.ndarray]:
    size = spec.batch_size if size is None else size
    sets, labels = [], []
    for _ in range(size):
        x, c = sample_counting_set(spec, rng)
        sets.append(x)
        labels.append(c)
    layout = SetLayout.from_sizes([len(s) for s in sets])
    return np.vstack(sets), layout, np.array(labels, dtype=np.float64)[:, None]


def counting_label_marginal(spec: CountingTaskSpec) -> np.ndarray:
    """Exact ``P(c)`` for ``c = 1 .. n_max`` under the two-stage uniform draw."""
    probs = np.zeros(spec.n_max)
    n_choices = spec.n_max - spec.n_min + 1
    for n in range(spec.n_min, spec.n_max + 1):
        top = min(n, spec.max_clusters)
        probs[:top] += 1.0 / n_choices / top
    return probs


def poisson_nll(lam, x):
    """``-log p(x | lam) = lam - x log(lam) + log(x!)``."""
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise ValueError("Poisson counts must be nonnegative")
    lam = np.asarray(lam, dtype=np.float64)
    out = lam - x * np.log(lam) + gammaln(x + 1.0)
    return float(out) if out.ndim == 0 else out


def poisson_nll_from_log_rate(log_rate: Tensor, counts: np.ndarray) -> Tensor:
    """Mean Poisson NLL with ``lam = exp(log_rate)``, differentiable in ``log_rate``."""
    counts = np.asarray(counts, dtype=np.float64).reshape(log_rate.shape)
    if (counts < 0).any():
        raise ValueError("Poisson counts must be nonnegative")
    per_set = ad.exp(log_rate) - log_rate * counts + gammaln(counts + 1.0)
    return per_set.mean()


def poisson_mode(lam) -> np.ndarray:
    """Predicted count: ``lam`` rounded to the nearest integer."""
    return np.rint(np.asarray(lam, dtype=np.float64))


def binary_ce(p, y):
    """``-[y log p + (1 - y) log(1 - p)]``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def binary_ce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)``; stable for large logits."""
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return (ad.softplus(logits) - logits * labels).mean()


def gaussian_bayes_accuracy(
    rho: float,
    n_samples: int = 20_000,
    rng: np.random.Generator | int = 0,
    dim: int = 5,
) -> float:
    """Monte-Carlo accuracy of the best *permutation-invariant* classifier.

    An order-blind classifier sees the Sigma class as a uniform mixture over
    which pair of coordinates is correlated; thresholding that mixture's
    likelihood ratio against N(0, I) at zero is Bayes-optimal for balanced
    classes.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if rho == 0.0:
        return 0.5
    pairs = list(itertools.combinations(range(dim), 2))
    det_term = -0.5 * math.log(1.0 - rho * rho)
    coef = 1.0 / (1.0 - rho * rho)

    def llr(x):
        # N(0, Sigma_ij) vs N(0, I): only the (i, j) 2x2 block differs
        terms = []
        for i, j in pairs:
            a, b = x[:, i], x[:, j]
            quad = coef * (a * a - 2 * rho * a * b + b * b) - (a * a + b * b)
            terms.append(det_term - 0.5 * quad)
        return logsumexp(np.stack(terms), axis=0) - math.log(len(pairs))

    chol = _cholesky(build_covariance(rho, dim))
    x0 = rng.standard_normal((n_samples, dim))
    x1 = rng.standard_normal((n_samples, dim)) @ chol.T
    return float(0.5 * ((llr(x0) < 0).mean() + (llr(x1) > 0).mean()))


def dump_sets(path, sets: Sequence[np.ndarray], labels: Iterable, task: str) -> None:
    """Write one JSON object per line: ``{"task", "label", "elements"}``."""
    with open(Path(path), "w") as fh:
        for x, y in zip(sets, labels):
            row = {"task": task, "label": float(y), "elements": np.asarray(x).tolist()}
            fh.write(json.dumps(row) + "\n")


def load_sets(path) -> tuple[list[np.ndarray], np.ndarray, list[str]]:
    sets, labels, tasks = [], [], []
    with open(Path(path)) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            x = np.asarray(row["elements"], dtype=np.float64)
            sets.append(x.reshape(-1, 1) if x.ndim == 1 else x)
            labels.append(row["label"])
            tasks.append(row["task"])
    return sets, np.asarray(labels, dtype=np.float64), tasks
