"""Latent graph estimation by deep kernel learning.

A shared two-layer MLP embeds every element, an RBF kernel with a learnable
bandwidth compares the embeddings pairwise, and a row softmax turns the
kernel matrix into the row-stochastic weight matrix ``W`` used for message
passing.

Batches of sets are handled as one stacked ``(N, p)`` matrix described by a
:class:`SetLayout`. ``K`` and ``W`` are then stored row-compressed with shape
``(N, m)``, ``m`` the largest set size: row ``i`` holds the weights from
element ``i`` to the members of its own set, in set order, padded with zeros.
Elements of different sets never exchange messages. For a single set the
compressed form is the ordinary dense ``n x n`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

__all__ = [
    "ConfigError",
    "EmptySetError",
    "KernelConfig",
    "LatentGraph",
    "SetLayout",
    "init_mlp",
    "apply_mlp",
    "init_kernel_params",
    "sigma_value",
    "embed_elements",
    "rbf_kernel_matrix",
    "normalize_to_stochastic",
    "threshold_sparsify",
    "build_latent_graph",
]

GRAPH_MODES = ("learned", "identity", "uniform")


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class EmptySetError(ValueError):
    """Raised for a set with no elements."""


@dataclass
class KernelConfig:
    """Deep-kernel layer: ``dims = (d_in, d_hidden, d_out)``, two activations,
    initial RBF bandwidth, optional sparsification threshold.

    ``graph`` replaces the learned ``W`` by the identity or by uniform weights
    (ablations); the kernel parameters are then unused.
    """

    dims: tuple[int, int, int] = (32, 64, 128)
    activations: tuple[str, str] = ("relu", "relu")
    sigma0: float = 1.0
    threshold: float = 0.0
    graph: str = "learned"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.activations = tuple(self.activations)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"kernel dims must be three positive ints, got {self.dims}")
        if len(self.activations) != 2:
            raise ConfigError("kernel needs exactly two activations")
        for a in self.activations:
            if a not in ad.ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        if not self.sigma0 > 0:
            raise ConfigError(f"sigma0 must be positive, got {self.sigma0}")
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in [0, 1), got {self.threshold}")
        if self.graph not in GRAPH_MODES:
            raise ConfigError(f"graph must be one of {GRAPH_MODES}, got {self.graph!r}")


class SetLayout:
    """Row layout of ``B`` stacked sets.

    ``idx[i, j]`` is the global row of the ``j``-th member of element ``i``'s
    set; ``valid`` marks real (unpadded) entries and ``self_col[i]`` is the
    column of element ``i`` itself.
    """

    def __init__(self, offsets):
        offsets = np.asarray(offsets, dtype=np.intp)
        sizes = np.diff(offsets)
        if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0:
            raise ValueError(f"bad offsets {offsets}")
        if (sizes <= 0).any():
            raise EmptySetError("sets must have at least one element")
        self.offsets = offsets
        self.sizes = sizes
        n = int(offsets[-1])
        width = int(sizes.max())
        seg = np.repeat(np.arange(len(sizes)), sizes)
        cols = np.arange(width)
        start = offsets[seg]
        self.valid = cols[None, :] < sizes[seg][:, None]
        self.idx = np.where(self.valid, start[:, None] + cols[None, :], np.arange(n)[:, None])
        self.self_col = np.arange(n) - start
        self.segment = seg

    @classmethod
    def single(cls, n: int) -> "SetLayout":
        return cls([0, n])

    @classmethod
    def from_sizes(cls, sizes) -> "SetLayout":
        return cls(np.concatenate([[0], np.cumsum(sizes)]))

    @property
    def n_sets(self) -> int:
        return len(self.sizes)

    @property
    def n_rows(self) -> int:
        return int(self.offsets[-1])

    @property
    def is_single(self) -> bool:
        return len(self.sizes) == 1

    @property
    def mask(self) -> np.ndarray | None:
        return None if self.valid.all() else self.valid


@dataclass
class LatentGraph:
    """Kernel matrix ``K`` and row-stochastic ``W`` in the layout's row-compressed form."""

    K: Tensor
    W: Tensor
    layout: SetLayout = None

    def __post_init__(self):
        if self.layout is None:
            self.layout = SetLayout.single(self.W.shape[0])

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def blocks(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Dense per-set ``(K, W)`` arrays."""
        out = []
        for lo, hi in zip(self.layout.offsets[:-1], self.layout.offsets[1:]):
            m = hi - lo
            out.append((self.K.data[lo:hi, :m].copy(), self.W.data[lo:hi, :m].copy()))
        return out


def init_mlp(params: ParamStore, prefix: str, dims, rng: np.random.Generator) -> None:
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        params.add(f"{prefix}.{i}.weight", ad.glorot_uniform(d_in, d_out, rng))
        params.add(f"{prefix}.{i}.bias", np.zeros((1, d_out)))


def apply_mlp(x, params: ParamStore, prefix: str, activations) -> Tensor:
    out = ad.as_tensor(x)
    for i, act in enumerate(activations):
        w = params[f"{prefix}.{i}.weight"]
        if out.shape[1] != w.shape[0]:
            raise ValueError(
                f"{prefix}.{i}: input has {out.shape[1]} features, layer expects {w.shape[0]}"
            )
        out = ad.elementwise(act, out @ w + params[f"{prefix}.{i}.bias"])
    return out


def init_kernel_params(
    params: ParamStore, config: KernelConfig, rng: np.random.Generator, prefix: str = "kernel"
) -> None:
    init_mlp(params, f"{prefix}.mlp", config.dims, rng)
    params.add(f"{prefix}.log_sigma", np.log(config.sigma0))


def sigma_value(params: ParamStore, prefix: str = "kernel") -> float:
    return float(np.exp(params[f"{prefix}.log_sigma"].item()))


def embed_elements(x, params: ParamStore, config: KernelConfig, prefix: str = "kernel") -> Tensor:
    """Shared MLP applied to every row of ``x``."""
    x = ad.as_tensor(x)
    if x.shape[1] != config.dims[0]:
        raise ValueError(f"elements have {x.shape[1]} features, kernel expects {config.dims[0]}")
    return apply_mlp(x, params, f"{prefix}.mlp", config.activations)


def rbf_kernel_matrix(phi, sigma, idx: np.ndarray | None = None) -> Tensor:
    """``K[i, j] = exp(-|phi_i - phi_j|^2 / (2 sigma^2))``.

    ``sigma`` is a positive float or a 1x1 tensor (differentiable). With a
    layout index ``idx`` the result is row-compressed,
    ``K[i, j] = k(phi_i, phi_{idx[i, j]})``.
    """
    d = ad.pairwise_sq_dists(phi) if idx is None else ad.gather_sq_dists(phi, idx)
    if isinstance(sigma, Tensor):
        scale = -0.5 / (sigma * sigma)
    else:
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        scale = -0.5 / float(sigma) ** 2
    return ad.exp(d * scale)


def normalize_to_stochastic(k, mask: np.ndarray | None = None) -> Tensor:
    return ad.softmax_rows(k, mask)


def threshold_sparsify(w, delta: float, layout: SetLayout | None = None) -> Tensor:
    """Zero entries below ``delta`` and renormalize rows.

    A row with every entry below ``delta`` keeps only its self-weight.
    """
    if not 0.0 <= delta < 1.0:
        raise ConfigError(f"threshold must lie in [0, 1), got {delta}")
    w = ad.as_tensor(w)
    if delta == 0.0:
        return w
    layout = layout or SetLayout.single(w.shape[0])
    keep = w.data >= delta
    empty = np.flatnonzero(~keep.any(axis=1))
    keep[empty, layout.self_col[empty]] = True
    masked = w * keep.astype(np.float64)
    return masked / masked.sum(axis=1)


def build_latent_graph(
    features,
    params: ParamStore,
    config: KernelConfig,
    layout: SetLayout | None = None,
    prefix: str = "kernel",
) -> LatentGraph:
    """Kernel matrix and row-stochastic ``W`` for one set or a stacked batch."""
    features = ad.as_tensor(features)
    n = features.shape[0]
    layout = layout or SetLayout.single(n)
    if layout.n_rows != n:
        raise ValueError(f"layout covers {layout.n_rows} rows, features have {n}")
    mask = layout.mask
    valid = layout.valid.astype(np.float64)
    if config.graph == "identity":
        eye = np.zeros_like(valid)
        eye[np.arange(n), layout.self_col] = 1.0
        return LatentGraph(Tensor(eye), Tensor(eye), layout)
    if config.graph == "uniform":
        ones = Tensor(valid)
        return LatentGraph(ones, normalize_to_stochastic(ones, mask), layout)
    phi = embed_elements(features, params, config, prefix)
    sigma = ad.exp(params[f"{prefix}.log_sigma"])
    k = rbf_kernel_matrix(phi, sigma, layout.idx)
    if mask is not None:
        k = k * valid
    w = normalize_to_stochastic(k, mask)
    if config.threshold > 0:
        w = threshold_sparsify(w, config.threshold, layout)
    return LatentGraph(k, w, layout)
