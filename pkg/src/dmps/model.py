"""Message-passing blocks, set pooling and the full forward pass.

The model is

    encoder (per-element MLP)
    -> latent graph W, estimated once from the encoded elements
    -> k blocks, all sharing that W
    -> permutation-invariant pooling
    -> head MLP

Three block kinds share one config surface:

* ``mp``:       X <- tau((W X) H + b)
* ``denoise``:  X <- tau(((1 - gamma) X + gamma W X) H + b)
* ``residual``: X <- X + tau((W X) H + b)

The forward pass returns the head's pre-transform output (logit or log-rate);
:meth:`DMPSModel.predict` applies the output transform.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .latent_graph import (
    ConfigError,
    EmptySetError,
    KernelConfig,
    LatentGraph,
    SetLayout,
    apply_mlp,
    build_latent_graph,
    init_kernel_params,
    init_mlp,
)

__all__ = [
    "EmptySetError",
    "EncoderConfig",
    "BlockConfig",
    "HeadConfig",
    "ModelConfig",
    "gamma_value",
    "message_passing_step",
    "set_denoising_block",
    "set_residual_block",
    "vanilla_block",
    "pool_set",
    "init_params",
    "DMPSModel",
    "dmps_forward",
    "stack_sets",
]

BLOCK_KINDS = ("mp", "denoise", "residual")
POOLING_MODES = ("sum", "mean", "max")
OUTPUT_TRANSFORMS = ("sigmoid", "exp", "identity")


@dataclass
class EncoderConfig:
    dims: list[int] = field(default_factory=lambda: [1, 32])
    activations: list[str] = field(default_factory=lambda: ["relu"])

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        self.activations = list(self.activations)
        if len(self.activations) != len(self.dims) - 1:
            raise ConfigError("encoder needs one activation per layer")


@dataclass
class BlockConfig:
    """``gamma`` is a fixed value in (0, 1) or the string ``"learnable"``.

    ``dims`` optionally sets each block's output width; by default every
    block keeps the encoder width. Residual blocks must keep their width.
    """

    kind: str = "mp"
    count: int = 3
    activation: str = "relu"
    gamma: float | str = 0.5
    gamma_init: float = 0.5
    per_block_gamma: bool = False
    dims: list[int] | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"block kind must be one of {BLOCK_KINDS}, got {self.kind!r}")
        if int(self.count) < 1:
            raise ConfigError(f"need at least one block, got {self.count}")
        self.count = int(self.count)
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.gamma != "learnable":
            try:
                self.gamma = float(self.gamma)
            except (TypeError, ValueError):
                raise ConfigError(f"gamma must be a number or 'learnable', got {self.gamma!r}")
            if not 0.0 < self.gamma < 1.0:
                raise ConfigError(f"fixed gamma must lie strictly inside (0, 1), got {self.gamma}")
        if not 0.0 < self.gamma_init < 1.0:
            raise ConfigError(f"gamma_init must lie strictly inside (0, 1), got {self.gamma_init}")
        if self.dims is not None:
            self.dims = [int(d) for d in self.dims]
            if len(self.dims) != self.count:
                raise ConfigError("block dims must list one width per block")

    @property
    def learnable_gamma(self) -> bool:
        return self.gamma == "learnable"


@dataclass
class HeadConfig:
    """Head MLP. ``activations`` covers the hidden layers only; the last layer
    is linear and followed by ``output``."""

    dims: list[int] = field(default_factory=lambda: [32, 1])
    activations: list[str] = field(default_factory=list)
    output: str = "sigmoid"

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        self.activations = list(self.activations)
        if len(self.dims) < 2:
            raise ConfigError("head needs at least one layer")
        if len(self.activations) != len(self.dims) - 2:
            raise ConfigError("head needs one activation per hidden layer")
        if self.output not in OUTPUT_TRANSFORMS:
            raise ConfigError(f"head output must be one of {OUTPUT_TRANSFORMS}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    blocks: BlockConfig = field(default_factory=BlockConfig)
    pooling: str = "max"
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        if isinstance(self.blocks, dict):
            self.blocks = BlockConfig(**self.blocks)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        width = self.encoder.dims[-1]
        if self.kernel.graph == "learned" and self.kernel.dims[0] != width:
            raise ConfigError(
                f"kernel input dim {self.kernel.dims[0]} != encoder output dim {width}"
            )
        for t, d_out in enumerate(self.block_widths()):
            if self.blocks.kind == "residual" and d_out != width:
                raise ConfigError(
                    f"residual block {t} maps {width} -> {d_out}; residual blocks must be square"
                )
            width = d_out
        if self.head.dims[0] != width:
            raise ConfigError(f"head input dim {self.head.dims[0]} != block output dim {width}")

    @property
    def input_dim(self) -> int:
        return self.encoder.dims[0]

    @property
    def output_dim(self) -> int:
        return self.head.dims[-1]

    def block_widths(self) -> list[int]:
        if self.blocks.dims is not None:
            return list(self.blocks.dims)
        return [self.encoder.dims[-1]] * self.blocks.count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"]["dims"] = list(d["kernel"]["dims"])
        d["kernel"]["activations"] = list(d["kernel"]["activations"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def gamma_value(g) -> float:
    """Diffusion coefficient from its unconstrained logit."""
    g = float(g.item() if isinstance(g, Tensor) else g)
    if g >= 0:
        return 1.0 / (1.0 + np.exp(-g))
    e = np.exp(g)
    return e / (1.0 + e)


def message_passing_step(w, x, layout: SetLayout | None = None) -> Tensor:
    """Replace each element by the ``W``-weighted average of its set.

    ``w`` is a dense ``(n, n)`` matrix, or row-compressed when a multi-set
    ``layout`` is given.
    """
    w, x = ad.as_tensor(w), ad.as_tensor(x)
    if layout is None or layout.is_single:
        if w.shape != (x.shape[0], x.shape[0]):
            raise ValueError(f"W is {w.shape} but the set has {x.shape[0]} elements")
        return w @ x
    if layout.n_rows != x.shape[0]:
        raise ValueError(f"layout covers {layout.n_rows} rows, X has {x.shape[0]}")
    return ad.gather_matmul(w, x, layout.idx)


def _linear(x: Tensor, weight, bias) -> Tensor:
    out = x @ ad.as_tensor(weight)
    return out if bias is None else out + bias


def vanilla_block(w, x, weight, bias=None, activation: str = "relu", layout=None) -> Tensor:
    return ad.elementwise(activation, _linear(message_passing_step(w, x, layout), weight, bias))


def set_denoising_block(
    w, x, gamma, weight, bias=None, activation: str = "relu", layout=None
) -> Tensor:
    """Convex combination of ``X`` and ``W X``, then linear layer and ``tau``.

    ``gamma`` may be a float or a 1x1 tensor.
    """
    x = ad.as_tensor(x)
    mixed = x * (1.0 - gamma) + message_passing_step(w, x, layout) * gamma
    return ad.elementwise(activation, _linear(mixed, weight, bias))


def set_residual_block(w, x, weight, bias=None, activation: str = "relu", layout=None) -> Tensor:
    x = ad.as_tensor(x)
    weight = ad.as_tensor(weight)
    if weight.shape[0] != weight.shape[1]:
        raise ConfigError(f"residual block needs a square weight, got {weight.shape}")
    update = _linear(message_passing_step(w, x, layout), weight, bias)
    return x + ad.elementwise(activation, update)


def pool_set(x, mode: str = "sum", layout: SetLayout | None = None) -> Tensor:
    """Column-wise sum, mean or max over each set's rows; one output row per set."""
    x = ad.as_tensor(x)
    n = x.shape[0]
    if n == 0:
        raise EmptySetError("cannot pool an empty set")
    layout = layout or SetLayout.single(n)
    if layout.n_rows != n:
        raise ValueError(f"layout covers {layout.n_rows} rows, tensor has {n}")
    if mode == "max":
        return ad.segment_max(x, layout.offsets)
    if mode not in ("sum", "mean"):
        raise ConfigError(f"unknown pooling mode {mode!r}")
    if layout.is_single:
        return x.sum(axis=0) if mode == "sum" else x.mean(axis=0)
    indicator = (layout.segment[None, :] == np.arange(layout.n_sets)[:, None]).astype(np.float64)
    if mode == "mean":
        indicator /= layout.sizes[:, None]
    return Tensor(indicator) @ x


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> ParamStore:
    """Glorot-uniform weights, zero biases, ``log sigma0`` bandwidth and
    ``logit(gamma_init)`` for a learnable diffusion coefficient."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = ParamStore()
    init_mlp(params, "encoder", config.encoder.dims, rng)
    if config.kernel.graph == "learned":
        init_kernel_params(params, config.kernel, rng)
    width = config.encoder.dims[-1]
    for t, d_out in enumerate(config.block_widths()):
        params.add(f"blocks.{t}.weight", ad.glorot_uniform(width, d_out, rng))
        params.add(f"blocks.{t}.bias", np.zeros((1, d_out)))
        width = d_out
    b = config.blocks
    if b.kind == "denoise" and b.learnable_gamma:
        logit = np.log(b.gamma_init / (1.0 - b.gamma_init))
        if b.per_block_gamma:
            for t in range(b.count):
                params.add(f"blocks.{t}.gamma_logit", logit)
        else:
            params.add("gamma_logit", logit)
    init_mlp(params, "head", config.head.dims, rng)
    return params


def stack_sets(sets: Sequence[np.ndarray]) -> tuple[np.ndarray, SetLayout]:
    """Stack variable-size ``(n_i, p)`` sets into one matrix and its layout."""
    if len(sets) == 0:
        raise EmptySetError("no sets given")
    arrays = [np.asarray(s, dtype=np.float64) for s in sets]
    arrays = [a.reshape(-1, 1) if a.ndim == 1 else a for a in arrays]
    sizes = [a.shape[0] for a in arrays]
    if min(sizes) == 0:
        raise EmptySetError("cannot evaluate an empty set")
    return np.vstack(arrays), SetLayout.from_sizes(sizes)


class DMPSModel:
    """A configured model bound to a parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def _gamma(self, t: int):
        b = self.config.blocks
        if not b.learnable_gamma:
            return b.gamma
        name = f"blocks.{t}.gamma_logit" if b.per_block_gamma else "gamma_logit"
        return ad.sigmoid(self.params[name])

    def gamma(self) -> float | None:
        """Current (first-block) diffusion coefficient, if the model has one."""
        if self.config.blocks.kind != "denoise":
            return None
        g = self._gamma(0)
        return float(g.item()) if isinstance(g, Tensor) else float(g)

    def encode(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[1] != self.config.input_dim:
            raise ValueError(
                f"elements have {x.shape[1]} features, model expects {self.config.input_dim}"
            )
        return apply_mlp(x, self.params, "encoder", self.config.encoder.activations)

    def latent_graph(self, x, layout: SetLayout | None = None) -> LatentGraph:
        return build_latent_graph(self.encode(x), self.params, self.config.kernel, layout)

    def forward(
        self,
        x,
        layout: SetLayout | None = None,
        graph: LatentGraph | None = None,
        return_graph: bool = False,
    ):
        """Head output before the output transform, one row per set.

        ``graph`` overrides the estimated latent graph.
        """
        cfg = self.config
        x = ad.as_tensor(x)
        if x.shape[0] == 0:
            raise EmptySetError("cannot evaluate an empty set")
        layout = layout or SetLayout.single(x.shape[0])
        h = self.encode(x)
        if graph is None:
            graph = build_latent_graph(h, self.params, cfg.kernel, layout)
        w = graph.W
        act = cfg.blocks.activation
        for t in range(cfg.blocks.count):
            weight = self.params[f"blocks.{t}.weight"]
            bias = self.params[f"blocks.{t}.bias"]
            if cfg.blocks.kind == "mp":
                h = vanilla_block(w, h, weight, bias, act, layout)
            elif cfg.blocks.kind == "denoise":
                h = set_denoising_block(w, h, self._gamma(t), weight, bias, act, layout)
            else:
                h = set_residual_block(w, h, weight, bias, act, layout)
        pooled = pool_set(h, cfg.pooling, layout)
        out = apply_mlp(pooled, self.params, "head", cfg.head.activations + ["identity"])
        return (out, graph) if return_graph else out

    __call__ = forward

    def transform(self, z: np.ndarray) -> np.ndarray:
        kind = self.config.head.output
        if kind == "sigmoid":
            return ad._sigmoid(z)
        if kind == "exp":
            return np.exp(z)
        return z

    def predict(self, sets: Sequence[np.ndarray]) -> np.ndarray:
        """Transformed outputs for a list of sets, shape ``(B, out_dim)``."""
        x, layout = stack_sets(sets)
        return self.transform(self.forward(x, layout).data)


def dmps_forward(x, config: ModelConfig, params: ParamStore) -> np.ndarray:
    """Transformed prediction for a single ``(n, p)`` set."""
    model = DMPSModel(config, params)
    return model.transform(model.forward(x).data)[0]
