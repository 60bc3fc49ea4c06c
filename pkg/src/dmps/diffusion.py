"""Graph diffusion tools: Dirichlet energy, explicit Euler diffusion steps and
over-smoothing diagnostics.

The explicit update for a row-stochastic ``W`` is

    X' = (1 - s) X + s W X,      s = dt * C in (0, 1]

which is gradient descent on the weighted Dirichlet energy and reduces to a
plain message-passing step at ``s = 1``. Everything here is plain numpy and
side-effect free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .latent_graph import ConfigError

__all__ = [
    "WeightedGraph",
    "DiffusionTrace",
    "dirichlet_energy",
    "diffusion_step",
    "simulate_to_steady_state",
    "oscillation_index",
    "symmetrize_for_energy_test",
    "is_row_stochastic",
]


@dataclass
class WeightedGraph:
    """Undirected weighted graph; each unordered edge ``{i, j}`` has weight ``w[i, j] == w[j, i]``."""

    w: np.ndarray
    C: float = 1.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise ValueError(f"weights must be square, got {self.w.shape}")
        if not np.allclose(self.w, self.w.T, rtol=0, atol=1e-12):
            raise ValueError("edge weights must be symmetric")
        if (self.w < 0).any():
            raise ValueError("edge weights must be nonnegative")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")

    @property
    def n(self) -> int:
        return self.w.shape[0]


@dataclass
class DiffusionTrace:
    states: list[np.ndarray] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    oscillations: list[float] = field(default_factory=list)
    step_size: float = 1.0
    converged: bool = False

    @property
    def steps(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "energy", "oscillation"])
            for t, (e, o) in enumerate(zip(self.energies, self.oscillations)):
                writer.writerow([t, repr(float(e)), repr(float(o))])


def is_row_stochastic(w: np.ndarray, atol: float = 1e-9) -> bool:
    w = np.asarray(w)
    return bool((w >= 0).all() and np.allclose(w.sum(axis=1), 1.0, rtol=0, atol=atol))


def dirichlet_energy(x: np.ndarray, graph: WeightedGraph) -> float:
    """``C/2 * sum_{i<j} w_ij |x_i - x_j|^2``, every unordered pair counted once."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != graph.n:
        raise ValueError(f"X has {x.shape[0]} rows, graph has {graph.n} nodes")
    iu, ju = np.triu_indices(graph.n, k=1)
    sq = ((x[iu] - x[ju]) ** 2).sum(axis=1)
    return float(0.5 * graph.C * (graph.w[iu, ju] * sq).sum())


def diffusion_step(x: np.ndarray, w: np.ndarray, s: float) -> np.ndarray:
    """One explicit Euler step ``(1 - s) X + s W X`` with ``s`` in (0, 1]."""
    if not 0.0 < s <= 1.0:
        raise ConfigError(f"step size s = dt*C must lie in (0, 1], got {s}")
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"W is {w.shape} but X has {x.shape[0]} rows")
    return (1.0 - s) * x + s * (w @ x)


def oscillation_index(x: np.ndarray) -> float:
    """Largest per-coordinate spread (max minus min over rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("oscillation index of an empty set")
    return float((x.max(axis=0) - x.min(axis=0)).max())


def symmetrize_for_energy_test(w: np.ndarray) -> WeightedGraph:
    """``(W + W^T) / 2`` with the diagonal removed, ``C = 1``."""
    w = np.asarray(w, dtype=np.float64)
    sym = 0.5 * (w + w.T)
    np.fill_diagonal(sym, 0.0)
    return WeightedGraph(sym, 1.0)


def _max_row_distance(x: np.ndarray) -> float:
    if x.shape[0] < 2:
        return 0.0
    return float(pdist(x).max())


def simulate_to_steady_state(
    x0: np.ndarray,
    w: np.ndarray,
    s: float = 1.0,
    tol: float = 1e-8,
    max_steps: int = 10_000,
) -> DiffusionTrace:
    """Iterate :func:`diffusion_step` until all rows lie within ``tol`` of each other.

    Hitting ``max_steps`` is not an error; the trace comes back with
    ``converged = False``. Energies use :func:`symmetrize_for_energy_test`.
    """
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    w = np.asarray(w, dtype=np.float64)
    graph = symmetrize_for_energy_test(w)
    trace = DiffusionTrace(step_size=s)

    def record(state):
        trace.states.append(state)
        trace.energies.append(dirichlet_energy(state, graph))
        trace.oscillations.append(oscillation_index(state))

    record(x)
    for _ in range(max_steps):
        if _max_row_distance(x) < tol:
            trace.converged = True
            break
        x = diffusion_step(x, w, s)
        record(x)
    else:
        trace.converged = _max_row_distance(x) < tol
    return trace
