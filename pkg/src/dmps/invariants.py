"""Runtime invariant suite.

Every property the library promises is registered here once, run with fixed
seeds and reported as JSON. A failing or crashing check is recorded and the
suite moves on. Library functions are looked up through their modules at call
time, so a patched implementation is what gets checked.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import diffusion as dl
from . import latent_graph as lg
from . import model as mdl
from . import optim
from . import tasks
from .autodiff import ParamStore, Tape, Tensor
from .gradcheck import check_gradients

__all__ = ["CheckResult", "InvariantReport", "run_invariant_suite", "registered_checks"]

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    module: str
    description: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class InvariantReport:
    checks: list[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_checks": len(self.checks),
            "n_failed": len(self.failures),
            "seconds": round(self.seconds, 3),
            "checks": [asdict(c) for c in self.checks],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


_REGISTRY: list[tuple[str, str, str, Callable[[], str]]] = []


def _check(module: str, name: str, description: str):
    """Register a check. The function returns a detail string or raises ``AssertionError``."""

    def wrap(fn):
        if any(r[1] == name for r in _REGISTRY):
            raise RuntimeError(f"duplicate invariant {name}")
        _REGISTRY.append((module, name, description, fn))
        return fn

    return wrap


def registered_checks() -> list[tuple[str, str, str]]:
    return [(m, n, d) for m, n, d, _ in _REGISTRY]


def _rng(tag: str) -> np.random.Generator:
    digest = hashlib.sha256(tag.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _small_model(kind="mp", pooling="sum", activation="tanh", seed=0, gamma=0.5):
    cfg = mdl.ModelConfig(
        encoder=mdl.EncoderConfig(dims=[3, 6], activations=["tanh"]),
        kernel=lg.KernelConfig(dims=(6, 5, 4), activations=("tanh", "tanh")),
        blocks=mdl.BlockConfig(kind=kind, count=2, activation=activation, gamma=gamma),
        pooling=pooling,
        head=mdl.HeadConfig(dims=[6, 4, 1], activations=["tanh"], output="identity"),
    )
    return mdl.DMPSModel(cfg, seed=seed)


def _random_stochastic(rng, n, positive=True):
    a = rng.uniform(0.05 if positive else 0.0, 1.0, size=(n, n))
    if not positive:
        a[rng.uniform(size=(n, n)) < 0.4] = 0.0
        np.fill_diagonal(a, a.diagonal() + 0.1)
    return a / a.sum(axis=1, keepdims=True)


def _symmetric_doubly_stochastic(rng, n, terms=4):
    w = np.zeros((n, n))
    for a in rng.dirichlet(np.ones(terms)):
        p = np.eye(n)[rng.permutation(n)]
        w += a * 0.5 * (p + p.T)
    return w


# ---------------------------------------------------------------- autodiff-core


@_check("autodiff-core", "tensor.grad_shape", "gradient shape equals value shape")
def _tensor_grad_shape():
    model = _small_model(seed=1)
    x = _rng("grad_shape").normal(size=(5, 3))
    model.params.zero_grad()
    with Tape() as tape:
        loss = model.forward(x).sum()
    tape.backward(loss)
    bad = [n for n, t in model.params.items() if t.grad is None or t.grad.shape != t.shape]
    assert not bad, f"mismatched gradients: {bad}"
    return f"{len(model.params)} parameters"


@_check("autodiff-core", "tensor.finite_forward", "finite inputs and bounded parameters give finite values")
def _tensor_finite():
    rng = _rng("finite")
    worst = 0.0
    for kind, pool in itertools.product(mdl.BLOCK_KINDS, mdl.POOLING_MODES):
        model = _small_model(kind, pool, "relu", seed=2)
        for scale in (1e-3, 1.0, 1e3):
            out = model.forward(scale * rng.normal(size=(7, 3))).data
            assert np.isfinite(out).all(), f"{kind}/{pool} at scale {scale}"
            worst = max(worst, float(np.abs(out).max()))
    w = ad.softmax_rows(np.array([[1000.0, 1000.0 + np.log(2.0)]])).data
    assert np.isfinite(w).all()
    return f"max |output| {worst:.3g}"


@_check("autodiff-core", "record.topological", "every recorded operation follows the operations producing its inputs")
def _record_topological():
    model = _small_model("denoise", "max", gamma="learnable")
    x, layout = mdl.stack_sets([_rng("topo").normal(size=(n, 3)) for n in (2, 4, 3)])
    with Tape() as tape:
        model.forward(x, layout).sum()
    position = {id(r.output): i for i, r in enumerate(tape.records)}
    for i, rec in enumerate(tape.records):
        for inp in rec.inputs:
            j = position.get(id(inp))
            assert j is None or j < i, f"record {i} consumes output of record {j}"
    return f"{len(tape)} records"


@_check("autodiff-core", "record.reachable_grads", "backward reaches every tracked leaf connected to the loss")
def _record_reachable():
    model = _small_model("denoise", "mean", gamma="learnable")
    orphan = Tensor(np.ones((2, 2)), requires_grad=True)
    model.params.zero_grad()
    with Tape() as tape:
        loss = model.forward(_rng("reach").normal(size=(4, 3))).sum()
        _ = orphan * 2.0
    tape.backward(loss)
    missing = [n for n, t in model.params.items() if t.grad is None]
    assert not missing, f"no gradient for {missing}"
    assert orphan.grad is None, "disconnected tensor received a gradient"
    return "all parameters reached; disconnected leaf untouched"


@_check("autodiff-core", "optimizer.moment_shapes", "Adam moments have their parameter's shape")
def _moment_shapes():
    model = _small_model()
    state = optim.OptimizerState()
    for step in range(3):
        model.params.zero_grad()
        with Tape() as tape:
            loss = model.forward(_rng(f"adam{step}").normal(size=(4, 3))).sum()
        tape.backward(loss)
        optim.adam_step(model.params, state)
    for name, p in model.params.items():
        assert state.first_moment[name].shape == p.shape, name
        assert state.second_moment[name].shape == p.shape, name
    return f"{len(model.params)} parameters after {state.step} steps"


@_check("autodiff-core", "optimizer.lr_monotone", "learning rate stays positive and never increases")
def _lr_monotone():
    rng = _rng("lr")
    state = optim.OptimizerState(lr=1e-3)
    lrs = [state.lr]
    for metric in rng.uniform(size=500):
        optim.plateau_scheduler(state, float(metric), factor=0.9, patience=1)
        lrs.append(state.lr)
    lrs = np.array(lrs)
    assert (lrs > 0).all() and (np.diff(lrs) <= 0).all()
    return f"final lr {lrs[-1]:.3g}"


def _op_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    r = rng.normal(size=(1, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    kink_free = a + np.sign(a) * 0.1  # keep relu away from 0
    layout = lg.SetLayout.from_sizes([2, 3, 1])
    idx, mask = layout.idx, layout.valid
    x6 = rng.normal(size=(6, 3))
    w6 = rng.uniform(size=idx.shape) * mask
    return {
        "add": (lambda t: (t["a"] + t["r"]), {"a": a, "r": r}),
        "neg_sub": (lambda t: (t["a"] - t["r"] * 2.0), {"a": a, "r": r}),
        "mul": (lambda t: t["a"] * t["r"], {"a": a, "r": r}),
        "div": (lambda t: t["a"] / t["p"], {"a": a, "p": pos}),
        "matmul": (lambda t: t["a"] @ t["b"], {"a": a, "b": b}),
        "transpose": (lambda t: t["a"].T @ t["a"], {"a": a}),
        "sum_all": (lambda t: (t["a"] * t["a"]).sum(), {"a": a}),
        "sum_rows": (lambda t: t["a"].sum(axis=0) * t["r"], {"a": a, "r": r}),
        "sum_cols": (lambda t: t["a"].sum(axis=1) * t["p"], {"a": a, "p": pos}),
        **{
            f"elementwise.{name}": (
                lambda t, name=name: ad.elementwise(name, t["a"]),
                {"a": pos if name == "log" else kink_free},
            )
            for name in ("identity", "tanh", "relu", "sigmoid", "exp", "log", "softplus")
        },
        "softmax_rows": (lambda t: ad.softmax_rows(t["a"]) * t["p"], {"a": a, "p": pos}),
        "softmax_rows_masked": (
            lambda t: ad.softmax_rows(t["w"], mask) * (1.0 + t["w"]),
            {"w": w6},
        ),
        "pairwise_sq_dists": (
            lambda t: ad.pairwise_sq_dists(t["a"]) @ t["c"],
            {"a": a, "c": rng.normal(size=(3, 2))},
        ),
        "gather_sq_dists": (
            lambda t: ad.gather_sq_dists(t["x"], idx) * t["v"],
            {"x": x6, "v": rng.normal(size=idx.shape)},
        ),
        "gather_matmul": (lambda t: ad.gather_matmul(t["w"], t["x"], idx), {"w": w6, "x": x6}),
        "segment_max": (
            lambda t: ad.segment_max(t["x"], np.array([0, 2, 5, 6])) * t["v"],
            {"x": x6, "v": rng.normal(size=(3, 3))},
        ),
    }


def _gradcheck_case(fn, arrays, rng) -> float:
    tensors = {k: Tensor(np.array(v, dtype=np.float64)) for k, v in arrays.items()}
    probe = fn(tensors)
    weights = rng.normal(size=probe.shape)
    errs = check_gradients(lambda: (fn(tensors) * weights).sum(), tensors)
    return max(errs.values())


@_check("autodiff-core", "autodiff.gradcheck", "every differentiable operation matches central differences")
def _ops_gradcheck():
    rng = _rng("ops")
    errors = {name: _gradcheck_case(fn, arrays, rng) for name, (fn, arrays) in _op_cases(rng).items()}
    bad = {k: v for k, v in errors.items() if not v < GRAD_TOL}
    assert not bad, f"relative error above {GRAD_TOL}: {bad}"
    return f"{len(errors)} operations, worst {max(errors.values()):.2e}"


@_check("autodiff-core", "autodiff.softmax_stochastic", "softmax rows are positive and sum to one")
def _softmax_rows():
    rng = _rng("softmax")
    worst = 0.0
    for shift, scale in ((0.0, 1e-3), (0.0, 1.0), (0.0, 30.0), (1000.0, 5.0), (-1000.0, 5.0)):
        y = ad.softmax_rows(shift + scale * rng.normal(size=(20, 9))).data
        assert (y > 0).all(), f"zero entry at shift {shift}, scale {scale}"
        worst = max(worst, float(np.abs(y.sum(axis=1) - 1).max()))
    assert worst < 1e-9, f"row sum error {worst}"
    return f"max row error {worst:.1e}"


@_check("autodiff-core", "autodiff.matmul_associative", "(AB)C equals A(BC) for random conforming triples")
def _matmul_assoc():
    rng = _rng("assoc")
    worst = 0.0
    for _ in range(50):
        p, q, r, s = rng.integers(1, 9, size=4)
        a, b, c = (Tensor(rng.normal(size=sh)) for sh in ((p, q), (q, r), (r, s)))
        left, right = ((a @ b) @ c).data, (a @ (b @ c)).data
        worst = max(worst, float(np.linalg.norm(left - right) / max(np.linalg.norm(left), 1e-300)))
    assert worst < 1e-8, f"relative error {worst}"
    return f"worst relative error {worst:.1e}"


@_check("autodiff-core", "autodiff.backward_deterministic", "replaying backward gives bit-identical gradients")
def _backward_deterministic():
    model = _small_model("residual", "max", seed=3)
    x, layout = mdl.stack_sets([_rng("det").normal(size=(n, 3)) for n in (3, 5)])
    with Tape() as tape:
        loss = model.forward(x, layout).sum()
    grads = []
    for _ in range(2):
        model.params.zero_grad()
        tape.backward(loss)
        grads.append(model.params.grads())
    same = all(np.array_equal(grads[0][k], grads[1][k]) for k in grads[0])
    assert same, "gradients differ between replays"
    return "two replays identical"


# ---------------------------------------------------------------- latent-graph


def _graph_params(seed=0, dims=(3, 8, 4)):
    cfg = lg.KernelConfig(dims=dims, activations=("tanh", "tanh"))
    params = ParamStore()
    lg.init_kernel_params(params, cfg, np.random.default_rng(seed))
    return params, cfg


@_check("latent-graph", "kernel_config.sigma_positive", "bandwidth is positive for any unconstrained value")
def _sigma_positive():
    params, _ = _graph_params()
    for raw in np.linspace(-20, 20, 41):
        params["kernel.log_sigma"].data = np.array([[raw]])
        assert lg.sigma_value(params) > 0, f"log sigma {raw}"
    return "41 values in [-20, 20]"


@_check("latent-graph", "latent_graph.kernel_range", "K is symmetric with entries in (0, 1] and unit diagonal")
def _kernel_range():
    params, cfg = _graph_params(1)
    rng = _rng("krange")
    for n in (1, 2, 5, 9):
        k = lg.build_latent_graph(rng.normal(size=(n, 3)), params, cfg).K.data
        assert np.abs(k - k.T).max() < 1e-12, "asymmetric"
        assert (k > 0).all() and (k <= 1).all(), "entry outside (0, 1]"
        assert np.array_equal(np.diag(k), np.ones(n)), "diagonal not 1"
    return "set sizes 1, 2, 5, 9"


@_check("latent-graph", "latent_graph.W_row_stochastic", "W rows sum to one and entries are nonnegative")
def _w_stochastic():
    params, cfg = _graph_params(2)
    rng = _rng("wstoch")
    worst = 0.0
    sets = [rng.normal(size=(n, 3)) for n in (1, 3, 4, 8)]
    x, layout = mdl.stack_sets(sets)
    ws = [lg.build_latent_graph(s, params, cfg).W.data for s in sets]
    ws += [w for _, w in lg.build_latent_graph(x, params, cfg, layout).blocks()]
    sparse_cfg = lg.KernelConfig(dims=cfg.dims, activations=cfg.activations, threshold=0.2)
    ws += [lg.build_latent_graph(s, params, sparse_cfg).W.data for s in sets]
    for w in ws:
        assert (w >= 0).all(), "negative entry"
        worst = max(worst, float(np.abs(w.sum(axis=1) - 1).max()))
    assert worst < 1e-9, f"row sum error {worst:.3e}"
    return f"{len(ws)} graphs, max row error {worst:.1e}"


@_check("latent-graph", "latent_graph.conjugation_equivariance", "permuting the set conjugates K and W by the permutation")
def _graph_equivariance():
    params, cfg = _graph_params(3)
    rng = _rng("conj")
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        x = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        g = lg.build_latent_graph(x, params, cfg)
        gp = lg.build_latent_graph(x[perm], params, cfg)
        for a, b in ((g.K.data, gp.K.data), (g.W.data, gp.W.data)):
            worst = max(worst, float(np.abs(a[np.ix_(perm, perm)] - b).max()))
    assert worst < 1e-12, f"max deviation {worst:.3e}"
    return f"50 sets, max deviation {worst:.1e}"


@_check("latent-graph", "latent_graph.kernel_symmetry", "max |K - K^T| < 1e-12 on batched graphs")
def _kernel_symmetry():
    params, cfg = _graph_params(4)
    rng = _rng("ksym")
    x, layout = mdl.stack_sets([rng.normal(size=(n, 3)) for n in (2, 7, 5)])
    worst = max(
        float(np.abs(k - k.T).max()) for k, _ in lg.build_latent_graph(x, params, cfg, layout).blocks()
    )
    assert worst < 1e-12, f"asymmetry {worst:.3e}"
    return f"asymmetry {worst:.1e}"


@_check("latent-graph", "latent_graph.differentiable", "scalar functions of W pass the gradient check in sigma and MLP weights")
def _graph_gradcheck():
    params, cfg = _graph_params(5)
    rng = _rng("wgrad")
    x = rng.normal(size=(5, 3))
    probe = rng.normal(size=(5, 5))
    tensors = dict(params.items())
    errs = check_gradients(
        lambda: (lg.build_latent_graph(x, params, cfg).W * probe).sum(), tensors
    )
    bad = {k: v for k, v in errs.items() if not v < GRAD_TOL}
    assert not bad, f"relative error above {GRAD_TOL}: {bad}"
    return f"worst {max(errs.values()):.2e}"


# ---------------------------------------------------------------- set-blocks


@_check("set-blocks", "block_config.gamma_interval", "gamma lies strictly inside (0, 1)")
def _gamma_interval():
    for bad in (0.0, 1.0, -0.1, 1.5):
        try:
            mdl.BlockConfig(kind="denoise", gamma=bad)
        except lg.ConfigError:
            continue
        raise AssertionError(f"fixed gamma {bad} accepted")
    values = [mdl.gamma_value(g) for g in np.linspace(-30, 30, 61)]
    assert all(0 < v < 1 for v in values), "sigmoid left (0, 1)"
    return "boundary values rejected; sigmoid over [-30, 30] inside"


@_check("set-blocks", "model_config.dims_chain", "encoder, block, pooling and head widths chain")
def _dims_chain():
    try:
        mdl.ModelConfig(
            encoder=mdl.EncoderConfig(dims=[3, 6]),
            kernel=lg.KernelConfig(dims=(6, 4, 4)),
            blocks=mdl.BlockConfig(count=1),
            head=mdl.HeadConfig(dims=[5, 1]),
        )
    except lg.ConfigError:
        pass
    else:
        raise AssertionError("mismatched head width accepted")
    for kind in mdl.BLOCK_KINDS:
        model = _small_model(kind)
        h = model.encode(np.zeros((4, 3)))
        assert h.shape[1] == model.config.block_widths()[0] if kind != "residual" else True
        out = model.forward(np.zeros((4, 3)))
        assert out.shape == (1, model.config.output_dim)
    return "mismatch rejected; forward shapes consistent"


def _permute_graph(w, perm):
    return w[np.ix_(perm, perm)]


@_check("set-blocks", "blocks.equivariance", "B(PX; PWP^T) = P B(X; W) for every block kind")
def _block_equivariance():
    rng = _rng("bequiv")
    worst = 0.0
    for _ in range(100):
        n, p = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        x = rng.normal(size=(n, p))
        w = _random_stochastic(rng, n)
        h = rng.normal(size=(p, p))
        b = rng.normal(size=(1, p))
        perm = rng.permutation(n)
        wp = _permute_graph(w, perm)
        pairs = [
            (mdl.vanilla_block(w, x, h, b, "tanh"), mdl.vanilla_block(wp, x[perm], h, b, "tanh")),
            (
                mdl.set_denoising_block(w, x, 0.3, h, b, "relu"),
                mdl.set_denoising_block(wp, x[perm], 0.3, h, b, "relu"),
            ),
            (mdl.set_residual_block(w, x, h, b, "tanh"), mdl.set_residual_block(wp, x[perm], h, b, "tanh")),
        ]
        for out, out_p in pairs:
            worst = max(worst, float(np.abs(out.data[perm] - out_p.data).max()))
    assert worst < 1e-12, f"max deviation {worst:.3e}"
    return f"300 block evaluations, max deviation {worst:.1e}"


def invariance_deviation(model, rng, n_sets=100, n_perms=1) -> float:
    """Worst relative change of the model output under random reorderings."""
    worst = 0.0
    p = model.config.input_dim
    for _ in range(n_sets):
        n = int(rng.integers(2, 11))
        x = rng.normal(size=(n, p))
        base = model.forward(x).data
        for _ in range(n_perms):
            out = model.forward(x[rng.permutation(n)]).data
            worst = max(worst, float((np.abs(out - base) / (np.abs(base) + 1e-12)).max()))
    return worst


@_check("set-blocks", "model.permutation_invariance", "reordering a set leaves the prediction unchanged")
def _model_invariance():
    rng = _rng("invariance")
    worst = 0.0
    for pool in mdl.POOLING_MODES:
        for kind in mdl.BLOCK_KINDS:
            worst = max(worst, invariance_deviation(_small_model(kind, pool, seed=4), rng, 100))
    assert worst < 1e-6, f"relative deviation {worst:.3e}"
    return f"900 sets, max relative deviation {worst:.1e}"


def deep_sets_reference(x: np.ndarray, config: mdl.ModelConfig, arrays: dict) -> np.ndarray:
    """Per-element MLP stack, pooling and head in plain numpy; no graph at all."""
    acts = {
        "identity": lambda v: v,
        "tanh": np.tanh,
        "relu": lambda v: np.maximum(v, 0.0),
        "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v)),
        "exp": np.exp,
    }
    h = np.asarray(x, dtype=np.float64)
    for i, a in enumerate(config.encoder.activations):
        h = acts[a](h @ arrays[f"encoder.{i}.weight"] + arrays[f"encoder.{i}.bias"])
    tau = acts[config.blocks.activation]
    for t in range(config.blocks.count):
        z = tau(h @ arrays[f"blocks.{t}.weight"] + arrays[f"blocks.{t}.bias"])
        h = h + z if config.blocks.kind == "residual" else z
    pooled = {"sum": h.sum(axis=0), "mean": h.mean(axis=0), "max": h.max(axis=0)}[config.pooling]
    out = pooled[None, :]
    for i, a in enumerate(config.head.activations + [config.head.output]):
        out = acts[a](out @ arrays[f"head.{i}.weight"] + arrays[f"head.{i}.bias"])
    return out[0]


@_check("set-blocks", "model.deep_sets_reduction", "with W = I the model is a per-element network plus pooling")
def _deep_sets():
    rng = _rng("deepsets")
    worst = 0.0
    for kind, pool in itertools.product(mdl.BLOCK_KINDS, mdl.POOLING_MODES):
        model = _small_model(kind, pool, seed=5)
        cfg = mdl.ModelConfig.from_dict(
            {**model.config.to_dict(), "kernel": {**model.config.to_dict()["kernel"], "graph": "identity"}}
        )
        arrays = model.params.snapshot()
        for _ in range(10):
            x = rng.normal(size=(int(rng.integers(1, 9)), 3))
            got = mdl.dmps_forward(x, cfg, model.params)
            ref = deep_sets_reference(x, cfg, arrays)
            worst = max(worst, float(np.abs(got - ref).max()))
    assert worst < 1e-10, f"max deviation {worst:.3e}"
    return f"90 sets, max deviation {worst:.1e}"


@_check("set-blocks", "blocks.oscillation_contraction", "row range of WX is at most that of X, strictly less for positive W")
def _mp_contraction():
    rng = _rng("contract")
    for i in range(100):
        n = int(rng.integers(2, 9))
        positive = i % 2 == 0
        w = _random_stochastic(rng, n, positive)
        x = rng.normal(size=(n, 3))
        y = mdl.message_passing_step(w, x).data
        before, after = np.ptp(x, axis=0), np.ptp(y, axis=0)
        assert (after <= before + 1e-12).all(), "range grew"
        if positive:
            assert (after < before).all(), "range did not shrink under positive W"
    return "100 random graphs"


# ---------------------------------------------------------------- diffusion-lab


@_check("diffusion-lab", "weighted_graph.symmetric_nonnegative", "graphs reject asymmetric or negative weights")
def _weighted_graph():
    rng = _rng("wgraph")
    for _ in range(20):
        g = dl.symmetrize_for_energy_test(_random_stochastic(rng, 5))
        assert np.array_equal(g.w, g.w.T) and (g.w >= 0).all()
    for bad in (np.array([[0, 1], [0.5, 0]]), np.array([[0, -1], [-1, 0]])):
        try:
            dl.WeightedGraph(bad)
        except ValueError:
            continue
        raise AssertionError(f"accepted {bad.tolist()}")
    return "20 symmetrized graphs valid; invalid weights rejected"


@_check("diffusion-lab", "trace.lengths", "a trace of T steps holds T + 1 states, energies and oscillations")
def _trace_lengths():
    rng = _rng("trace")
    for s in (0.3, 1.0):
        tr = dl.simulate_to_steady_state(rng.normal(size=(5, 2)), _random_stochastic(rng, 5), s, max_steps=40)
        assert len(tr.states) == len(tr.energies) == len(tr.oscillations) == tr.steps + 1
    return "lengths consistent"


@_check("diffusion-lab", "diffusion.energy_descent", "Dirichlet energy never increases under symmetric stochastic W")
def _energy_descent():
    rng = _rng("energy")
    for _ in range(50):
        n = int(rng.integers(2, 9))
        w = _symmetric_doubly_stochastic(rng, n)
        graph = dl.symmetrize_for_energy_test(w)
        s = float(rng.uniform(0.01, 1.0))
        x = rng.normal(size=(n, 3))
        energies = [dl.dirichlet_energy(x, graph)]
        for _ in range(20):
            x = dl.diffusion_step(x, w, s)
            energies.append(dl.dirichlet_energy(x, graph))
        e = np.array(energies)
        assert (np.diff(e) <= 1e-12 * max(e[0], 1.0)).all(), f"energy rose at s={s:.3f}"
    return "50 instances, 20 steps each"


@_check("diffusion-lab", "diffusion.oscillation_nonexpansion", "oscillation never grows; strict for positive effective matrices")
def _osc_nonexpansion():
    rng = _rng("osc")
    for i in range(100):
        n = int(rng.integers(2, 8))
        w = _random_stochastic(rng, n, positive=i % 2 == 0)
        s = float(rng.uniform(0.05, 1.0))
        x = rng.normal(size=(n, 1))
        y = dl.diffusion_step(x, w, s)
        assert dl.oscillation_index(y) <= dl.oscillation_index(x) + 1e-12, "oscillation grew"
        eff = (1 - s) * np.eye(n) + s * w
        if eff.min() > 0:
            assert dl.oscillation_index(y) < dl.oscillation_index(x), "no strict decrease"
    return "100 instances"


@_check("diffusion-lab", "diffusion.mass_conservation", "doubly stochastic W preserves column sums")
def _mass():
    rng = _rng("mass")
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        w = np.zeros((n, n))
        for a in rng.dirichlet(np.ones(3)):
            w += a * np.eye(n)[rng.permutation(n)]
        x = rng.normal(size=(n, 3))
        y = dl.diffusion_step(x, w, float(rng.uniform(0.05, 1.0)))
        worst = max(worst, float(np.abs(y.sum(axis=0) - x.sum(axis=0)).max()))
    assert worst < 1e-10, f"column sum drift {worst:.3e}"
    return f"max drift {worst:.1e}"


def stationary_by_power_iteration(w: np.ndarray, tol: float = 1e-15, max_iter: int = 100_000) -> np.ndarray:
    """Left fixed point ``pi W = pi`` of a positive stochastic matrix."""
    pi = np.full(w.shape[0], 1.0 / w.shape[0])
    for _ in range(max_iter):
        nxt = pi @ w
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    return pi


@_check("diffusion-lab", "diffusion.steady_state", "limit rows equal pi^T X0 from power iteration")
def _steady_state():
    rng = _rng("steady")
    worst = 0.0
    for _ in range(30):
        w = _random_stochastic(rng, 5)
        x0 = rng.normal(size=(5, 3))
        trace = dl.simulate_to_steady_state(x0, w, float(rng.uniform(0.2, 1.0)), tol=1e-10)
        assert trace.converged, "did not converge"
        target = stationary_by_power_iteration(w) @ x0
        worst = max(worst, float(np.abs(trace.final - target).max()))
    assert worst < 1e-6, f"deviation {worst:.3e}"
    return f"30 instances, max deviation {worst:.1e}"


# ---------------------------------------------------------------- synthetic-tasks


@_check("synthetic-tasks", "gaussian.covariance_pd", "Sigma(rho) is positive definite on [0, 1) and singular at 1")
def _covariance_pd():
    for rho in np.r_[np.linspace(0, 0.99, 100), 0.999999]:
        np.linalg.cholesky(tasks.build_covariance(float(rho)))
    sigma = np.eye(5)
    sigma[1, 3] = sigma[3, 1] = 1.0
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    else:
        raise AssertionError("Cholesky succeeded at rho = 1")
    try:
        tasks.build_covariance(1.0)
    except lg.ConfigError:
        return "101 values factorized; rho = 1 rejected"
    raise AssertionError("build_covariance accepted rho = 1")


@_check("synthetic-tasks", "counting.clusters_present", "every chosen cluster contributes an element")
def _clusters_present():
    spec = tasks.CountingTaskSpec()
    rng = _rng("clusters")
    for _ in range(500):
        _, c, assign = tasks.sample_counting_set(spec, rng, return_assignment=True)
        assert set(assign.tolist()) == set(range(c)), f"missing cluster in {assign}"
    return "500 sets"


@_check("synthetic-tasks", "counting.label_range", "labels satisfy 1 <= c <= n <= 10")
def _label_range():
    spec = tasks.CountingTaskSpec()
    _, layout, labels = tasks.counting_batch(spec, _rng("labels"), size=2000)
    c, n = labels[:, 0], layout.sizes
    assert ((1 <= c) & (c <= n) & (n <= 10)).all()
    return f"2000 sets, c in [{int(c.min())}, {int(c.max())}], n in [{n.min()}, {n.max()}]"


@_check("synthetic-tasks", "tasks.rng_streams", "fixed seeds repeat; distinct seeds give uncorrelated streams")
def _rng_streams():
    g = tasks.GaussianTaskSpec()
    c = tasks.CountingTaskSpec()
    for make in (tasks.gaussian_batch, tasks.counting_batch):
        spec = g if make is tasks.gaussian_batch else c
        a = make(spec, tasks.stream_rng(7, 0, 3))
        b = make(spec, tasks.stream_rng(7, 0, 3))
        assert all(np.array_equal(u, v) for u, v in ((a[0], b[0]), (a[2], b[2])))
    x1 = tasks.gaussian_batch(g, tasks.stream_rng(1, 0, 0), 2000)[0].ravel()
    x2 = tasks.gaussian_batch(g, tasks.stream_rng(2, 0, 0), 2000)[0].ravel()
    x3 = tasks.gaussian_batch(g, tasks.stream_rng(1, 0, 1), 2000)[0].ravel()
    bound = 4.0 / np.sqrt(x1.size)
    for other in (x2, x3):
        r = abs(np.corrcoef(x1, other)[0, 1])
        assert r < bound, f"correlation {r:.4f} above {bound:.4f}"
    return "repeatable; cross-stream correlations within 4 standard errors"


# ---------------------------------------------------------------- cli-harness


def _tiny_run(task: str, out: Path, seed: int = 0):
    from .config import default_config
    from .training import export_kernel, train

    cfg = default_config(task).replace(batches=12, log_every=4, eval_sets=16, test_sets=16, seed=seed)
    result = train(cfg, out_dir=out)
    export_kernel(result.params, cfg, out, n_sets=16, n_export=2, seed=seed)
    return result


@_check("cli-harness", "run_config.defaults", "default configs carry the documented settings")
def _defaults():
    from .config import default_config

    g, c = default_config("gaussian"), default_config("counting")
    assert (g.optim.lr, g.optim.factor, g.optim.patience) == (1e-3, 0.9, 1)
    assert g.gaussian.batch_size == 128 and g.batches == 10_000 and g.test_sets == 2000
    assert c.counting.batch_size == 32 and c.batches == 20_000
    assert (c.counting.n_min, c.counting.n_max) == (6, 10)
    assert g.model.blocks.kind == "mp" and g.model.pooling == "max"
    assert c.model.blocks.learnable_gamma and c.model.pooling == "sum"
    return "gaussian and counting defaults match"


@_check("cli-harness", "metrics.records", "accuracies lie in [0, 1] and records are ordered by step")
def _metrics_records():
    with tempfile.TemporaryDirectory() as tmp:
        for task in ("gaussian", "counting"):
            res = _tiny_run(task, Path(tmp) / task)
            steps = [m.step for m in res.metrics]
            assert steps == sorted(set(steps)), f"{task} steps {steps}"
            assert all(0.0 <= m.eval_accuracy <= 1.0 for m in res.metrics)
    return "both tasks"


@_check("cli-harness", "harness.determinism", "identical config and seed give byte-identical logs and CSVs")
def _determinism():
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a", Path(tmp) / "b"
        for d in (a, b):
            _tiny_run("gaussian", d, seed=3)
        names = sorted(p.name for p in a.iterdir() if p.suffix in (".jsonl", ".csv", ".bin"))
        names.remove("timing.jsonl")
        diff = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
        assert not diff, f"differing files: {diff}"
    return f"{len(names)} files identical"


@_check("cli-harness", "harness.emitted_bounds", "exported W rows sum to one")
def _emitted_bounds():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        _tiny_run("counting", out)
        files = sorted(out.glob("kernel_W_*.csv"))
        assert files, "no W exported"
        worst = max(
            float(np.abs(np.loadtxt(f, delimiter=",", ndmin=2).sum(axis=1) - 1).max()) for f in files
        )
    assert worst < 1e-9, f"row sum error {worst:.3e}"
    return f"{len(files)} files, max row error {worst:.1e}"


@_check("cli-harness", "harness.checkpoint_untouched", "evaluating from a checkpoint leaves the file unchanged")
def _checkpoint_untouched():
    from .checkpoint import load_checkpoint
    from .training import evaluate

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp)
        _tiny_run("gaussian", out)
        ckpt = out / "checkpoint.bin"
        before = (ckpt.read_bytes(), ckpt.stat().st_mtime_ns)
        params, cfg = load_checkpoint(ckpt)
        evaluate(params, cfg, n_sets=32, seed=0)
        assert (ckpt.read_bytes(), ckpt.stat().st_mtime_ns) == before
    return "bytes and mtime unchanged"


# ---------------------------------------------------------------- runner


def run_invariant_suite(out=None, only: list[str] | None = None) -> InvariantReport:
    """Run every registered check; never stops at the first failure.

    ``out`` may be a directory (``report.json`` is written inside) or a file path.
    """
    checks = []
    start = time.perf_counter()
    for module, name, description, fn in _REGISTRY:
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            detail = fn() or ""
            passed = True
        except Exception as exc:  # noqa: BLE001 - every failure is reported, never raised
            passed = False
            kind = "assertion" if isinstance(exc, AssertionError) else type(exc).__name__
            detail = f"{kind}: {exc}" if str(exc) else kind
            if not isinstance(exc, AssertionError):
                detail += "\n" + traceback.format_exc(limit=3)
        checks.append(CheckResult(name, module, description, passed, detail, round(time.perf_counter() - t0, 3)))
    report = InvariantReport(checks, time.perf_counter() - start)
    if out is not None:
        path = Path(out)
        if path.suffix != ".json":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "report.json"
        report.write(path)
    return report
