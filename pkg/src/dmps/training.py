"""Training, evaluation, parameter sweeps and kernel export."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .autodiff import ParamStore, Tape
from .checkpoint import save_checkpoint
from .config import RunConfig
from .latent_graph import ConfigError
from .model import DMPSModel, init_params, stack_sets
from .optim import OptimizerState, adam_step, plateau_scheduler
from .tasks import (
    EVAL_STREAM,
    TEST_STREAM,
    TRAIN_STREAM,
    binary_ce_with_logits,
    counting_batch,
    gaussian_batch,
    poisson_mode,
    poisson_nll_from_log_rate,
    stream_rng,
)

__all__ = [
    "NumericalAbort",
    "MetricsRecord",
    "TrainResult",
    "EvalResult",
    "SweepTable",
    "draw_batch",
    "task_loss",
    "decide",
    "score",
    "train",
    "evaluate",
    "evaluate_sets",
    "sweep_rho",
    "sweep_gamma",
    "export_kernel",
    "write_matrix_csv",
]

log = logging.getLogger(__name__)

INIT_STREAM = 3
EVAL_CHUNK = 256


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    eval_accuracy: float
    lr: float
    gamma: float | None = None
    sigma: float | None = None
    wall_clock: float = 0.0

    def to_json(self) -> str:
        """Deterministic line for ``metrics.jsonl``; wall-clock time is left out."""
        d = asdict(self)
        d.pop("wall_clock")
        return json.dumps(d)


@dataclass
class TrainResult:
    params: ParamStore
    config: RunConfig
    metrics: list[MetricsRecord] = field(default_factory=list)

    @property
    def model(self) -> DMPSModel:
        return DMPSModel(self.config.model, self.params)


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    outputs: np.ndarray


def draw_batch(config: RunConfig, rng: np.random.Generator, size: int | None = None):
    if config.task == "gaussian":
        return gaussian_batch(config.gaussian, rng, size)
    return counting_batch(config.counting, rng, size)


def task_loss(config: RunConfig, head_out, labels: np.ndarray):
    if config.task == "gaussian":
        return binary_ce_with_logits(head_out, labels)
    return poisson_nll_from_log_rate(head_out, labels)


def decide(task: str, outputs: np.ndarray) -> np.ndarray:
    """Class decisions from transformed outputs: threshold 0.5 or rounded Poisson rate."""
    if task == "gaussian":
        return (outputs > 0.5).astype(np.float64)
    return poisson_mode(outputs)


def score(task: str, outputs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Accuracy and decisions for transformed outputs against labels."""
    preds = decide(task, np.asarray(outputs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64).reshape(preds.shape)
    return float((preds == labels).mean()), preds


def _eval_chunks(config: RunConfig, n_sets: int, seed: int, stream: int):
    if config.task == "gaussian" and n_sets % 2:
        raise ConfigError("gaussian evaluation needs an even number of sets")
    done, chunk = 0, 0
    while done < n_sets:
        size = min(EVAL_CHUNK, n_sets - done)
        yield draw_batch(config, stream_rng(seed, stream, chunk), size)
        done += size
        chunk += 1


def _model_outputs(model: DMPSModel, x, layout) -> np.ndarray:
    return model.transform(model.forward(x, layout).data)


def evaluate(
    params: ParamStore,
    config: RunConfig,
    n_sets: int | None = None,
    seed: int | None = None,
    stream: int = TEST_STREAM,
) -> EvalResult:
    """Accuracy on freshly drawn held-out sets; ``params`` are only read."""
    n_sets = config.test_sets if n_sets is None else n_sets
    seed = config.seed if seed is None else seed
    model = DMPSModel(config.model, params)
    outs, labels = [], []
    for x, layout, y in _eval_chunks(config, n_sets, seed, stream):
        outs.append(_model_outputs(model, x, layout))
        labels.append(y)
    outputs = np.vstack(outs)
    labels_arr = np.vstack(labels)
    accuracy, preds = score(config.task, outputs, labels_arr)
    return EvalResult(accuracy, preds, labels_arr, outputs)


def evaluate_sets(
    params: ParamStore, config: RunConfig, sets: Sequence[np.ndarray], labels
) -> EvalResult:
    model = DMPSModel(config.model, params)
    outs = []
    for lo in range(0, len(sets), EVAL_CHUNK):
        x, layout = stack_sets(sets[lo : lo + EVAL_CHUNK])
        outs.append(_model_outputs(model, x, layout))
    outputs = np.vstack(outs)
    labels_arr = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    accuracy, preds = score(config.task, outputs, labels_arr)
    return EvalResult(accuracy, preds, labels_arr, outputs)


def train(config: RunConfig, out_dir=None, progress: bool = False) -> TrainResult:
    """Run the batch loop. Writes ``metrics.jsonl``, ``timing.jsonl``,
    ``checkpoint.bin`` and ``config.yaml`` when ``out_dir`` is given."""
    out_dir = out_dir if out_dir is not None else config.out_dir
    params = init_params(config.model, stream_rng(config.seed, INIT_STREAM))
    model = DMPSModel(config.model, params)
    opt = config.optim
    state = OptimizerState(lr=opt.lr)
    eval_batches = list(_eval_chunks(config, config.eval_sets, config.seed, EVAL_STREAM))
    metrics: list[MetricsRecord] = []
    window: list[float] = []
    log_window: list[float] = []
    start = time.perf_counter()

    for step in range(1, config.batches + 1):
        x, layout, y = draw_batch(config, stream_rng(config.seed, TRAIN_STREAM, step))
        params.zero_grad()
        # overflow shows up as a non-finite loss, which is reported below
        with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            loss = task_loss(config, model.forward(x, layout), y)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalAbort(step, value)
        tape.backward(loss)
        adam_step(params, state, opt.beta1, opt.beta2, opt.eps)
        window.append(value)
        log_window.append(value)

        if opt.scheduler and step % opt.scheduler_every == 0:
            plateau_scheduler(state, float(np.mean(window)), opt.factor, opt.patience)
            window.clear()
        if step % config.log_every == 0 or step == config.batches:
            correct = total = 0
            for ex, elay, ey in eval_batches:
                preds = decide(config.task, _model_outputs(model, ex, elay))
                correct += int((preds == ey).sum())
                total += len(ey)
            rec = MetricsRecord(
                step=step,
                train_loss=float(np.mean(log_window)),
                eval_accuracy=correct / total,
                lr=state.lr,
                gamma=model.gamma(),
                sigma=(
                    float(np.exp(params["kernel.log_sigma"].item()))
                    if "kernel.log_sigma" in params
                    else None
                ),
                wall_clock=time.perf_counter() - start,
            )
            metrics.append(rec)
            log_window.clear()
            if progress:
                log.info(
                    "step %d loss %.4f acc %.3f lr %.2e", step, rec.train_loss,
                    rec.eval_accuracy, rec.lr,
                )

    result = TrainResult(params, config, metrics)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in result.metrics:
            fh.write(rec.to_json() + "\n")
    with open(out / "timing.jsonl", "w") as fh:
        for rec in result.metrics:
            fh.write(json.dumps({"step": rec.step, "wall_clock": rec.wall_clock}) + "\n")
    save_checkpoint(out / "checkpoint.bin", result.params, result.config)
    (out / "config.yaml").write_text(
        yaml.safe_dump(result.config.to_dict(), sort_keys=False, default_flow_style=None)
    )


@dataclass
class SweepTable:
    parameter: str
    values: list[float]
    seeds: list[int]
    accuracies: np.ndarray  # (len(values), len(seeds))

    @property
    def mean(self) -> np.ndarray:
        return self.accuracies.mean(axis=1)

    @property
    def sd(self) -> np.ndarray:
        if self.accuracies.shape[1] < 2:
            return np.zeros(len(self.values))
        return self.accuracies.std(axis=1, ddof=1)

    def best(self) -> float:
        return self.values[int(np.argmax(self.mean))]

    def row(self, value: float) -> np.ndarray:
        return self.accuracies[self.values.index(value)]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.parameter] + [f"seed_{s}" for s in self.seeds] + ["mean", "sd"])
            for v, accs, m, s in zip(self.values, self.accuracies, self.mean, self.sd):
                writer.writerow([repr(v)] + [repr(float(a)) for a in accs] + [repr(m), repr(s)])


def _train_and_test(cfg_dict: dict) -> float:
    cfg = RunConfig.from_dict(cfg_dict)
    result = train(cfg, out_dir=None)
    return evaluate(result.params, cfg).accuracy


def _run_grid(configs: list[dict], jobs: int) -> list[float]:
    if jobs <= 1:
        return [_train_and_test(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_and_test, configs))


def _sweep(config: RunConfig, parameter: str, values, seeds, mutate, out_dir, jobs) -> SweepTable:
    values = [float(v) for v in values]
    seeds = [int(s) for s in seeds]
    if len(set(values)) != len(values):
        raise ConfigError(f"duplicate {parameter} grid values")
    configs = []
    for v in values:
        for s in seeds:
            d = config.to_dict()
            d["seed"] = s
            d["out_dir"] = None
            mutate(d, v)
            configs.append(RunConfig.from_dict(d).to_dict())
    accs = np.array(_run_grid(configs, jobs)).reshape(len(values), len(seeds))
    table = SweepTable(parameter, values, seeds, accs)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(out_dir) / "results.csv")
    return table


def sweep_rho(config: RunConfig, grid=None, seeds=None, out_dir=None, jobs: int = 1) -> SweepTable:
    """Test accuracy of the gaussian task per (rho, seed)."""
    if config.task != "gaussian":
        raise ConfigError("the rho sweep runs on the gaussian task")

    def mutate(d, v):
        d["gaussian"]["rho"] = v

    grid = config.rho_grid if grid is None else grid
    seeds = config.sweep_seeds if seeds is None else seeds
    return _sweep(config, "rho", grid, seeds, mutate, out_dir, jobs)


def sweep_gamma(
    config: RunConfig, grid=None, seeds=None, out_dir=None, jobs: int = 1
) -> SweepTable:
    """Test accuracy per (fixed gamma, seed) for a set-denoising model."""
    for v in config.gamma_grid if grid is None else grid:
        if not 0.0 < float(v) < 1.0:
            raise ConfigError(f"gamma grid values must lie in (0, 1), got {v}")

    def mutate(d, v):
        d["model"]["blocks"]["kind"] = "denoise"
        d["model"]["blocks"]["gamma"] = v

    grid = config.gamma_grid if grid is None else grid
    seeds = config.sweep_seeds if seeds is None else seeds
    return _sweep(config, "gamma", grid, seeds, mutate, out_dir, jobs)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt="%.17e")


def _offdiag_summary(mean_k: np.ndarray) -> dict:
    iu, ju = np.triu_indices(mean_k.shape[0], k=1)
    vals = mean_k[iu, ju]
    top = int(np.argmax(vals))
    z_scores = []
    for i in range(len(vals)):
        rest = np.delete(vals, i)
        sd = rest.std(ddof=1)
        z_scores.append((vals[i] - rest.mean()) / sd if sd > 0 else math.inf)
    return {
        "argmax_pair": [int(iu[top]) + 1, int(ju[top]) + 1],
        "argmax_value": float(vals[top]),
        "max_z": float(max(z_scores)),
        "flat": bool(max(z_scores) <= 4.0),
    }


def export_kernel(
    params: ParamStore,
    config: RunConfig,
    out_dir=None,
    n_sets: int | None = None,
    n_export: int = 3,
    seed: int | None = None,
) -> dict:
    """Kernel matrices of held-out sets.

    For the gaussian task returns the mean ``K`` over N(0, Sigma) sets and over
    N(0, I) sets, the index of each mean's largest off-diagonal (1-based), and
    whether the N(0, I) mean is flat (no off-diagonal above the mean plus four
    standard deviations of the others). ``n_export`` sets per class also get
    their own ``K`` and ``W`` files.
    """
    if config.model.kernel.graph != "learned":
        raise ConfigError("kernel export needs a learned latent graph")
    n_sets = config.test_sets if n_sets is None else n_sets
    seed = config.seed if seed is None else seed
    model = DMPSModel(config.model, params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"task": config.task, "n_sets": n_sets}

    if config.task == "gaussian":
        p = config.gaussian.dim
        sums = {"identity": np.zeros((p, p)), "sigma": np.zeros((p, p))}
        counts = {"identity": 0, "sigma": 0}
        exported = {"identity": 0, "sigma": 0}
        for x, layout, y in _eval_chunks(config, n_sets, seed, TEST_STREAM):
            graph = model.latent_graph(x, layout)
            for (k, w), label in zip(graph.blocks(), y[:, 0]):
                name = "sigma" if label == 1 else "identity"
                sums[name] += k
                counts[name] += 1
                if out is not None and exported[name] < n_export:
                    idx = exported[name]
                    write_matrix_csv(out / f"kernel_K_{name}_{idx:03d}.csv", k)
                    write_matrix_csv(out / f"kernel_W_{name}_{idx:03d}.csv", w)
                    exported[name] += 1
        for name in ("sigma", "identity"):
            mean_k = sums[name] / counts[name]
            summary[name] = {"mean_K": mean_k.tolist(), **_offdiag_summary(mean_k)}
            if out is not None:
                write_matrix_csv(out / f"kernel_mean_K_{name}.csv", mean_k)
    else:
        n_written = 0
        for x, layout, y in _eval_chunks(config, min(n_sets, n_export), seed, TEST_STREAM):
            graph = model.latent_graph(x, layout)
            for k, w in graph.blocks():
                if out is not None:
                    write_matrix_csv(out / f"kernel_K_{n_written:03d}.csv", k)
                    write_matrix_csv(out / f"kernel_W_{n_written:03d}.csv", w)
                n_written += 1
        summary["exported"] = n_written

    if out is not None:
        slim = {k: ({kk: vv for kk, vv in v.items() if kk != "mean_K"} if isinstance(v, dict) else v)
                for k, v in summary.items()}
        (out / "kernel_summary.json").write_text(json.dumps(slim, indent=2) + "\n")
    return summary
