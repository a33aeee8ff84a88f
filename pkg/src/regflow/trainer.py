"""NLL training with Adam, plus held-out evaluation and report rows."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .data import Dataset, GroundTruth, ToyConfig
from .flow import FlowBlowupError
from .metrics import avg_nll, demd, emd_exact

REFERENCE_LEARNING_RATE = 2e-5
METRICS = ("nll", "emd", "demd")
REPORT_COLUMNS = ("metric", "model", "dataset", "value", "stddev", "n", "seed")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: int | None, message: str = ""):
        where = f" at batch pair {index}" if index is not None else ""
        super().__init__(f"non-finite loss{where}{': ' + message if message else ''}")
        self.index = index


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, log: "TrainLog", checkpoint: Path | None):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.log = log
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_steps: int = 5000
    eval_every: int = 500
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive when set")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def clip_by_global_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grads
    norm = float(np.linalg.norm(grads))
    return grads * (max_norm / norm) if norm > max_norm else grads


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ValueError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    g = clip_by_global_norm(grads, config.grad_clip_norm)
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return new, AdamState(m, v, t)


def nll_loss(model, x, y, psi: Tensor | None = None) -> Tensor:
    """Mean negative conditional log-likelihood of a batch, on the active tape."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("nll_loss needs a non-empty batch")
    try:
        lp = model.log_prob(x, y, psi)
    except FlowBlowupError as exc:
        raise NonFiniteLossError(None, str(exc)) from exc
    bad = np.flatnonzero(~np.isfinite(lp.data))
    if bad.size:
        raise NonFiniteLossError(int(bad[0]))
    return ad.scale(ad.sum_(lp), -1.0 / lp.shape[0])


@dataclass
class StepRecord:
    step: int
    nll: float
    grad_norm: float
    wall_time: float


@dataclass
class EvalRecord:
    step: int
    test_nll: float
    emd: float | None = None
    demd: float | None = None


@dataclass
class TrainLog:
    learning_rate: float
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def nll_curve(self) -> np.ndarray:
        return np.array([r.nll for r in self.steps])

    def write(self, path) -> None:
        """Step CSV (deterministic columns) plus ``timing.csv`` beside it for wall times."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "nll", "grad_norm", "learning_rate"])
            for r in self.steps:
                w.writerow([r.step, repr(r.nll), repr(r.grad_norm), repr(self.learning_rate)])
        with path.with_name("timing.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "wall_time"])
            for r in self.steps:
                w.writerow([r.step, f"{r.wall_time:.6f}"])
        if self.evals:
            with path.with_name(path.stem + "_eval.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", "test_nll", "emd", "demd"])
                for r in self.evals:
                    w.writerow([r.step, repr(r.test_nll), "" if r.emd is None else repr(r.emd),
                                "" if r.demd is None else repr(r.demd)])


def smoothed(values, window: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


def checkpoint_name(model) -> str:
    return "model.rgfl" if model.kind == "regflow" else "model.rgmd"


def train(model, dataset: Dataset, config: TrainConfig, out_dir=None, test: Dataset | None = None):
    """Minimize the batch NLL with Adam for ``config.max_steps`` steps.

    Minibatches are drawn with replacement from a stream seeded by
    ``config.seed``. When ``out_dir`` is given, a checkpoint is written every
    ``eval_every`` steps and at the end. On a non-finite loss the parameters
    from before the failing step are restored and saved, then
    :class:`TrainingAborted` is raised.
    """
    if dataset.split != "train":
        raise ValueError(f"train() needs a train split, got {dataset.split!r}")
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / checkpoint_name(model) if out_dir is not None else None
    log = TrainLog(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(model.psi.data)
    start = time.perf_counter()
    n = len(dataset)

    for step in range(1, config.max_steps + 1):
        idx = rng.integers(0, n, config.batch_size)
        try:
            with ad.Tape() as tape:
                loss = nll_loss(model, dataset.x[idx], dataset.y[idx])
            grads = ad.backward(tape, loss, wrt=[model.psi])[model.psi]
            if not np.all(np.isfinite(grads)):
                raise NonFiniteLossError(None, "non-finite gradient")
        except NonFiniteLossError as exc:
            if ckpt is not None:
                save_checkpoint(model, ckpt, extra={"aborted_at_step": step})
            raise TrainingAborted(step, str(exc), log, ckpt) from exc
        grad_norm = float(np.linalg.norm(grads))
        new_psi, state = adam_step(model.psi.data, grads, state, config)
        model.psi.data[...] = new_psi
        log.steps.append(StepRecord(step, loss.item(), grad_norm, time.perf_counter() - start))

        if config.eval_every and step % config.eval_every == 0:
            if test is not None:
                log.evals.append(EvalRecord(step, heldout_nll(model, test)))
            if ckpt is not None:
                save_checkpoint(model, ckpt)

    if ckpt is not None:
        save_checkpoint(model, ckpt)
    return model, log


def heldout_nll(model, dataset: Dataset, chunk: int = 512) -> float:
    return avg_nll(pair_log_probs(model, dataset, chunk))


def pair_log_probs(model, dataset: Dataset, chunk: int = 512) -> np.ndarray:
    out = []
    with ad.no_tape():
        for i in range(0, len(dataset), chunk):
            out.append(model.log_prob(dataset.x[i:i + chunk], dataset.y[i:i + chunk]).data)
    return np.concatenate(out) if out else np.zeros(0)


# --- evaluation -------------------------------------------------------------


@dataclass
class ReportRow:
    metric: str
    model: str
    dataset: str
    value: float
    stddev: float
    n: int
    seed: int


def default_probes(dataset: Dataset, count: int = 20) -> np.ndarray:
    cfg = dataset.config
    if isinstance(cfg, ToyConfig):
        lo, hi = cfg.x_range
        # open interval keeps probes off the branch boundaries
        return np.linspace(lo, hi, count + 2)[1:-1, None]
    return dataset.x[:count]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("REGFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _fan_out(fn, items):
    items = list(items)
    workers = min(_threads(), len(items)) or 1
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))  # map keeps input order


def probe_emd(model, truth, probes, n: int = 256, seed: int = 0) -> np.ndarray:
    """Per-probe EMD between model samples and ground-truth samples."""
    return np.array(_fan_out(lambda x: emd_exact(model.sample(x, n, seed), truth.sample(x, n, seed)), probes))


def probe_demd(model, probes, n: int = 256, seeds=range(10)) -> np.ndarray:
    """DEMD per (seed, probe); rows are seeds. Model samples use the seed too."""
    def one(x):
        return [demd(model.sample(x, n, s), seed=s) for s in seeds]

    return np.array(_fan_out(one, probes)).T


def evaluate(model, dataset: Dataset, metrics_requested=("nll",), truth=None, probes=None,
             n_samples: int = 256, seed: int = 0, demd_seeds: int = 10, model_name: str | None = None):
    """Report rows for the requested metrics on a held-out split."""
    unknown = [m for m in metrics_requested if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metric(s) {unknown}; valid: {', '.join(METRICS)}")
    if dataset.split != "test":
        raise ValueError(f"evaluate() needs a test split, got {dataset.split!r}")
    name = model_name or model.kind
    ds_name = f"{dataset.generator_id}/{dataset.split}"
    if probes is None:
        probes = default_probes(dataset)
    rows = []
    for metric in metrics_requested:
        if metric == "nll":
            lp = model.log_prob(dataset.x, dataset.y) if model.kind == "truth" else pair_log_probs(model, dataset)
            lp = np.asarray(getattr(lp, "data", lp))
            rows.append(ReportRow("nll", name, ds_name, avg_nll(lp), float(np.std(-lp)), len(lp), dataset.seed))
        elif metric == "emd":
            truth = truth or GroundTruth(dataset.config)
            vals = probe_emd(model, truth, probes, n_samples, seed)
            rows.append(ReportRow("emd", name, ds_name, float(vals.mean()), float(vals.std()), n_samples, seed))
        else:
            per_seed = probe_demd(model, probes, n_samples, range(seed, seed + demd_seeds)).mean(axis=1)
            rows.append(ReportRow("demd", name, ds_name, float(per_seed.mean()), float(per_seed.std()),
                                  n_samples, seed))
    return rows


def write_report(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([d[c] if c not in ("value", "stddev") else repr(float(d[c])) for c in REPORT_COLUMNS])
