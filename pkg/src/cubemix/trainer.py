"""Training loop, learning-rate schedule, ablation and dimension-sweep drivers."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import objectives
from .data import Dataset, Split
from .errors import ConfigError, NonFiniteError, NumericAbort
from .layers import (
    CubeMLPConfig,
    ParamStore,
    Tape,
    activation_footprint,
    forward_batch,
    init_params,
    model_backward,
    param_count,
)
from .objectives import MetricReport
from .tensor3 import Axis

LOSSES = {
    "mae": objectives.mae_loss,
    "ccc": objectives.ccc_loss,
    "mse": objectives.mse_loss,
}
OPTIMIZERS = ("sgd", "momentum", "adam")
EPOCH_COLUMNS = (
    "epoch", "lr", "train_loss",
    "val_mae", "val_corr", "val_ccc", "val_acc2", "val_f1", "val_acc7",
)
ABLATION_UNITS = ("L", "M", "D", "LM", "LD", "MD", "LMD")
ABLATION_COLUMNS = (
    "model", "mlp_l", "mlp_m", "mlp_d", "params",
    "mae", "corr", "acc2", "f1", "acc7", "train_mae",
)
SWEEP_COLUMNS = ("value", "mae", "corr", "acc2", "f1", "acc7")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.004
    lr_decay: float = 0.1
    decay_every: int = 50
    epochs: int = 100
    batch_size: int = 32
    loss: str = "mae"
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {sorted(LOSSES)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr0 * lr_decay ** (epoch // decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // cfg.decay_every
    lr = cfg.lr0
    # repeated multiplication: 0.004*0.1*0.1 == 4e-05 exactly, 0.004*0.1**2 is not
    for _ in range(k):
        lr *= cfg.lr_decay
    return lr


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.params = params

    def step(self, lr: float) -> None:
        for name in self.params:
            p = self.params.param(name)
            p.value -= p.value.dtype.type(lr) * p.grad


class Momentum(SGD):
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        super().__init__(params, cfg)
        self.mu = cfg.momentum
        self.velocity = {n: np.zeros_like(params[n]) for n in params}

    def step(self, lr: float) -> None:
        for name in self.params:
            p = self.params.param(name)
            v = self.velocity[name]
            v *= self.mu
            v += p.grad
            p.value -= p.value.dtype.type(lr) * v


class Adam(SGD):
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        super().__init__(params, cfg)
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in params}
        self.v = {n: np.zeros_like(params[n]) for n in params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in self.params:
            p = self.params.param(name)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype)


def make_optimizer(params: ParamStore, cfg: TrainConfig):
    return {"sgd": SGD, "momentum": Momentum, "adam": Adam}[cfg.optimizer](params, cfg)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def predict(cfg: CubeMLPConfig, params: ParamStore, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [
        forward_batch(x[i : i + batch_size], cfg, params)
        for i in range(0, x.shape[0], batch_size)
    ]
    if not outs:
        return np.zeros(0)
    return np.concatenate(outs).astype(np.float64)


def evaluate_split(cfg: CubeMLPConfig, params: ParamStore, split: Split) -> MetricReport | None:
    if len(split) == 0:
        return None
    return objectives.evaluate(predict(cfg, params, split.x), split.y)


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val: MetricReport | None

    def csv_row(self) -> list[str]:
        vals = [self.lr, self.train_loss]
        if self.val is None:
            vals += [float("nan")] * 6
        else:
            vals += self.val.row()
        return [str(self.epoch)] + [repr(float(v)) for v in vals]


@dataclass
class RunRecord:
    model_config: dict
    train_config: dict
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    init_val: MetricReport | None = None
    final_train: MetricReport | None = None
    final_test: MetricReport | None = None
    best_epoch: int | None = None
    wall_clock: float = 0.0
    # live parameter stores, not serialized
    params: ParamStore | None = field(default=None, repr=False, compare=False)
    final_params: ParamStore | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        rep = lambda r: None if r is None else r.to_dict()  # noqa: E731
        return {
            "model_config": self.model_config,
            "train_config": self.train_config,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "wall_clock": self.wall_clock,
            "init_val": rep(self.init_val),
            "final_train": rep(self.final_train),
            "final_test": rep(self.final_test),
            "epochs": [
                {"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss, "val": rep(e.val)}
                for e in self.epochs
            ],
        }

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for e in self.epochs:
            w.writerow(e.csv_row())
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "epochs.csv").write_text(self.epochs_csv())

    def numeric_equal(self, other: "RunRecord") -> bool:
        a, b = self.to_dict(), other.to_dict()
        a.pop("wall_clock")
        b.pop("wall_clock")
        return a == b


def _better(new: MetricReport, best: MetricReport | None, loss: str) -> bool:
    if best is None:
        return True
    if loss == "ccc":
        return new.ccc > best.ccc
    return new.mae < best.mae


def train(
    model_cfg: CubeMLPConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    dtype=np.float32,
    progress=None,
) -> RunRecord:
    """Mini-batch training with per-epoch validation and best-checkpoint tracking.

    The best parameters (lowest val MAE, or highest val CCC under the CCC loss)
    end up in ``record.params``; the last iterate in ``record.final_params``.
    Without a validation split the last iterate is the best one.
    """
    if dataset.shape != model_cfg.input_shape:
        raise ConfigError(
            f"dataset cube {dataset.shape.as_tuple()} != model input {model_cfg.input_shape.as_tuple()}"
        )
    started = time.perf_counter()
    seed = train_cfg.seed
    params = init_params(model_cfg, seed, dtype=dtype)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1,)))
    optimizer = make_optimizer(params, train_cfg)
    loss_fn = LOSSES[train_cfg.loss]
    train_split, val_split = dataset.train, dataset.splits.get("val")
    if val_split is None:
        val_split = Split([], train_split.x[:0], train_split.y[:0])
    n = len(train_split)
    if n == 0 and train_cfg.epochs > 0:
        raise ConfigError("training split is empty")
    if train_cfg.loss == "ccc" and 0 < n < 2:
        raise ConfigError("CCC loss needs at least two training samples")

    record = RunRecord(model_cfg.to_dict(), train_cfg.to_dict(), seed)
    record.init_val = evaluate_split(model_cfg, params, val_split)
    best_report = None
    best_params = params.copy()
    n_batches = max(1, -(-n // train_cfg.batch_size))

    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, idx in enumerate(np.array_split(order, n_batches)):
            xb = train_split.x[idx]
            yb = train_split.y[idx]
            params.zero_grad()
            tape = Tape()
            try:
                y_hat = forward_batch(xb, model_cfg, params, tape)
                loss, grad = loss_fn(y_hat, yb)
            except (NonFiniteError, objectives.MetricError) as exc:
                raise NumericAbort(f"epoch {epoch} batch {b}: {exc}", epoch=epoch, batch=b) from exc
            if not np.isfinite(loss):
                raise NumericAbort(f"epoch {epoch} batch {b}: non-finite loss", epoch=epoch, batch=b)
            model_backward(grad, tape, params)
            optimizer.step(lr)
            total += loss * len(idx)
        try:
            val = evaluate_split(model_cfg, params, val_split)
        except NonFiniteError as exc:
            raise NumericAbort(f"epoch {epoch} validation: {exc}", epoch=epoch) from exc
        record.epochs.append(EpochRecord(epoch, lr, total / n, val))
        if val is None or _better(val, best_report, train_cfg.loss):
            best_report = val
            best_params = params.copy()
            record.best_epoch = epoch
        if progress is not None:
            progress(record.epochs[-1])

    record.params = best_params
    record.final_params = params
    record.final_train = evaluate_split(model_cfg, params, train_split)
    test_split = dataset.splits.get("test")
    if test_split is not None:
        record.final_test = evaluate_split(model_cfg, best_params, test_split)
    record.wall_clock = time.perf_counter() - started
    return record


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _run_all(jobs: list, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn() for fn in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn) for fn in jobs]
        return [f.result() for f in futures]


def _report_for(record: RunRecord) -> MetricReport:
    return record.final_test or record.final_train


@dataclass
class AblationRow:
    model: int
    units: str
    params: int
    record: RunRecord

    def csv_row(self) -> list[str]:
        rep = _report_for(self.record)
        flags = ["1" if u in self.units else "0" for u in "LMD"]
        metrics = [rep.mae, rep.pearson_r, rep.acc2, rep.f1, rep.acc7, self.record.final_train.mae]
        return [f"Model {self.model}", *flags, str(self.params)] + [repr(float(v)) for v in metrics]


def ablate(
    base_cfg: CubeMLPConfig,
    dataset: Dataset,
    train_cfg: TrainConfig,
    jobs: int = 1,
) -> list[AblationRow]:
    """Train the seven non-empty unit subsets from identical seeds."""
    if base_cfg.units != "LMD":
        raise ConfigError("ablation needs a base config with all three units enabled")
    cfgs = [base_cfg.with_units(u) for u in ABLATION_UNITS]
    records = _run_all([lambda c=c: train(c, train_cfg, dataset) for c in cfgs], jobs)
    return [
        AblationRow(i + 1, c.units, param_count(c), r)
        for i, (c, r) in enumerate(zip(cfgs, records))
    ]


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for row in rows:
        w.writerow(row.csv_row())
    return buf.getvalue()


def ablation_table(rows: list[AblationRow]) -> str:
    """Plain-text table laid out like the published ablation (checkmarks per unit)."""
    head = f"{'':<8} {'MLP-L':^5} {'MLP-M':^5} {'MLP-D':^5} | {'MAE':>7} {'Corr':>7} {'Acc-2':>6} {'F1':>6} {'Acc-7':>6}"
    lines = [head, "-" * len(head)]
    for row in rows:
        rep = _report_for(row.record)
        marks = ["x" if u in row.units else "" for u in "LMD"]
        lines.append(
            f"Model {row.model:<2} {marks[0]:^5} {marks[1]:^5} {marks[2]:^5} | "
            f"{rep.mae:7.3f} {rep.pearson_r:7.3f} {100 * rep.acc2:6.1f} {100 * rep.f1:6.1f} {100 * rep.acc7:6.1f}"
        )
    return "\n".join(lines)


@dataclass
class SweepPoint:
    value: int
    record: RunRecord

    def csv_row(self) -> list[str]:
        rep = _report_for(self.record)
        return [str(self.value)] + [
            repr(float(v)) for v in (rep.mae, rep.pearson_r, rep.acc2, rep.f1, rep.acc7)
        ]


def dim_sweep(
    base_cfg: CubeMLPConfig,
    dataset: Dataset,
    train_cfg: TrainConfig,
    axis,
    values,
    jobs: int = 1,
) -> list[SweepPoint]:
    """One training per value of the final block's output extent on ``axis``."""
    axis = Axis.parse(axis)
    values = [int(v) for v in values]
    if any(v < 1 for v in values):
        raise ConfigError("sweep values must be >= 1")
    cfgs = [base_cfg.with_final_dim(axis, v) for v in values]
    records = _run_all([lambda c=c: train(c, train_cfg, dataset) for c in cfgs], jobs)
    return [SweepPoint(v, r) for v, r in zip(values, records)]


def sweep_csv(points: list[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for p in points:
        w.writerow(p.csv_row())
    return buf.getvalue()


def account(cfg: CubeMLPConfig, batch: int = 1) -> dict:
    params = param_count(cfg)
    acts = activation_footprint(cfg, batch)
    return {"params": params, "activation_elements": acts, "peak_bytes_f32": 4 * (params + acts)}
