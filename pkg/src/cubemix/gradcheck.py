"""Finite-difference verification of the reverse pass over random small models."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .layers import Activation, CubeMLPConfig, ParamStore, Tape, forward_batch, init_params, model_backward
from .trainer import LOSSES

THRESHOLD = 1e-4
STEP = 1e-5
# Gradient norms below this are under the resolution of a 1e-5 central difference
# (roundoff ~ 2e-16 * |loss| / h per entry), so errors are measured against it.
NORM_FLOOR = 1e-5
# Test points whose layer-norm fibers have variance below this multiple of eps are
# redrawn: there the normalization is near-singular and the O(h^2) truncation term of
# the finite difference, not the reverse pass, dominates the comparison.
CONDITION_FACTOR = 10.0
MAX_REDRAWS = 50
LAYER_TYPES = ("unit_affine", "residual_adapter", "layer_norm", "head", "input")


def layer_type(name: str) -> str:
    leaf = name.rsplit(".", 1)[1]
    if name.startswith("head."):
        return "head"
    if leaf in ("wr", "br"):
        return "residual_adapter"
    if leaf.startswith("ln_"):
        return "layer_norm"
    return "unit_affine"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, NORM_FLOOR)."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(diff / scale)


def random_config(rng: np.random.Generator) -> CubeMLPConfig:
    shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
    n_blocks = int(rng.integers(1, 3))
    outs = rng.integers(1, 6, size=(3, n_blocks))
    units = "".join(u for u in "LMD" if rng.random() < 0.85) or "LMD"
    return CubeMLPConfig(
        input_shape=shape,
        l_out=tuple(outs[0]),
        m_out=tuple(outs[1]),
        d_out=tuple(outs[2]),
        units=units,
        # smooth activations only: a ReLU kink inside the FD step is not a gradient bug
        activation=str(rng.choice([Activation.GELU.value, Activation.TANH.value])),
        head_hidden=int(rng.choice([0, 0, 3])),
    )


def _jitter(params: ParamStore, rng: np.random.Generator) -> None:
    # move biases and LN gains off their init constants so every path carries signal
    for name in params:
        params.set(name, params[name] + 0.1 * rng.normal(size=params[name].shape))


def check_model(
    cfg: CubeMLPConfig,
    params: ParamStore,
    x: np.ndarray,
    y: np.ndarray,
    loss: str,
    h: float = STEP,
    perturb=None,
) -> dict[str, float]:
    """Max relative error per layer type for one model/batch/loss."""
    loss_fn = LOSSES[loss]

    def objective():
        return loss_fn(forward_batch(x, cfg, params), y)[0]

    params.zero_grad()
    tape = Tape()
    y_hat = forward_batch(x, cfg, params, tape)
    _, grad = loss_fn(y_hat, y)
    dx = model_backward(grad, tape, params)
    analytic = {n: params.grad(n).copy() for n in params}
    analytic_x = np.array(dx)
    if perturb is not None:
        perturb(analytic, analytic_x)

    errors: dict[str, float] = {}
    for name in params:
        value = params[name]
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            up = objective()
            value[idx] = orig - h
            down = objective()
            value[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        kind = layer_type(name)
        errors[kind] = max(errors.get(kind, 0.0), relative_error(analytic[name], numeric))

    numeric_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = objective()
        x[idx] = orig - h
        down = objective()
        x[idx] = orig
        numeric_x[idx] = (up - down) / (2 * h)
    errors["input"] = relative_error(analytic_x, numeric_x)
    return errors


def well_conditioned(cfg: CubeMLPConfig, params: ParamStore, x: np.ndarray) -> bool:
    tape = Tape()
    forward_batch(x, cfg, params, tape)
    return tape.ln_var_min >= CONDITION_FACTOR * cfg.eps


@dataclass
class GradcheckReport:
    trials: int
    max_error: dict[str, float] = field(default_factory=dict)
    worst_trial: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0
    threshold: float = THRESHOLD
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return all(v < self.threshold for v in self.max_error.values())

    def lines(self) -> list[str]:
        out = []
        for kind in LAYER_TYPES:
            if kind in self.max_error:
                err = self.max_error[kind]
                status = "ok" if err < self.threshold else "FAIL"
                out.append(f"{kind:<18} max_rel_err={err:.3e} {status}")
        out.append(
            f"trials={self.trials} redraws={self.redraws} seconds={self.seconds:.1f} passed={self.passed}"
        )
        return out


def run_gradcheck(seed: int = 0, trials: int = 50, batch: int = 3, perturb=None) -> GradcheckReport:
    """Check random configs (extents <= 5, <= 2 blocks), cycling through mae/ccc/mse losses."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(trials)
    started = time.perf_counter()
    losses = list(LOSSES)
    for t in range(trials):
        for _ in range(MAX_REDRAWS):
            cfg = random_config(rng)
            params = init_params(cfg, int(rng.integers(2**31)), dtype=np.float64)
            _jitter(params, rng)
            x = rng.normal(size=(batch, *cfg.input_shape.as_tuple()))
            y = rng.normal(size=batch)
            if well_conditioned(cfg, params, x):
                break
            report.redraws += 1
        errors = check_model(cfg, params, x, y, losses[t % len(losses)], perturb=perturb)
        for kind, err in errors.items():
            if err >= report.max_error.get(kind, -1.0):
                report.max_error[kind] = err
                report.worst_trial[kind] = t
    report.seconds = time.perf_counter() - started
    return report
