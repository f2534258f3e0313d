"""CubeMLP layers with explicit forward and reverse passes.

A block mixes its input cube along the sequence, modality and channel axes in
that order. Each mixing unit computes, fiber by fiber along its axis::

    y = LN(W2^T act(W1^T x + b1) + b2 + R(x))

where ``W1`` is in->in, ``W2`` is in->out and ``R`` is the identity when the
extent is unchanged, otherwise a learnable in->out affine adapter. ``LN``
normalizes along the same axis with a learnable gain and bias.

All functions work on batches shaped (B, L, M, D). ``model_forward`` also
accepts a single :class:`Tensor3`.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NonFiniteError, ShapeError, TapeError
from .tensor3 import Axis, Shape3, Tensor3, check_finite

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Activation(str, enum.Enum):
    GELU = "gelu"
    RELU = "relu"
    TANH = "tanh"

    def forward(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.GELU:
            return 0.5 * z * (1.0 + erf(z / _SQRT2))
        if self is Activation.RELU:
            return np.maximum(z, 0)
        return np.tanh(z)

    def derivative(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.GELU:
            cdf = 0.5 * (1.0 + erf(z / _SQRT2))
            return cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        if self is Activation.RELU:
            return (z > 0).astype(z.dtype)
        t = np.tanh(z)
        return 1.0 - t * t


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLPUnitConfig:
    axis: Axis
    in_dim: int
    out_dim: int
    enabled: bool = True
    activation: Activation = Activation.GELU

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"unit dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if not self.enabled and self.in_dim != self.out_dim:
            raise ConfigError("a disabled unit is the identity and cannot change its extent")

    @property
    def has_adapter(self) -> bool:
        return self.enabled and self.in_dim != self.out_dim


@dataclass(frozen=True)
class BlockConfig:
    units: tuple[MLPUnitConfig, MLPUnitConfig, MLPUnitConfig]
    in_shape: Shape3
    out_shape: Shape3


@dataclass(frozen=True)
class CubeMLPConfig:
    """Model structure.

    ``l_out``, ``m_out`` and ``d_out`` list the requested output extent of each
    block per axis; ``units`` names the enabled mixing units (any subset of
    "LMD"). A disabled unit keeps its input extent, so the requested value for
    its axis is ignored. The effective per-block shapes live in ``blocks``.
    """

    input_shape: Shape3
    l_out: tuple[int, ...]
    m_out: tuple[int, ...]
    d_out: tuple[int, ...]
    units: str = "LMD"
    activation: Activation = Activation.GELU
    head_hidden: int = 0
    eps: float = LN_EPS
    blocks: tuple[BlockConfig, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", Shape3.of(self.input_shape))
        for name in ("l_out", "m_out", "d_out"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "activation", Activation(self.activation))
        units = "".join(sorted(set(self.units.upper()), key="LMD".index)) if self.units else ""
        if any(u not in "LMD" for u in units):
            raise ConfigError(f"units must be a subset of 'LMD', got {self.units!r}")
        object.__setattr__(self, "units", units)
        n = len(self.l_out)
        if n < 1:
            raise ConfigError("at least one block is required")
        if len(self.m_out) != n or len(self.d_out) != n:
            raise ConfigError("l_out, m_out and d_out must have one entry per block")
        if self.head_hidden < 0:
            raise ConfigError("head_hidden must be >= 0")
        if not self.eps > 0:
            raise ConfigError("layer-norm eps must be positive")

        blocks = []
        shape = self.input_shape
        for i in range(n):
            in_shape = shape
            units_cfg = []
            for axis, requested in zip(Axis, (self.l_out[i], self.m_out[i], self.d_out[i])):
                if requested < 1:
                    raise ConfigError(f"block {i}: {axis.letter}' must be >= 1, got {requested}")
                enabled = axis.letter in units
                out_dim = requested if enabled else shape[axis]
                units_cfg.append(
                    MLPUnitConfig(axis, shape[axis], out_dim, enabled, self.activation)
                )
                shape = shape.replace(axis, out_dim)
            blocks.append(BlockConfig(tuple(units_cfg), in_shape, shape))
        object.__setattr__(self, "blocks", tuple(blocks))

    @property
    def n_blocks(self) -> int:
        return len(self.l_out)

    @property
    def output_shape(self) -> Shape3:
        return self.blocks[-1].out_shape

    @property
    def flat_dim(self) -> int:
        return self.output_shape.size()

    def with_units(self, units: str) -> "CubeMLPConfig":
        return replace(self, units=units)

    def with_final_dim(self, axis, value: int) -> "CubeMLPConfig":
        axis = Axis.parse(axis)
        name = ("l_out", "m_out", "d_out")[axis]
        dims = list(getattr(self, name))
        dims[-1] = int(value)
        return replace(self, **{name: tuple(dims)})

    def with_input_shape(self, shape) -> "CubeMLPConfig":
        return replace(self, input_shape=Shape3.of(shape))

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape.as_tuple()),
            "l_out": list(self.l_out),
            "m_out": list(self.m_out),
            "d_out": list(self.d_out),
            "units": self.units,
            "activation": self.activation.value,
            "head_hidden": self.head_hidden,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CubeMLPConfig":
        known = {"input_shape", "l_out", "m_out", "d_out", "units", "activation", "head_hidden", "eps"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"input_shape", "l_out", "m_out", "d_out"} - set(d)
        if missing:
            raise ConfigError(f"missing model config keys: {sorted(missing)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def reference_config(**overrides) -> CubeMLPConfig:
    """Three blocks on a 100x3x128 cube, ending at 10x3x3."""
    kw = dict(
        input_shape=(100, 3, 128),
        l_out=(100, 10, 10),
        m_out=(3, 3, 3),
        d_out=(128, 32, 3),
    )
    kw.update(overrides)
    return CubeMLPConfig(**kw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray


class ParamStore:
    """Ordered name -> (value, grad) mapping."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Param]" = OrderedDict()

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self._params[name] = Param(value, np.zeros_like(value))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return ((k, p.value) for k, p in self._params.items())

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def param(self, name: str) -> Param:
        return self._params[name]

    def set(self, name: str, value) -> None:
        p = self._params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != p.value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {p.value.shape}")
        p.value[...] = value

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0)

    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(self.dtype if dtype is None else dtype)
        for name, p in self._params.items():
            out.add(name, p.value)
        return out

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n], other[n]) for n in self.names()
        )


def unit_prefix(block: int, axis: Axis) -> str:
    return f"block{block}.unit{axis.letter}"


def param_shapes(cfg: CubeMLPConfig) -> "OrderedDict[str, tuple[int, ...]]":
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    for i, block in enumerate(cfg.blocks):
        for unit in block.units:
            if not unit.enabled:
                continue
            p = unit_prefix(i, unit.axis)
            shapes[f"{p}.w1"] = (unit.in_dim, unit.in_dim)
            shapes[f"{p}.b1"] = (unit.in_dim,)
            shapes[f"{p}.w2"] = (unit.in_dim, unit.out_dim)
            shapes[f"{p}.b2"] = (unit.out_dim,)
            if unit.has_adapter:
                shapes[f"{p}.wr"] = (unit.in_dim, unit.out_dim)
                shapes[f"{p}.br"] = (unit.out_dim,)
            shapes[f"{p}.ln_gain"] = (unit.out_dim,)
            shapes[f"{p}.ln_bias"] = (unit.out_dim,)
    f = cfg.flat_dim
    if cfg.head_hidden == 0:
        shapes["head.w"] = (f, 1)
        shapes["head.b"] = (1,)
    else:
        h = cfg.head_hidden
        shapes["head.w1"] = (f, h)
        shapes["head.b1"] = (h,)
        shapes["head.w2"] = (h, 1)
        shapes["head.b2"] = (1,)
    return shapes


def init_params(cfg: CubeMLPConfig, seed: int, dtype=np.float64) -> ParamStore:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); biases 0; LN gain 1."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0,)))
    store = ParamStore(dtype)
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("w"):
            bound = np.sqrt(1.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif leaf == "ln_gain":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(name, value)
    return store


def param_count(cfg: CubeMLPConfig) -> int:
    total = 0
    for block in cfg.blocks:
        for u in block.units:
            if not u.enabled:
                continue
            total += u.in_dim * u.in_dim + u.in_dim + u.in_dim * u.out_dim + u.out_dim
            if u.has_adapter:
                total += u.in_dim * u.out_dim + u.out_dim
            total += 2 * u.out_dim
    f = cfg.flat_dim
    if cfg.head_hidden == 0:
        total += f + 1
    else:
        total += f * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden + 1
    return total


def activation_footprint(cfg: CubeMLPConfig, batch: int = 1) -> int:
    """Element count of the largest activation buffer a forward pass holds.

    Units stream their fibers, so per-fiber scratch is O(max(L, M, D)) and the
    peak is set by the biggest cube materialized: a unit's input, its hidden
    tensor (same extents as the input) or its output. Counted for ``batch``
    samples.
    """
    peak = cfg.input_shape.size()
    for block in cfg.blocks:
        shape = block.in_shape
        for u in block.units:
            out = shape.replace(u.axis, u.out_dim)
            peak = max(peak, shape.size(), out.size())
            shape = out
    if cfg.head_hidden:
        peak = max(peak, cfg.head_hidden)
    return int(batch) * peak


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tape:
    """Records backward closures during a forward pass and replays them in reverse."""

    def __init__(self):
        self._nodes: list[tuple[str, Callable[[np.ndarray], np.ndarray]]] = []
        self.consumed = False
        self.single = False
        self.trace: list[str] = []
        # smallest variance of any layer-norm fiber longer than 1 (conditioning probe)
        self.ln_var_min = float("inf")

    def record(self, name: str, backward: Callable[[np.ndarray], np.ndarray]) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self._nodes.append((name, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self._nodes]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if not self._nodes:
            raise TapeError("backward called before any forward pass was recorded")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        self.consumed = True
        for name, fn in reversed(self._nodes):
            self.trace.append(name)
            grad = fn(grad)
        return grad


# ---------------------------------------------------------------------------
# layer normalization
# ---------------------------------------------------------------------------


def _ln_last(s: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = s.mean(axis=-1, keepdims=True)
    xc = s - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _ln_last_backward(dy: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    dxhat = dy * gain
    ds = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return ds


def layer_norm_axis(x: Tensor3, axis, gain, bias, eps: float = LN_EPS) -> Tensor3:
    """Normalize every fiber along ``axis`` (population variance), then scale and shift."""
    axis = Axis.parse(axis)
    gain = np.asarray(gain, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"gain/bias must have length {n}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    moved = np.moveaxis(x.array, int(axis), -1)
    y, _, _ = _ln_last(moved, gain, bias, eps)
    out = np.moveaxis(y, -1, int(axis))
    check_finite(out, "layer_norm_axis")
    return Tensor3(out, dtype=x.dtype)


def layer_norm_axis_backward(x: Tensor3, axis, gain, dy, eps: float = LN_EPS):
    """Gradients (dx, dgain, dbias) of layer_norm_axis for upstream ``dy``."""
    axis = Axis.parse(axis)
    gain = np.asarray(gain, dtype=x.dtype)
    moved = np.moveaxis(x.array, int(axis), -1)
    dy = np.moveaxis(np.asarray(dy, dtype=x.dtype), int(axis), -1)
    _, xhat, inv = _ln_last(moved, gain, np.zeros_like(gain), eps)
    ds = _ln_last_backward(dy, xhat, inv, gain)
    n = gain.shape[0]
    dgain = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbias = dy.reshape(-1, n).sum(axis=0)
    return np.moveaxis(ds, -1, int(axis)), dgain, dbias


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _accumulate(params: ParamStore, name: str, g: np.ndarray) -> None:
    params.grad(name)[...] += g


def _fiber_matmul_grad(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum over all fibers of outer(a_fiber, g_fiber): the shared weight gradient."""
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def mlp_unit_forward(
    x: np.ndarray,
    unit: MLPUnitConfig,
    params: ParamStore,
    prefix: str,
    eps: float = LN_EPS,
    tape: Tape | None = None,
) -> np.ndarray:
    """One mixing unit on a (B, L, M, D) batch."""
    ax = int(unit.axis) + 1
    if x.shape[ax] != unit.in_dim:
        raise ShapeError(
            f"{prefix}: extent {x.shape[ax]} along {unit.axis.name} != in_dim {unit.in_dim}"
        )
    if not unit.enabled:
        if tape is not None:
            tape.record(f"{prefix}(identity)", lambda g: g)
        return x

    act = unit.activation
    w1, b1 = params[f"{prefix}.w1"], params[f"{prefix}.b1"]
    w2, b2 = params[f"{prefix}.w2"], params[f"{prefix}.b2"]
    gain, beta = params[f"{prefix}.ln_gain"], params[f"{prefix}.ln_bias"]
    xt = np.moveaxis(x, ax, -1)
    z1 = xt @ w1 + b1
    h = act.forward(z1)
    s = h @ w2 + b2
    if unit.has_adapter:
        wr, br = params[f"{prefix}.wr"], params[f"{prefix}.br"]
        s = s + (xt @ wr + br)
    else:
        s = s + xt
    y, xhat, inv = _ln_last(s, gain, beta, eps)
    out = np.ascontiguousarray(np.moveaxis(y, -1, ax))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from {prefix}")

    if tape is not None:
        if unit.out_dim > 1:
            var_min = float((1.0 / (inv * inv)).min()) - eps
            tape.ln_var_min = min(tape.ln_var_min, var_min)

        def backward(dout):
            dy = np.moveaxis(dout, ax, -1)
            n = unit.out_dim
            _accumulate(params, f"{prefix}.ln_gain", (dy * xhat).reshape(-1, n).sum(axis=0))
            _accumulate(params, f"{prefix}.ln_bias", dy.reshape(-1, n).sum(axis=0))
            ds = _ln_last_backward(dy, xhat, inv, gain)
            _accumulate(params, f"{prefix}.w2", _fiber_matmul_grad(h, ds))
            _accumulate(params, f"{prefix}.b2", ds.reshape(-1, n).sum(axis=0))
            dz1 = (ds @ w2.T) * act.derivative(z1)
            _accumulate(params, f"{prefix}.w1", _fiber_matmul_grad(xt, dz1))
            _accumulate(params, f"{prefix}.b1", dz1.reshape(-1, unit.in_dim).sum(axis=0))
            dxt = dz1 @ w1.T
            if unit.has_adapter:
                _accumulate(params, f"{prefix}.wr", _fiber_matmul_grad(xt, ds))
                _accumulate(params, f"{prefix}.br", ds.reshape(-1, n).sum(axis=0))
                dxt = dxt + ds @ wr.T
            else:
                dxt = dxt + ds
            return np.moveaxis(dxt, -1, ax)

        tape.record(prefix, backward)
    return out


def cube_block_forward(
    x: np.ndarray,
    block: BlockConfig,
    params: ParamStore,
    index: int,
    eps: float = LN_EPS,
    tape: Tape | None = None,
) -> np.ndarray:
    if x.shape[1:] != block.in_shape.as_tuple():
        raise ShapeError(f"block{index}: input {x.shape[1:]} != {block.in_shape.as_tuple()}")
    for unit in block.units:
        x = mlp_unit_forward(x, unit, params, unit_prefix(index, unit.axis), eps, tape)
    return x


def _head_forward(flat: np.ndarray, cfg: CubeMLPConfig, params: ParamStore, tape):
    if cfg.head_hidden == 0:
        w, b = params["head.w"], params["head.b"]
        y = (flat @ w + b)[:, 0]
        if tape is not None:
            def backward(dy):
                dy = dy[:, None]
                _accumulate(params, "head.w", flat.T @ dy)
                _accumulate(params, "head.b", dy.sum(axis=0))
                return dy @ w.T

            tape.record("head", backward)
        return y

    act = cfg.activation
    w1, b1 = params["head.w1"], params["head.b1"]
    w2, b2 = params["head.w2"], params["head.b2"]
    z = flat @ w1 + b1
    a = act.forward(z)
    y = (a @ w2 + b2)[:, 0]
    if tape is not None:
        def backward(dy):
            dy = dy[:, None]
            _accumulate(params, "head.w2", a.T @ dy)
            _accumulate(params, "head.b2", dy.sum(axis=0))
            dz = (dy @ w2.T) * act.derivative(z)
            _accumulate(params, "head.w1", flat.T @ dz)
            _accumulate(params, "head.b1", dz.sum(axis=0))
            return dz @ w1.T

        tape.record("head", backward)
    return y


def forward_batch(
    x: np.ndarray,
    cfg: CubeMLPConfig,
    params: ParamStore,
    tape: Tape | None = None,
    collect: list | None = None,
) -> np.ndarray:
    """Predictions for a (B, L, M, D) batch. ``collect`` receives each block's output."""
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape.as_tuple():
        raise ShapeError(
            f"expected batch of shape (B, {', '.join(map(str, cfg.input_shape.as_tuple()))}), "
            f"got {x.shape}"
        )
    for i, block in enumerate(cfg.blocks):
        x = cube_block_forward(x, block, params, i, cfg.eps, tape)
        if collect is not None:
            collect.append(x)
    batch = x.shape[0]
    shape = x.shape
    flat = x.reshape(batch, -1)
    if tape is not None:
        tape.record("flatten", lambda g: g.reshape(shape))
    y = _head_forward(flat, cfg, params, tape)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("non-finite prediction")
    return y


def model_forward(x, cfg: CubeMLPConfig, params: ParamStore, tape: Tape | None = None):
    """Scalar prediction for one :class:`Tensor3`, or a vector for a 4-D batch."""
    if isinstance(x, Tensor3):
        if tape is not None:
            tape.single = True
        return float(forward_batch(x.array[None], cfg, params, tape)[0])
    return forward_batch(x, cfg, params, tape)


def model_backward(loss_grad, tape: Tape, params: ParamStore):
    """Fill ``params`` grads from dLoss/dy_hat and return dLoss/dx.

    Gradients accumulate; call ``params.zero_grad()`` between steps.
    """
    g = np.atleast_1d(np.asarray(loss_grad, dtype=params.dtype))
    dx = tape.backward(g)
    if tape.single:
        return Tensor3(dx[0], dtype=params.dtype)
    return dx
