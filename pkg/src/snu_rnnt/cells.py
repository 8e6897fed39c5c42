"""Recurrent units: sSNU, sSNU-a, sSNU-o and the LSTM baseline.

Every cell is a single-step transition with explicit state.  Parameters are
passed in as a mapping of local name -> :class:`~snu_rnnt.numerics.Value`,
so the same cell object can be evaluated with trainable leaves, perturbed
copies (gradient checks) or frozen arrays (decoding).

Input projections ``W x`` are split out of the transition so that a layer
can project a whole sequence with one matrix product and then run only the
recurrent part step by step.  The arithmetic is the same either way.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Value

VARIANTS = ("LSTM", "sSNU", "sSNU-a", "sSNU-o")

# Table of the unit rows: name -> (variant, recurrent, axo-somatic recurrent)
UNIT_TYPES = {
    "LSTM": ("LSTM", True, False),
    "sSNU": ("sSNU", False, False),
    "sSNU R": ("sSNU", True, False),
    "sSNU-a": ("sSNU-a", False, False),
    "sSNU-a R": ("sSNU-a", True, False),
    "sSNU-a Ra": ("sSNU-a", True, True),
    "sSNU-o": ("sSNU-o", False, False),
    "sSNU-o R": ("sSNU-o", True, False),
}
SNU_TYPES = tuple(k for k in UNIT_TYPES if k != "LSTM")


@dataclass(frozen=True)
class CellConfig:
    """Static description of one recurrent layer (one direction)."""

    variant: str
    input_size: int
    units: int
    recurrent: bool = False
    axo_somatic_recurrent: bool = False
    d: float = 0.9
    rho: float = 0.9
    beta: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.input_size < 1 or self.units < 1:
            raise ValueError("input_size and units must be >= 1")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"membrane decay d={self.d} outside [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"threshold decay rho={self.rho} outside [0, 1]")
        if self.variant == "LSTM" and not self.recurrent:
            raise ValueError("LSTM cells are always recurrent")
        if self.axo_somatic_recurrent and not (self.variant == "sSNU-a" and self.recurrent):
            raise ValueError("axo-somatic recurrence exists only for recurrent sSNU-a")

    @classmethod
    def from_name(cls, name: str, input_size: int, units: int, **constants) -> "CellConfig":
        """Build from a unit-type name such as ``"sSNU-o R"`` or ``"LSTM"``."""
        try:
            variant, recurrent, axo = UNIT_TYPES[name]
        except KeyError:
            raise ValueError(f"unknown unit type {name!r}; expected one of "
                             f"{sorted(UNIT_TYPES)}") from None
        return cls(variant, input_size, units, recurrent, axo, **constants)

    @property
    def name(self) -> str:
        for key, spec in UNIT_TYPES.items():
            if spec == (self.variant, self.recurrent, self.axo_somatic_recurrent):
                return key
        raise AssertionError("unreachable")  # guarded by __post_init__

    @property
    def trainable_rho(self) -> bool:
        return self.axo_somatic_recurrent

    def param_shapes(self) -> dict[str, tuple]:
        """Exactly the trainable arrays of this unit type."""
        n, m = self.units, self.input_size
        if self.variant == "LSTM":
            shapes = {}
            for gate in "icfs":
                shapes[f"W_{gate}"] = (n, m)
                shapes[f"H_{gate}"] = (n, n)
                shapes[f"b_{gate}"] = (n,)
            return shapes
        shapes = {"W": (n, m)}
        if self.recurrent:
            shapes["H"] = (n, n)
        if self.variant == "sSNU-a":
            shapes["b0"] = (n,)
            if self.axo_somatic_recurrent:
                shapes["H_a"] = (n, n)
                shapes["rho"] = (n,)
        else:
            shapes["b"] = (n,)
        if self.variant == "sSNU-o":
            shapes["W_o"] = (n, m)
            if self.recurrent:
                shapes["H_o"] = (n, n)
            shapes["b_o"] = (n,)
        return shapes


@dataclass
class CellState:
    s: Value
    y: Value
    b: Value | None = None        # adaptive threshold (sSNU-a)
    y_tilde: Value | None = None  # unmodulated output driving the reset (sSNU-o)


def init_params(config: CellConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform fan-based init for matrices, zeros for biases, rho at its constant."""
    params = {}
    for name, shape in config.param_shapes().items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif name == "rho":
            params[name] = np.full(shape, config.rho)
        else:
            params[name] = np.zeros(shape)
    return params


class Cell:
    """Base transition.  Subclasses fill in ``transition``."""

    input_matrices: tuple[str, ...] = ("W",)

    def __init__(self, config: CellConfig):
        self.config = config

    @property
    def units(self) -> int:
        return self.config.units

    def zero_state(self) -> CellState:
        n = self.config.units
        return CellState(s=Value(np.zeros(n)), y=Value(np.zeros(n)))

    def _check_params(self, params: Mapping[str, Value]) -> None:
        for name, shape in self.config.param_shapes().items():
            if name not in params:
                raise KeyError(f"{self.config.name} cell is missing parameter {name!r}")
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, "
                                 f"expected {shape}")

    def input_drives(self, params: Mapping[str, Value], x: Value) -> dict[str, Value]:
        """Input projections for ``x`` of shape ``(m,)`` or ``(T, m)``."""
        if x.shape[-1] != self.config.input_size:
            raise ShapeError(f"input width {x.shape[-1]} != {self.config.input_size}")
        return {k: nx.matvec(params[k], x) for k in self.input_matrices if k in params}

    def transition(self, params, state: CellState, drives) -> tuple[Value, CellState]:
        raise NotImplementedError

    def step(self, params: Mapping[str, Value], state: CellState, x: Value):
        """One timestep: returns ``(y, new_state)``."""
        if x.shape != (self.config.input_size,):
            raise ShapeError(f"step expects x of shape ({self.config.input_size},), got {x.shape}")
        if state.s.shape != (self.config.units,):
            raise ShapeError(f"state has width {state.s.shape}, expected ({self.config.units},)")
        return self.transition(params, state, self.input_drives(params, x))

    def _membrane(self, params, state, drives, reset_by: Value) -> Value:
        # s = W x + H y + d * s_prev * (1 - reset_by); g = identity
        s = drives["W"]
        if self.config.recurrent:
            s = nx.add(s, nx.matvec(params["H"], state.y))
        leak = nx.scale(nx.mul(state.s, nx.one_minus(reset_by)), self.config.d)
        return nx.identity(nx.add(s, leak))


class SSNUCell(Cell):
    def transition(self, params, state, drives):
        s = self._membrane(params, state, drives, reset_by=state.y)
        y = nx.sigmoid(nx.add(s, params["b"]))
        return y, CellState(s=s, y=y)


class SSNUACell(Cell):
    """Adaptive threshold.

    Without axo-somatic weights the threshold is driven by the unit's own
    previous output; with them (``Ra``) by ``H_a y_prev`` and the decay
    ``rho`` becomes a trainable per-unit vector.
    """

    def zero_state(self) -> CellState:
        state = super().zero_state()
        state.b = Value(np.zeros(self.config.units))
        return state

    def transition(self, params, state, drives):
        cfg = self.config
        s = self._membrane(params, state, drives, reset_by=state.y)
        if cfg.axo_somatic_recurrent:
            drive = nx.matvec(params["H_a"], state.y)
            rho = params["rho"]
            b = nx.add(nx.mul(rho, state.b), nx.mul(nx.one_minus(rho), drive))
        else:
            b = nx.add(nx.scale(state.b, cfg.rho), nx.scale(state.y, 1.0 - cfg.rho))
        y = nx.sigmoid(nx.add(nx.add(s, nx.scale(b, cfg.beta)), params["b0"]))
        return y, CellState(s=s, y=y, b=b)


class SSNUOCell(Cell):
    """Output-modulated unit.

    ``pin_gate`` replaces the sigmoid modulation by ones; it exists so the
    reduction to the plain sSNU can be checked.
    """

    input_matrices = ("W", "W_o")

    def __init__(self, config: CellConfig, pin_gate: bool = False):
        super().__init__(config)
        self.pin_gate = pin_gate

    def zero_state(self) -> CellState:
        state = super().zero_state()
        state.y_tilde = Value(np.zeros(self.config.units))
        return state

    def transition(self, params, state, drives):
        s = self._membrane(params, state, drives, reset_by=state.y_tilde)
        y_tilde = nx.sigmoid(nx.add(s, params["b"]))
        if self.pin_gate:
            gate = Value(np.ones(self.config.units))
        else:
            z = drives["W_o"]
            if self.config.recurrent:
                z = nx.add(z, nx.matvec(params["H_o"], state.y))
            gate = nx.sigmoid(nx.add(z, params["b_o"]))
        y = nx.mul(y_tilde, gate)
        return y, CellState(s=s, y=y, y_tilde=y_tilde)


class LSTMCell(Cell):
    input_matrices = ("W_i", "W_c", "W_f", "W_s")

    def transition(self, params, state, drives):
        def pre(gate):
            z = nx.add(drives[f"W_{gate}"], nx.matvec(params[f"H_{gate}"], state.y))
            return nx.add(z, params[f"b_{gate}"])

        i = nx.sigmoid(pre("i"))
        c = nx.sigmoid(pre("c"))
        f = nx.sigmoid(pre("f"))
        s = nx.add(nx.mul(f, state.s), nx.mul(i, nx.tanh(pre("s"))))
        y = nx.mul(c, nx.tanh(s))
        return y, CellState(s=s, y=y)


_CELL_CLASSES = {"LSTM": LSTMCell, "sSNU": SSNUCell, "sSNU-a": SSNUACell, "sSNU-o": SSNUOCell}


def make_cell(config: CellConfig, **kwargs) -> Cell:
    return _CELL_CLASSES[config.variant](config, **kwargs)


def run_layer(cell: Cell, params: Mapping[str, Value], inputs: Value) -> Value:
    """Unroll ``cell`` over ``inputs`` (``T x m``) from the zero state; returns ``T x n``."""
    if inputs.value.ndim != 2 or inputs.shape[0] < 1:
        raise ShapeError(f"run_layer expects a nonempty T x m input, got {inputs.shape}")
    drives = cell.input_drives(params, inputs)
    state = cell.zero_state()
    outputs = []
    for t in range(inputs.shape[0]):
        y, state = cell.transition(params, state, {k: nx.row(v, t) for k, v in drives.items()})
        outputs.append(y)
    return nx.stack(outputs)


def run_bidirectional(fwd: Cell, fwd_params, bwd: Cell, bwd_params, inputs: Value) -> Value:
    """Forward pass on ``inputs`` and backward pass on the reversed sequence,
    concatenated per frame: ``T x 2n``."""
    if fwd.units != bwd.units:
        raise ShapeError(f"direction widths differ: {fwd.units} vs {bwd.units}")
    forward = run_layer(fwd, fwd_params, inputs)
    backward = nx.flip(run_layer(bwd, bwd_params, nx.flip(inputs)))
    return nx.concat([forward, backward], axis=-1)


def with_constants(config: CellConfig, **changes) -> CellConfig:
    return replace(config, **changes)
