"""Finite-difference verification of every op, every unit type and a tiny
transducer end to end."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .cells import UNIT_TYPES, CellConfig, init_params, make_cell, run_bidirectional, run_layer
from .numerics import Value, finite_difference_check
from .transducer import TransducerConfig, TransducerModel, rnnt_loss


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_param: str | None
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max rel err {self.max_rel_error:.3e}  (tol {self.tol:g}, worst {self.worst_param})"


def _weighted_sum(out: Value, weights: np.ndarray) -> Value:
    return nx.total(nx.mul(out, Value(weights)))


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[dict, Callable]]:
    """op name -> (inputs, f(inputs) -> output Value)."""
    def r(*shape):
        return rng.normal(size=shape)

    n, m, T, U = 6, 8, 5, 4
    return {
        "add": ({"a": r(n, m), "b": r(n, m)}, lambda p: nx.add(p["a"], p["b"])),
        "sub": ({"a": r(n, m), "b": r(n, m)}, lambda p: nx.sub(p["a"], p["b"])),
        "one_minus": ({"a": r(n)}, lambda p: nx.one_minus(p["a"])),
        "mul": ({"a": r(n, m), "b": r(n, m)}, lambda p: nx.mul(p["a"], p["b"])),
        "scale": ({"a": r(8, 8)}, lambda p: nx.scale(p["a"], 0.7)),
        "matvec": ({"W": r(n, m), "x": r(m)}, lambda p: nx.matvec(p["W"], p["x"])),
        "matvec_rows": ({"W": r(n, m), "X": r(T, m)}, lambda p: nx.matvec(p["W"], p["X"])),
        "add_bias": ({"x": r(T, n), "b": r(n)}, lambda p: nx.add_bias(p["x"], p["b"])),
        "sigmoid": ({"a": r(n, m)}, lambda p: nx.sigmoid(p["a"])),
        "tanh": ({"a": r(n, m)}, lambda p: nx.tanh(p["a"])),
        "identity": ({"a": r(n)}, lambda p: nx.identity(p["a"])),
        "log_softmax": ({"a": r(T, m)}, lambda p: nx.log_softmax(p["a"])),
        "concat": ({"a": r(T, 3), "b": r(T, 5)}, lambda p: nx.concat([p["a"], p["b"]], axis=-1)),
        "stack": ({"a": r(n), "b": r(n)}, lambda p: nx.stack([p["a"], p["b"]])),
        "row": ({"a": r(T, n)}, lambda p: nx.row(p["a"], 2)),
        "embedding": ({"E": r(T, n)}, lambda p: nx.embedding(p["E"], 3)),
        "flip": ({"a": r(T, n)}, lambda p: nx.flip(p["a"])),
        "pairwise_mul": ({"a": r(T, n), "b": r(U, n)}, lambda p: nx.pairwise_mul(p["a"], p["b"])),
        "sum": ({"a": r(n, m)}, lambda p: nx.total(p["a"])),
        "rnnt_loss": ({"z": r(T, U, 4)},
                      lambda p: rnnt_loss(nx.log_softmax(p["z"]), [0, 2, 1])),
    }


def op_checks(tol: float = 1e-6, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (inputs, fn) in _op_cases(rng).items():
        probe = fn({k: Value(v) for k, v in inputs.items()})
        weights = rng.normal(size=probe.shape)
        rep = finite_difference_check(lambda p: _weighted_sum(fn(p), weights), inputs, 1e-5, tol)
        results.append(CheckResult(f"op {name}", rep.max_rel_error, rep.worst_param, tol))
    return results


def cell_loss_fn(config: CellConfig, xs: np.ndarray, weights: np.ndarray):
    """Scalar function of a cell's parameters: weighted sum of an unroll."""
    cell = make_cell(config)

    def f(params):
        return _weighted_sum(run_layer(cell, params, Value(xs)), weights)

    return f


def cell_check(unit: str, T: int = 4, n: int = 5, m: int = 5, tol: float = 1e-5,
               seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = CellConfig.from_name(unit, m, n)
    params = init_params(cfg, rng)
    # nonzero biases so no gradient is trivially zero
    for k, v in params.items():
        if v.ndim == 1 and k != "rho":
            params[k] = 0.3 * rng.normal(size=v.shape)
    xs = rng.normal(size=(T, m))
    weights = rng.normal(size=(T, n))
    rep = finite_difference_check(cell_loss_fn(cfg, xs, weights), params, 1e-5, tol)
    return CheckResult(f"cell {unit} T={T}", rep.max_rel_error, rep.worst_param, tol)


def tiny_transducer(encoder_type: str = "sSNU-o R", prediction_type: str = "sSNU-a R",
                    layers: int = 2, units: int = 4, input_size: int = 3, vocab: int = 3,
                    seed: int = 0) -> TransducerModel:
    cfg = TransducerConfig(input_size=input_size, vocab_size=vocab, encoder_type=encoder_type,
                           encoder_layers=layers, encoder_units=units,
                           prediction_type=prediction_type, prediction_units=units,
                           embedding_dim=3, joint_dim=5)
    return TransducerModel(cfg, seed=seed)


def transducer_check(tol: float = 1e-4, seed: int = 0, encoder_type: str = "sSNU-o R",
                     prediction_type: str = "sSNU-a R", T: int = 3, labels=(1, 2)) -> CheckResult:
    model = tiny_transducer(encoder_type, prediction_type, seed=seed)
    rng = np.random.default_rng(seed + 1)
    feats = rng.normal(size=(T, model.config.input_size))
    params = model.state_dict()
    rep = finite_difference_check(lambda p: model.loss(Value(feats), list(labels), params=p),
                                  params, 1e-5, tol)
    return CheckResult(f"rnnt {encoder_type}/{prediction_type}", rep.max_rel_error,
                       rep.worst_param, tol)


def bidirectional_check(unit: str = "sSNU-o R", tol: float = 1e-4, seed: int = 0) -> CheckResult:
    """Two stacked bidirectional layers."""
    rng = np.random.default_rng(seed)
    n, m, T = 3, 4, 4
    cfgs = [CellConfig.from_name(unit, m, n), CellConfig.from_name(unit, 2 * n, n)]
    params = {}
    for i, cfg in enumerate(cfgs):
        for d in ("f", "b"):
            for k, v in init_params(cfg, rng).items():
                params[f"{i}{d}.{k}"] = v
    xs = rng.normal(size=(T, m))
    weights = rng.normal(size=(T, 2 * n))
    cells = [(make_cell(c), make_cell(c)) for c in cfgs]

    def f(p):
        x = Value(xs)
        for i, (fc, bc) in enumerate(cells):
            fp = {k[3:]: v for k, v in p.items() if k.startswith(f"{i}f.")}
            bp = {k[3:]: v for k, v in p.items() if k.startswith(f"{i}b.")}
            x = run_bidirectional(fc, fp, bc, bp, x)
        return _weighted_sum(x, weights)

    rep = finite_difference_check(f, params, 1e-5, tol)
    return CheckResult(f"bidir 2x {unit}", rep.max_rel_error, rep.worst_param, tol)


def run_all(tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    results = op_checks(tol, seed)
    results += [cell_check(unit, tol=tol, seed=seed) for unit in UNIT_TYPES]
    results.append(bidirectional_check(tol=tol, seed=seed))
    results.append(transducer_check(tol=tol, seed=seed))
    return results
