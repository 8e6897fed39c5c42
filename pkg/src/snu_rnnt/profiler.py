"""Analytic parameter/multiplication counts and decode timing.

Counting conventions
--------------------
* Parameters: every trainable scalar of the recurrent cells.  The
  prediction-network embedding table and the joint network are left out of
  the subnetwork totals.
* Multiplications: per output timestep, summed over all layers and both
  directions of the encoder.  A matrix ``n x m`` times a vector costs
  ``n*m``; an elementwise product or a scalar-times-vector costs ``n``;
  additions and activations are free.

Per-step multiplication ledger (``[..]`` only with recurrent matrices)::

    LSTM      4(nm + n^2) + 3n        f*s, i*tanh(.), c*tanh(s)
    sSNU      nm [+ n^2] + 2n          d*(.), s*(1 - y)
    sSNU-a    sSNU + 3n [+ n^2 (H_a)]  rho*b, (1-rho)*drive, beta*b
    sSNU-o    sSNU + nm [+ n^2] + n    W_o x, H_o y, y~ * gate
"""

from __future__ import annotations

import contextlib
import csv
import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .cells import CellConfig, init_params, make_cell
from .transducer import TransducerConfig, TransducerModel

REPORT_HEADER = ("multiplications are per output timestep, summed over all layers and both "
                 "encoder directions; embedding and joint network excluded")


def cell_params(cfg: CellConfig) -> int:
    n, m = cfg.units, cfg.input_size
    rec = n * n if cfg.recurrent else 0
    if cfg.variant == "LSTM":
        return 4 * (n * m + n * n + n)
    count = n * m + rec + n
    if cfg.variant == "sSNU-a" and cfg.axo_somatic_recurrent:
        count += n * n + n  # H_a and the trainable rho
    elif cfg.variant == "sSNU-o":
        count += n * m + rec + n
    return count


def cell_mults(cfg: CellConfig) -> int:
    n, m = cfg.units, cfg.input_size
    rec = n * n if cfg.recurrent else 0
    if cfg.variant == "LSTM":
        return 4 * (n * m + n * n) + 3 * n
    count = n * m + rec + 2 * n
    if cfg.variant == "sSNU-a":
        count += 3 * n + (n * n if cfg.axo_somatic_recurrent else 0)
    elif cfg.variant == "sSNU-o":
        count += n * m + rec + n
    return count


@dataclass(frozen=True)
class SubnetCount:
    layers: tuple
    params: int
    mults: int


def _encoder_count(config: TransducerConfig) -> SubnetCount:
    per_layer = tuple((2 * cell_params(c), 2 * cell_mults(c)) for c in config.encoder_configs())
    return SubnetCount(per_layer, sum(p for p, _ in per_layer), sum(m for _, m in per_layer))


def _prediction_count(config: TransducerConfig) -> SubnetCount:
    c = config.prediction_config()
    p, m = cell_params(c), cell_mults(c)
    return SubnetCount(((p, m),), p, m)


def count_params(config) -> dict | int:
    """Parameter count of a cell config (int) or a transducer (dict with
    ``encoder``, ``encoder_layers``, ``prediction`` and ``total``)."""
    if isinstance(config, CellConfig):
        return cell_params(config)
    if not isinstance(config, TransducerConfig):
        raise TypeError(f"cannot count parameters of {type(config).__name__}")
    enc, pred = _encoder_count(config), _prediction_count(config)
    return {"encoder": enc.params, "encoder_layers": [p for p, _ in enc.layers],
            "prediction": pred.params, "total": enc.params + pred.params}


def count_mults(config) -> dict | int:
    """Multiplications per output timestep, same shapes as :func:`count_params`."""
    if isinstance(config, CellConfig):
        return cell_mults(config)
    if not isinstance(config, TransducerConfig):
        raise TypeError(f"cannot count multiplications of {type(config).__name__}")
    enc, pred = _encoder_count(config), _prediction_count(config)
    return {"encoder": enc.mults, "encoder_layers": [m for _, m in enc.layers],
            "prediction": pred.mults, "total": enc.mults + pred.mults}


def instrumented_mults(cfg: CellConfig, seed: int = 0) -> int:
    """Multiplications tallied by the op set during one real cell step."""
    rng = np.random.default_rng(seed)
    cell = make_cell(cfg)
    params = {k: nx.Value(v) for k, v in init_params(cfg, rng).items()}
    state = cell.zero_state()
    # one warm step so the counted step starts from a nonzero state
    state = cell.step(params, state, nx.Value(rng.normal(size=cfg.input_size)))[1]
    with nx.no_grad(), nx.count_multiplications() as counter:
        cell.step(params, state, nx.Value(rng.normal(size=cfg.input_size)))
    return counter.total


# ---------------------------------------------------------------- reports

def format_percent(value: float) -> str:
    return "<1" if value < 1 else str(int(round(value)))


@dataclass
class CostRow:
    variant: str
    subnetwork: str
    params: int
    mults: int
    percent_params: float
    percent_mults: float


@dataclass
class TimingRow:
    variant: str
    T: int
    mean_s: float
    std_s: float
    samples: list = field(default_factory=list, repr=False)


@dataclass
class CostReport:
    rows: list
    timing: list = field(default_factory=list)

    def find(self, variant: str, subnetwork: str) -> CostRow:
        for r in self.rows:
            if r.variant == variant and r.subnetwork == subnetwork:
                return r
        raise KeyError((variant, subnetwork))

    def write_counts(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# {REPORT_HEADER}\n")
            w = csv.writer(fh)
            w.writerow(["variant", "subnetwork", "params", "mults", "percent_params", "percent_mults"])
            for r in self.rows:
                w.writerow([r.variant, r.subnetwork, r.params, r.mults,
                            format_percent(r.percent_params), format_percent(r.percent_mults)])

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "T", "mean_s", "std_s"])
            for r in self.timing:
                w.writerow([r.variant, r.T, repr(r.mean_s), repr(r.std_s)])


def lstm_baseline(config: TransducerConfig) -> TransducerConfig:
    return replace(config, encoder_type="LSTM", prediction_type="LSTM")


def variant_label(config: TransducerConfig) -> str:
    return f"{config.encoder_type}/{config.prediction_type}"


def cost_rows(config: TransducerConfig, subnetworks: Sequence[str] = ("encoder", "prediction", "total"),
              label: str | None = None) -> list[CostRow]:
    params, mults = count_params(config), count_mults(config)
    base = lstm_baseline(config)
    bp, bm = count_params(base), count_mults(base)
    label = label or variant_label(config)
    return [CostRow(label, s, params[s], mults[s], 100.0 * params[s] / bp[s], 100.0 * mults[s] / bm[s])
            for s in subnetworks]


def reference_configs() -> list[tuple[TransducerConfig, str]]:
    """The 6x640 encoder / 1x768 prediction comparisons with 340-d input.

    Returns ``(config, subnetwork)`` pairs naming the subnetwork whose
    figures each comparison is about.
    """
    base = TransducerConfig()
    out = [(base, "total")]
    for unit in ("sSNU", "sSNU R", "sSNU-a", "sSNU-a R", "sSNU-o", "sSNU-o R"):
        out.append((replace(base, prediction_type=unit), "prediction"))
    for unit in ("sSNU-a Ra", "sSNU-o", "sSNU-o R"):
        out.append((replace(base, encoder_type=unit), "encoder"))
    for pred in ("sSNU-a R", "sSNU-o R"):
        out.append((replace(base, encoder_type="sSNU-o R", prediction_type=pred), "total"))
    return out


def reference_report() -> CostReport:
    rows = []
    for cfg, _ in reference_configs():
        rows.extend(cost_rows(cfg))
    return CostReport(rows)


# ---------------------------------------------------------------- timing

@contextlib.contextmanager
def single_threaded():
    """Limit BLAS to one thread and pin to one CPU where the platform allows."""
    from threadpoolctl import threadpool_limits

    affinity = None
    if hasattr(os, "sched_getaffinity"):
        affinity = os.sched_getaffinity(0)
        with contextlib.suppress(OSError):
            os.sched_setaffinity(0, {min(affinity)})
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if affinity is not None:
            with contextlib.suppress(OSError):
                os.sched_setaffinity(0, affinity)


def time_decode(model: TransducerModel, lengths: Iterable[int], repeats: int = 10,
                seed: int = 0, label: str | None = None) -> list[TimingRow]:
    """Wall-clock greedy decoding of random utterances of each length.

    One warm-up decode per length is discarded; the remaining ``repeats``
    runs give the mean and sample standard deviation.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    lengths = list(lengths)
    if not lengths or any(int(T) < 1 for T in lengths):
        raise ValueError(f"invalid utterance lengths {lengths}")
    rng = np.random.default_rng(seed)
    label = label or variant_label(model.config)
    rows = []
    with single_threaded():
        for T in lengths:
            feats = rng.normal(size=(int(T), model.config.input_size))
            model.greedy_decode(feats)
            samples = []
            for _ in range(repeats):
                start = time.perf_counter()
                model.greedy_decode(feats)
                samples.append(time.perf_counter() - start)
            std = float(np.std(samples, ddof=1)) if repeats > 1 else 0.0
            rows.append(TimingRow(label, int(T), float(np.mean(samples)), std, samples))
    return rows


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.corrcoef(np.asarray(xs, float), np.asarray(ys, float))[0, 1])


def timing_model(config: TransducerConfig, seed: int = 0) -> TransducerModel:
    """Random-weight model whose joint network always prefers blank, so every
    variant emits the same (empty) transcript and decodes the same lattice path."""
    model = TransducerModel(config, seed=seed)
    arrays = model.state_dict()
    arrays["joint.W_out"] = np.zeros_like(arrays["joint.W_out"])
    arrays["joint.b_out"] = np.zeros_like(arrays["joint.b_out"])
    arrays["joint.b_out"][config.blank] = 1.0
    model.load_state_dict(arrays)
    return model
