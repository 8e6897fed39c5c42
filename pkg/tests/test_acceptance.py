"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the pytest
terminal summary, then asserts it.  Criteria 4 and 5 train models and time
full-size decoders; they are marked ``slow``.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import enumerated_loss, random_lattice
from snu_rnnt.cells import UNIT_TYPES, CellConfig, SSNUOCell, init_params, make_cell, run_layer
from snu_rnnt.dataio import ToyTaskSpec, generate_toy_dataset
from snu_rnnt.gradcheck import cell_check, transducer_check
from snu_rnnt.numerics import Value
from snu_rnnt.profiler import (count_mults, count_params, instrumented_mults, pearson,
                               time_decode, timing_model)
from snu_rnnt.training import TrainConfig, fit
from snu_rnnt.transducer import TransducerConfig, TransducerModel, rnnt_loss

BASE = TransducerConfig()


def test_exact_count_reproduction(acceptance_record):
    expected = []
    for unit, p, m in [("LSTM", 2_393_088, 2_392_320), ("sSNU", 8_448, 9_216),
                       ("sSNU R", 598_272, 599_040), ("sSNU-a", 8_448, 11_520),
                       ("sSNU-a R", 598_272, 601_344), ("sSNU-o", 16_896, 17_664),
                       ("sSNU-o R", 1_196_544, 1_197_312)]:
        expected.append((replace(BASE, prediction_type=unit), "prediction", p, m))
    for unit, p, m in [("LSTM", 54_200_320, 54_192_640), ("sSNU-a Ra", 18_472_960, 18_496_000),
                       ("sSNU-o", 17_269_760, 17_277_440), ("sSNU-o R", 27_100_160, 27_107_840)]:
        expected.append((replace(BASE, encoder_type=unit), "encoder", p, m))
    for enc, pred, p in [("sSNU-o R", "sSNU-a R", 27_698_432), ("sSNU-o R", "sSNU-o R", 28_296_704)]:
        expected.append((replace(BASE, encoder_type=enc, prediction_type=pred), "total", p, None))

    start = time.perf_counter()
    mismatches = []
    for cfg, part, p, m in expected:
        got_p, got_m = count_params(cfg)[part], count_mults(cfg)[part]
        if got_p != p or (m is not None and got_m != m):
            mismatches.append((cfg.encoder_type, cfg.prediction_type, part, got_p, got_m))
    elapsed = time.perf_counter() - start
    cells = sum(2 if m is not None else 1 for *_, m in expected)
    ok = not mismatches and elapsed < 1.0
    acceptance_record(1, "exact count reproduction", ok,
                      f"{cells - 2 * len(mismatches)}/{cells} table cells exact in {elapsed:.3f}s")
    assert not mismatches, mismatches
    assert elapsed < 1.0


def test_loss_oracle_equivalence(acceptance_record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
        labels = [int(k) for k in rng.integers(0, V, size=U)]
        lp = random_lattice(rng, T, U, V)
        ref = enumerated_loss(lp, labels)
        got = float(rnnt_loss(Value(lp), labels).value)
        worst = max(worst, abs(got - ref) / abs(ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 10
    acceptance_record(2, "loss oracle equivalence", ok,
                      f"200 lattices, max rel err {worst:.2e} (tol 1e-10) in {elapsed:.2f}s")
    assert worst <= 1e-10
    assert elapsed < 10


def test_gradient_fidelity(acceptance_record):
    start = time.perf_counter()
    results = [cell_check(unit, T=4, n=5, m=5, tol=1e-5) for unit in UNIT_TYPES]
    e2e = transducer_check(tol=1e-4, T=3, labels=(1, 2))
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results + [e2e] if not r.passed]
    worst_cell = max(r.max_rel_error for r in results)
    ok = not failed and elapsed < 60
    acceptance_record(3, "gradient fidelity", ok,
                      f"8 units max rel err {worst_cell:.2e} (tol 1e-5), tiny RNN-T "
                      f"{e2e.max_rel_error:.2e} (tol 1e-4), {elapsed:.1f}s")
    assert not failed, failed
    assert elapsed < 60


def _toy_model(encoder, prediction):
    cfg = TransducerConfig(input_size=16, vocab_size=8, encoder_type=encoder, encoder_layers=2,
                           encoder_units=64, prediction_type=prediction, prediction_units=64,
                           embedding_dim=10, joint_dim=64)
    return TransducerModel(cfg, seed=0)


@pytest.mark.slow
def test_trainability(acceptance_record):
    train = generate_toy_dataset(ToyTaskSpec(n_utterances=500, vocab_size=8, feature_dim=16,
                                             seed=42))
    held_out = generate_toy_dataset(ToyTaskSpec(n_utterances=100, vocab_size=8, feature_dim=16,
                                                seed=43, prototype_seed=42))
    errors, times = {}, {}
    for enc, pred in (("sSNU-o R", "sSNU-a R"), ("LSTM", "LSTM")):
        start = time.perf_counter()
        log = fit(_toy_model(enc, pred), train, TrainConfig(epochs=20), eval_data=held_out)
        times[enc] = time.perf_counter() - start
        errors[enc] = log[-1].token_error
    ok = all(e <= 0.05 for e in errors.values()) and all(t <= 1800 for t in times.values())
    acceptance_record(4, "trainability (toy task)", ok,
                      "held-out token error sSNU-o R/sSNU-a R {:.2%} in {:.0f}s, "
                      "LSTM {:.2%} in {:.0f}s (tol 5%, 30 min)".format(
                          errors["sSNU-o R"], times["sSNU-o R"], errors["LSTM"], times["LSTM"]))
    assert errors["sSNU-o R"] <= 0.05 and errors["LSTM"] <= 0.05
    assert max(times.values()) <= 1800


@pytest.mark.slow
def test_latency_trend(acceptance_record):
    lengths = [50, 100, 200, 388]
    rows = {}
    for enc, pred in (("LSTM", "LSTM"), ("sSNU-o R", "sSNU-a R")):
        model = timing_model(replace(BASE, encoder_type=enc, prediction_type=pred))
        rows[enc] = time_decode(model, lengths, repeats=10)
    r = {k: pearson(lengths, [row.mean_s for row in v]) for k, v in rows.items()}
    ratio = rows["sSNU-o R"][-1].mean_s / rows["LSTM"][-1].mean_s
    ok = min(r.values()) >= 0.95 and ratio <= 0.85
    acceptance_record(5, "latency trend", ok,
                      f"Pearson LSTM {r['LSTM']:.4f}, sSNU {r['sSNU-o R']:.4f} (>= 0.95); "
                      f"time ratio at T=388 {ratio:.2f} (<= 0.85)")
    assert min(r.values()) >= 0.95
    assert ratio <= 0.85


def test_instrumented_count_equivalence(acceptance_record):
    rng = np.random.default_rng(7)
    units = list(UNIT_TYPES)
    mismatches = []
    for i in range(50):
        cfg = CellConfig.from_name(units[i % len(units)], int(rng.integers(1, 65)),
                                   int(rng.integers(1, 65)))
        if instrumented_mults(cfg, seed=i) != count_mults(cfg):
            mismatches.append(cfg)
    acceptance_record(6, "instrumented-count equivalence", not mismatches,
                      f"{50 - len(mismatches)}/50 random configs exact")
    assert not mismatches


def _random_params(cfg, rng):
    p = init_params(cfg, rng)
    for k, v in p.items():
        if v.ndim == 1:
            p[k] = rng.normal(size=v.shape)
    return {k: Value(v) for k, v in p.items()}


def test_equivalence_reductions(acceptance_record):
    rng = np.random.default_rng(11)
    a_same = o_same = 0
    for _ in range(100):
        m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        xs = Value(rng.normal(size=(10, m)))
        recurrent = bool(rng.integers(2))
        s_cfg = CellConfig("sSNU", m, n, recurrent)
        s_params = _random_params(s_cfg, rng)
        plain = run_layer(make_cell(s_cfg), s_params, xs).value.tobytes()

        a_cfg = CellConfig("sSNU-a", m, n, recurrent, beta=0.0)
        a_params = {("b0" if k == "b" else k): v for k, v in s_params.items()}
        a_same += run_layer(make_cell(a_cfg), a_params, xs).value.tobytes() == plain

        o_cfg = CellConfig("sSNU-o", m, n, recurrent)
        o_params = {**_random_params(o_cfg, rng), **s_params}
        o_same += run_layer(SSNUOCell(o_cfg, pin_gate=True), o_params, xs).value.tobytes() == plain
    ok = a_same == 100 and o_same == 100
    acceptance_record(7, "equivalence reductions", ok,
                      f"sSNU-a(beta=0) {a_same}/100, sSNU-o(gate=1) {o_same}/100 bit-identical")
    assert ok
