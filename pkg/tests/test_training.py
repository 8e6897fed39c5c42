import csv

import numpy as np
import pytest

from snu_rnnt import numerics as nx
from snu_rnnt.cells import UNIT_TYPES
from snu_rnnt.dataio import ToyTaskSpec, generate_toy_dataset, read_checkpoint
from snu_rnnt.gradcheck import tiny_transducer
from snu_rnnt.numerics import NonFiniteError, Value
from snu_rnnt.training import (DivergenceError, OptimizerState, ScheduleConfig, TrainConfig,
                               adamw_step, apply_dropout, clip_gradients, edit_distance, fit,
                               global_norm, lr_at, token_error_rate, write_log)


# ------------------------------------------------------------ schedule

def test_schedule_endpoints():
    s = ScheduleConfig(peak_lr=1e-3, steps_per_epoch=10)
    assert lr_at(s, 0) == pytest.approx(1e-4)
    assert lr_at(s, 60) == pytest.approx(1e-3)
    assert lr_at(s, 200) == pytest.approx(1e-5)
    assert lr_at(s, 10_000) == pytest.approx(1e-5)


def test_schedule_is_two_linear_segments():
    s = ScheduleConfig(peak_lr=2.0, steps_per_epoch=3)
    lrs = np.array([lr_at(s, k) for k in range(80)])
    slopes = np.round(np.diff(lrs), 12)
    assert set(slopes[:18]) == {round(1.8 / 18, 12)}
    assert set(slopes[18:60]) == {round(-1.98 / 42, 12)}
    assert set(slopes[60:]) == {0.0}
    with pytest.raises(ValueError):
        lr_at(s, -1)


def test_train_config_splits_twenty_epochs_six_fourteen():
    s = TrainConfig().schedule(5)
    assert (s.warmup_epochs, s.decay_epochs) == (6, 14)


# ------------------------------------------------------------ clipping

def test_clip_halves_when_norm_is_twice_threshold():
    grads = {"a": np.array([12.0, 0.0]), "b": np.array([[16.0]])}  # norm 20
    out = clip_gradients(grads, 10.0)
    assert np.array_equal(out["a"], [6.0, 0.0]) and np.array_equal(out["b"], [[8.0]])


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([3.0, 4.0])}
    assert np.array_equal(clip_gradients(grads, 10.0)["a"], grads["a"])
    assert global_norm(clip_gradients(grads, 10.0, unconditional=True)) == pytest.approx(10.0)


@pytest.mark.parametrize("seed", range(10))
def test_clipped_norm_bounded(seed):
    rng = np.random.default_rng(seed)
    grads = {str(i): rng.normal(scale=10 ** rng.uniform(-3, 3), size=rng.integers(1, 20))
             for i in range(4)}
    assert global_norm(clip_gradients(grads, 1.5)) <= 1.5 + 1e-12


def test_clip_rejects_non_finite_and_bad_threshold():
    with pytest.raises(NonFiniteError):
        clip_gradients({"a": np.array([np.inf])}, 1.0)
    with pytest.raises(ValueError):
        clip_gradients({"a": np.ones(2)}, 0.0)


# ------------------------------------------------------------ optimizer

def test_zero_gradient_decays_weights():
    w = np.array([1.0, -2.0])
    out = adamw_step(OptimizerState(weight_decay=0.1), {"w": w}, {"w": np.zeros(2)}, lr=0.5)
    assert np.allclose(out["w"], w * (1 - 0.5 * 0.1), rtol=1e-15)


def test_constant_gradient_steps_approach_lr():
    state = OptimizerState(weight_decay=0.0)
    w = {"w": np.array([0.0])}
    for _ in range(1000):
        prev = w["w"].copy()
        w = adamw_step(state, w, {"w": np.array([0.37])}, lr=1e-3)
    assert abs(prev - w["w"])[0] == pytest.approx(1e-3, rel=0.01)


def test_identical_parameters_update_identically():
    state = OptimizerState()
    rng = np.random.default_rng(0)
    w = rng.normal(size=3)
    params = {"a": w.copy(), "b": w.copy()}
    for _ in range(5):
        g = rng.normal(size=3)
        params = adamw_step(state, params, {"a": g, "b": g}, 1e-2)
    assert np.array_equal(params["a"], params["b"])


def test_adam_first_step_against_reference():
    # bias-corrected first step is lr * g / (|g| + eps) + decay
    g = np.array([0.5, -2.0])
    out = adamw_step(OptimizerState(weight_decay=0.0), {"w": np.zeros(2)}, {"w": g}, 0.1)
    assert np.allclose(out["w"], -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)


# ------------------------------------------------------------ dropout

def test_dropout_identities():
    x = Value(np.arange(5.0))
    rng = np.random.default_rng(0)
    assert apply_dropout(x, 0.0, rng, True) is x
    assert apply_dropout(x, 0.9, rng, False) is x
    with pytest.raises(ValueError):
        apply_dropout(x, 1.0, rng, True)


def test_dropout_rate_and_scaling():
    out = apply_dropout(Value(np.ones(10**6)), 0.25, np.random.default_rng(1), True).value
    assert abs(np.mean(out == 0) - 0.25) <= 0.01
    assert np.allclose(out[out != 0], 1 / 0.75)


# ------------------------------------------------------------ metrics

@pytest.mark.parametrize("a,b,d", [([], [], 0), ([1, 2, 3], [], 3), ([], [4], 1),
                                   ([1, 2, 3], [1, 3], 1), ([1, 2], [2, 1], 2),
                                   ([0, 1, 2, 3], [0, 2, 2, 3, 4], 2)])
def test_edit_distance(a, b, d):
    assert edit_distance(a, b) == d
    assert edit_distance(b, a) == d


def test_token_error_rate_pools_lengths():
    assert token_error_rate([[1], [2, 3, 4]], [[1, 2], [2, 3]]) == pytest.approx(2 / 4)


# ------------------------------------------------------------ loop

def small_task(n=6):
    return generate_toy_dataset(ToyTaskSpec(vocab_size=3, feature_dim=3, n_utterances=n,
                                            min_labels=1, max_labels=2, min_frames=1,
                                            max_frames=2, seed=5))


def test_zero_epochs_leave_model_unchanged():
    model = tiny_transducer()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    assert fit(model, small_task(), TrainConfig(epochs=0)) == []
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_fit_is_deterministic(tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, peak_lr=1e-2, seed=3)
    for run in ("a", "b"):
        fit(tiny_transducer(), small_task(), cfg, checkpoint_dir=tmp_path / run)
    for name in ("epoch001.ckpt", "epoch002.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_log_and_checkpoints(tmp_path):
    rows = fit(tiny_transducer(), small_task(), TrainConfig(epochs=2, batch_size=4),
               checkpoint_dir=tmp_path)
    assert [r.epoch for r in rows] == [1, 2]
    assert rows[-1].step == 4
    _, arrays = read_checkpoint(tmp_path / "epoch002.ckpt")
    assert "joint.W_out" in arrays
    write_log(rows, tmp_path / "log.csv", header="config_hash=abc")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    parsed = list(csv.DictReader(lines[1:]))
    assert float(parsed[1]["loss"]) == rows[1].loss


def test_fit_rejects_empty_dataset():
    with pytest.raises(ValueError):
        fit(tiny_transducer(), [], TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_batch():
    model = tiny_transducer()
    arrays = model.state_dict()
    # finite weights whose products overflow in the first forward pass
    for k in ("joint.P_enc", "joint.P_pred"):
        arrays[k] = np.full_like(arrays[k], 1e200)
    model.load_state_dict(arrays)
    with pytest.raises(DivergenceError) as err:
        fit(model, small_task(), TrainConfig(epochs=1, batch_size=2))
    assert err.value.epoch == 1 and err.value.batch == 0


@pytest.mark.parametrize("unit", list(UNIT_TYPES))
def test_single_batch_overfit_loss_non_increasing(unit):
    model = tiny_transducer(encoder_type=unit, prediction_type=unit, layers=1, units=6, vocab=3)
    batch = small_task(3)
    opt = OptimizerState(weight_decay=0.0)
    losses = []
    for _ in range(50):
        model.zero_grad()
        total = 0.0
        for utt in batch:
            loss = model.loss(utt.features, utt.labels)
            total += float(loss.value)
            nx.backward(nx.scale(loss, 1 / len(batch)))
        losses.append(total / len(batch))
        grads = {k: v.grad for k, v in model.params.items()}
        model.load_state_dict(adamw_step(opt, model.state_dict(), grads, 2e-3))
        model.constrain()
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < losses[0]
