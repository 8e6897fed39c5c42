"""AdamW with a one-cycle schedule, global-norm clipping, dropout and the
training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import NonFiniteError, ShapeError, Value

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch}"
                         + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class ScheduleConfig:
    """Linear ramp from ``peak_lr/10`` to ``peak_lr`` over the warmup epochs,
    then down to ``peak_lr/100`` over the decay epochs, constant afterwards."""

    peak_lr: float = 5e-4
    steps_per_epoch: int = 1
    warmup_epochs: int = 6
    decay_epochs: int = 14

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.steps_per_epoch < 1 or self.warmup_epochs < 0 or self.decay_epochs < 0:
            raise ValueError("invalid schedule lengths")

    @property
    def initial_lr(self) -> float:
        return self.peak_lr / 10

    @property
    def min_lr(self) -> float:
        return self.peak_lr / 100

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.decay_epochs


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = schedule.warmup_epochs * schedule.steps_per_epoch
    decay = schedule.decay_epochs * schedule.steps_per_epoch
    if step <= warm and warm > 0:
        return schedule.initial_lr + (schedule.peak_lr - schedule.initial_lr) * step / warm
    if step <= warm + decay and decay > 0:
        frac = (step - warm) / decay
        return schedule.peak_lr + (schedule.min_lr - schedule.peak_lr) * frac
    return schedule.min_lr


# ---------------------------------------------------------------- clipping

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], c: float,
                   unconditional: bool = False) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``c``.

    ``unconditional=True`` always rescales to norm ``c``, small gradients
    included.
    """
    if c <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError(f"gradient norm is {norm}")
    if norm == 0.0 or (norm <= c and not unconditional):
        return dict(grads)
    factor = c / norm
    return {k: g * factor for k, g in grads.items()}


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: Mapping[str, np.ndarray],
               grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """Decoupled weight decay Adam; returns the updated arrays."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        m = state.first.get(name)
        v = state.second.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.first[name], state.second[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = w - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * w)
    return out


# ---------------------------------------------------------------- dropout

def apply_dropout(x: Value, p: float, rng: np.random.Generator, training: bool) -> Value:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    mask = Value(keep / (1.0 - p), dtype=x.value.dtype)
    return nx.mul(x, mask)


# ---------------------------------------------------------------- metrics

def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def token_error_rate(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Total edit distance over total reference length."""
    errors = sum(edit_distance(h, r) for h, r in zip(hypotheses, references, strict=True))
    length = sum(len(r) for r in references)
    return errors / max(length, 1)


# ---------------------------------------------------------------- loop

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    peak_lr: float = 5e-3
    warmup_fraction: float = 0.3
    clip: float = 10.0
    clip_unconditional: bool = False
    p_w: float = 0.25
    p_e: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0

    def schedule(self, steps_per_epoch: int) -> ScheduleConfig:
        # 20 epochs -> 6 warmup + 14 decay
        warmup = round(self.epochs * self.warmup_fraction)
        return ScheduleConfig(self.peak_lr, steps_per_epoch, warmup, self.epochs - warmup)


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float
    token_error: float


LOG_FIELDS = ("epoch", "step", "lr", "loss", "token_error")


def write_log(rows: Sequence[LogRow], path, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss), repr(r.token_error)])


def evaluate(model, dataset, decoder: str = "greedy", width: int = 16) -> float:
    hyps = []
    for utt in dataset:
        if decoder == "beam":
            hyps.append(model.beam_decode(utt.features, width).labels)
        else:
            hyps.append(model.greedy_decode(utt.features).labels)
    return token_error_rate(hyps, [u.labels for u in dataset])


def fit(model, dataset, config: TrainConfig = TrainConfig(), eval_data=None,
        checkpoint_dir=None, on_epoch: Callable | None = None) -> list[LogRow]:
    """Train ``model`` in place; returns one log row per epoch.

    The run is fully determined by ``config.seed``: batch order and dropout
    masks come from one generator, and gradients are accumulated in batch
    order.
    """
    from .dataio import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    n_batches = math.ceil(len(dataset) / config.batch_size)
    schedule = config.schedule(n_batches)
    opt = OptimizerState(weight_decay=config.weight_decay)
    eval_data = dataset if eval_data is None else eval_data
    log: list[LogRow] = []
    step = 0

    def drop_w(x):
        return apply_dropout(x, config.p_w, rng, True)

    def drop_e(x):
        return apply_dropout(x, config.p_e, rng, True)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for b in range(n_batches):
            batch = [dataset[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            model.zero_grad()
            batch_loss = 0.0
            try:
                for utt in batch:
                    loss = model.loss(utt.features, utt.labels, dropout_w=drop_w, dropout_e=drop_e)
                    batch_loss += float(loss.value)
                    nx.backward(nx.scale(loss, 1.0 / len(batch)))
                grads = {k: v.grad for k, v in model.params.items() if v.grad is not None}
                grads = clip_gradients(grads, config.clip, config.clip_unconditional)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, b, str(exc)) from exc
            lr = lr_at(schedule, step)
            updated = adamw_step(opt, model.state_dict(), grads, lr)
            model.load_state_dict(updated)
            model.constrain()
            step += 1
            epoch_loss += batch_loss
        err = evaluate(model, eval_data)
        row = LogRow(epoch, step, lr_at(schedule, step), epoch_loss / len(dataset), err)
        log.append(row)
        logger.info("epoch %d  loss %.4f  token error %.4f", epoch, row.loss, err)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt", model)
        if on_epoch is not None:
            on_epoch(row)
    return log
