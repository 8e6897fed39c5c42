"""RNN transducer: bidirectional encoder, prediction network, joint network,
alignment loss and decoders.

Label ids run over ``[0, vocab_size)``; the blank symbol is ``vocab_size``
(the last output index) and doubles as the start token of the prediction
network.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .cells import CellConfig, CellState, init_params, make_cell, run_bidirectional
from .numerics import ShapeError, Value


@dataclass(frozen=True)
class TransducerConfig:
    input_size: int = 340
    vocab_size: int = 45
    encoder_type: str = "LSTM"
    encoder_layers: int = 6
    encoder_units: int = 640
    prediction_type: str = "LSTM"
    prediction_units: int = 768
    embedding_dim: int = 10
    joint_dim: int = 256
    d: float = 0.9
    rho: float = 0.9
    beta: float = 0.1

    def __post_init__(self):
        if self.encoder_layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.vocab_size < 1 or self.joint_dim < 1 or self.embedding_dim < 1:
            raise ValueError("vocab_size, joint_dim and embedding_dim must be >= 1")
        # validates unit names and sizes early
        self.encoder_configs()
        self.prediction_config()

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def encoder_width(self) -> int:
        return 2 * self.encoder_units

    def _constants(self) -> dict:
        return {"d": self.d, "rho": self.rho, "beta": self.beta}

    def encoder_configs(self) -> list[CellConfig]:
        """One config per layer (shared by both directions)."""
        configs = []
        for i in range(self.encoder_layers):
            m = self.input_size if i == 0 else 2 * self.encoder_units
            configs.append(CellConfig.from_name(self.encoder_type, m, self.encoder_units,
                                                **self._constants()))
        return configs

    def prediction_config(self) -> CellConfig:
        return CellConfig.from_name(self.prediction_type, self.embedding_dim,
                                    self.prediction_units, **self._constants())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TransducerConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PredictionState:
    cell: CellState
    output: Value  # h_pred for the last consumed label


@dataclass
class Hypothesis:
    labels: tuple
    log_prob: float
    state: PredictionState | None = field(default=None, repr=False)


@dataclass
class DecodeResult:
    labels: list
    log_prob: float
    truncated: bool = False
    alignment: list | None = None  # greedy only: every emitted symbol, blanks included


class TransducerModel:
    """Encoder stack, prediction network and joint network with named parameters."""

    def __init__(self, config: TransducerConfig, seed: int = 0, blank_bias: float = 0.0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder_cells = []
        arrays: dict[str, np.ndarray] = {}
        for i, cfg in enumerate(config.encoder_configs()):
            self.encoder_cells.append((make_cell(cfg), make_cell(cfg)))
            for direction in ("fwd", "bwd"):
                for name, arr in init_params(cfg, rng).items():
                    arrays[f"encoder.{i}.{direction}.{name}"] = arr
        pcfg = config.prediction_config()
        self.prediction_cell = make_cell(pcfg)
        n_out = config.vocab_size + 1
        arrays["prediction.embedding"] = rng.uniform(-1.0, 1.0, size=(n_out, config.embedding_dim))
        for name, arr in init_params(pcfg, rng).items():
            arrays[f"prediction.cell.{name}"] = arr
        for name, shape in (("P_enc", (config.joint_dim, config.encoder_width)),
                            ("P_pred", (config.joint_dim, config.prediction_units)),
                            ("W_out", (n_out, config.joint_dim))):
            limit = math.sqrt(6.0 / sum(shape))
            arrays[f"joint.{name}"] = rng.uniform(-limit, limit, size=shape)
        arrays["joint.b_out"] = np.zeros(n_out)
        arrays["joint.b_out"][config.blank] = blank_bias
        self.params = {k: Value(v, name=k, requires_grad=True) for k, v in arrays.items()}

    # ------------------------------------------------------------ parameters

    def _view(self, prefix: str, params=None) -> dict[str, Value]:
        params = self.params if params is None else params
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k] = Value(arr, name=k, requires_grad=True)

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()

    def constrain(self) -> None:
        """Project trainable threshold decays back into [0, 1]."""
        for k, v in self.params.items():
            if k.endswith(".rho"):
                np.clip(v.value, 0.0, 1.0, out=v.value)

    def cell_parameter_count(self) -> dict[str, int]:
        """Scalars instantiated in the encoder and prediction cells."""
        counts = {"encoder": 0, "prediction": 0}
        for k, v in self.params.items():
            if k.startswith("encoder."):
                counts["encoder"] += v.value.size
            elif k.startswith("prediction.cell."):
                counts["prediction"] += v.value.size
        return counts

    # ------------------------------------------------------------ forward

    def encode(self, features, params=None, dropout: Callable[[Value], Value] | None = None) -> Value:
        """``T x n_in`` features -> ``T x 2n`` acoustic embeddings."""
        x = features if isinstance(features, Value) else Value(features)
        if x.value.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"features must be a nonempty T x F matrix, got {x.shape}")
        if x.shape[1] != self.config.input_size:
            raise ShapeError(f"feature width {x.shape[1]} != {self.config.input_size}")
        for i, (fwd, bwd) in enumerate(self.encoder_cells):
            if dropout is not None:
                x = dropout(x)
            x = run_bidirectional(fwd, self._view(f"encoder.{i}.fwd.", params),
                                  bwd, self._view(f"encoder.{i}.bwd.", params), x)
        return x

    def initial_prediction_state(self) -> CellState:
        return self.prediction_cell.zero_state()

    def predict_step(self, label: int, state: CellState | None = None, params=None,
                     dropout: Callable[[Value], Value] | None = None):
        """Embed ``label`` (blank = start token) and advance the prediction cell."""
        if not 0 <= label <= self.config.vocab_size:
            raise ValueError(f"label {label} outside [0, {self.config.vocab_size}]")
        view = self._view("prediction.", params)
        if state is None:
            state = self.initial_prediction_state()
        e = nx.embedding(view["embedding"], label)
        if dropout is not None:
            e = dropout(e)
        return self.prediction_cell.step(self._view("cell.", view), state, e)

    def predict_sequence(self, labels: Sequence[int], params=None, dropout=None) -> Value:
        """Prediction vectors for ``[blank] + labels``: ``(U+1) x n_pred``."""
        state = None
        outputs = []
        for label in [self.config.blank, *labels]:
            h, state = self.predict_step(label, state, params, dropout)
            outputs.append(h)
        return nx.stack(outputs)

    def joint(self, h_enc: Value, h_pred: Value, params=None) -> Value:
        """Log-probabilities over ``vocab_size + 1`` symbols for one (t, u) pair."""
        view = self._view("joint.", params)
        if h_enc.shape != (self.config.encoder_width,) or h_pred.shape != (self.config.prediction_units,):
            raise ShapeError(f"joint expects widths {self.config.encoder_width} and "
                             f"{self.config.prediction_units}, got {h_enc.shape} and {h_pred.shape}")
        return self._joint_from_projection(nx.matvec(view["P_enc"], h_enc), h_pred, view)

    def _joint_from_projection(self, enc_proj: Value, h_pred: Value, view) -> Value:
        z = nx.tanh(nx.mul(enc_proj, nx.matvec(view["P_pred"], h_pred)))
        return nx.log_softmax(nx.add(nx.matvec(view["W_out"], z), view["b_out"]))

    def lattice(self, h_enc: Value, h_pred: Value, params=None) -> Value:
        """Full ``T x (U+1) x (V+1)`` grid of output log-probabilities."""
        view = self._view("joint.", params)
        z = nx.tanh(nx.pairwise_mul(nx.matvec(view["P_enc"], h_enc),
                                    nx.matvec(view["P_pred"], h_pred)))
        return nx.log_softmax(nx.add_bias(nx.matvec(view["W_out"], z), view["b_out"]))

    def loss(self, features, labels: Sequence[int], params=None,
             dropout_w=None, dropout_e=None) -> Value:
        """Negative log-likelihood of ``labels`` given ``features``."""
        h_enc = self.encode(features, params, dropout_w)
        h_pred = self.predict_sequence(labels, params, dropout_e)
        return rnnt_loss(self.lattice(h_enc, h_pred, params), labels)

    # ------------------------------------------------------------ decoding

    def greedy_decode(self, features, max_symbols: int | None = None) -> DecodeResult:
        return greedy_decode(self, features, max_symbols)

    def beam_decode(self, features, width: int = 16, max_symbols: int | None = None) -> DecodeResult:
        return beam_decode(self, features, width, max_symbols)


# ---------------------------------------------------------------- loss

def _check_lattice(log_probs: np.ndarray, labels: Sequence[int]) -> None:
    if log_probs.ndim != 3:
        raise ShapeError(f"lattice must be T x (U+1) x (V+1), got {log_probs.shape}")
    T, U1, V1 = log_probs.shape
    if T < 1 or U1 != len(labels) + 1:
        raise ShapeError(f"lattice {log_probs.shape} does not fit {len(labels)} labels")
    for y in labels:
        if not 0 <= y < V1 - 1:
            raise ValueError(f"target label {y} outside [0, {V1 - 1})")


def forward_variables(log_probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """alpha[t, u]: log-probability of reaching (t, u) having emitted ``labels[:u]``."""
    _check_lattice(log_probs, labels)
    T, U1, V1 = log_probs.shape
    blank = V1 - 1
    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            stay = alpha[t - 1, u] + log_probs[t - 1, u, blank] if t > 0 else -np.inf
            emit = alpha[t, u - 1] + log_probs[t, u - 1, labels[u - 1]] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(stay, emit)
    return alpha


def backward_variables(log_probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """beta[t, u]: log-probability of completing the alignment from (t, u)."""
    _check_lattice(log_probs, labels)
    T, U1, V1 = log_probs.shape
    blank = V1 - 1
    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U1 - 1] = log_probs[T - 1, U1 - 1, blank]
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            if t == T - 1 and u == U1 - 1:
                continue
            stay = beta[t + 1, u] + log_probs[t, u, blank] if t < T - 1 else -np.inf
            emit = beta[t, u + 1] + log_probs[t, u, labels[u]] if u < U1 - 1 else -np.inf
            beta[t, u] = np.logaddexp(stay, emit)
    return beta


def rnnt_loss(lattice: Value, labels: Sequence[int]) -> Value:
    """Negative log of the total probability of all alignments of ``labels``.

    The forward recursion gives the value; the gradient with respect to each
    lattice entry is the posterior occupancy of the transition it scores,
    taken from the forward and backward variables.
    """
    lp = lattice.value.astype(np.float64, copy=False)
    labels = [int(y) for y in labels]
    alpha = forward_variables(lp, labels)
    T, U1, V1 = lp.shape
    blank = V1 - 1
    log_like = alpha[T - 1, U1 - 1] + lp[T - 1, U1 - 1, blank]
    dtype = lattice.value.dtype

    def backward_fn(g):
        beta = backward_variables(lp, labels)
        grad = np.zeros_like(lp)
        # blank transitions (t, u) -> (t+1, u); the final blank closes the path
        nxt = np.zeros((T, U1))
        nxt[:-1] = beta[1:]
        nxt[-1, :-1] = -np.inf
        grad[:, :, blank] = -np.exp(alpha + lp[:, :, blank] + nxt - log_like)
        for u, y in enumerate(labels):
            grad[:, u, y] = -np.exp(alpha[:, u] + lp[:, u, y] + beta[:, u + 1] - log_like)
        return ((g * grad).astype(dtype),)

    return nx._node(np.asarray(-log_like, dtype=dtype), "rnnt_loss", (lattice,), backward_fn)


nx.register_op("rnnt_loss", rnnt_loss)


# ---------------------------------------------------------------- decoders

def _symbol_cap(T: int, max_symbols: int | None) -> int:
    return 10 * T if max_symbols is None else max_symbols


def greedy_decode(model: TransducerModel, features, max_symbols: int | None = None) -> DecodeResult:
    """Follow the most probable symbol at every lattice position.

    A blank advances time; a label is emitted and fed back into the
    prediction network.  At most ``10 T`` labels are emitted unless
    ``max_symbols`` says otherwise; hitting the cap sets ``truncated``.
    """
    blank = model.config.blank
    with nx.no_grad():
        h_enc = model.encode(features)
        view = model._view("joint.")
        enc_proj = nx.matvec(view["P_enc"], h_enc)
        T = h_enc.shape[0]
        cap = _symbol_cap(T, max_symbols)
        h_pred, state = model.predict_step(blank)
        labels: list[int] = []
        alignment: list[int] = []
        log_prob = 0.0
        truncated = False
        for t in range(T):
            proj_t = nx.row(enc_proj, t)
            while True:
                row = model._joint_from_projection(proj_t, h_pred, view).value
                k = int(np.argmax(row))
                if k != blank and len(labels) >= cap:
                    truncated = True
                    k = blank
                log_prob += float(row[k])
                alignment.append(k)
                if k == blank:
                    break
                labels.append(k)
                h_pred, state = model.predict_step(k, state)
    return DecodeResult(labels, log_prob, truncated, alignment)


def _rank_key(entry):
    # (score, symbol, labels, parent state): best score first, then the lower
    # symbol (blank is the highest index), then the shorter sequence
    score, symbol, labels = entry[0], entry[1], entry[2]
    return (-score, symbol, len(labels), labels)


def beam_decode(model: TransducerModel, features, width: int = 16,
                max_symbols: int | None = None) -> DecodeResult:
    """Frame-synchronous beam search over blank-free label sequences.

    Within a frame, every active hypothesis is scored on all symbols.  Its
    blank continuation finishes the frame; label continuations stay active.
    Finished and active candidates compete for ``width`` slots, and finished
    candidates with the same label sequence are merged by adding their
    probabilities.  With ``width=1`` this is exactly greedy decoding.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    blank = model.config.blank
    with nx.no_grad():
        h_enc = model.encode(features)
        view = model._view("joint.")
        enc_proj = nx.matvec(view["P_enc"], h_enc)
        T = h_enc.shape[0]
        cap = _symbol_cap(T, max_symbols)
        h0, s0 = model.predict_step(blank)
        beam = [Hypothesis((), 0.0, PredictionState(s0, h0))]
        for t in range(T):
            proj_t = nx.row(enc_proj, t)
            done: dict[tuple, list] = {}
            active = [(h.log_prob, h.labels, h.state) for h in beam]
            while active:
                candidates = []
                for score, labels, pstate in active:
                    row = model._joint_from_projection(proj_t, pstate.output, view).value
                    s_blank = score + float(row[blank])
                    if labels in done:
                        done[labels][0] = float(np.logaddexp(done[labels][0], s_blank))
                    else:
                        done[labels] = [s_blank, pstate]
                    if len(labels) >= cap:
                        continue
                    for k in range(blank):
                        candidates.append((score + float(row[k]), k, labels + (k,), pstate))
                pool = [(s, blank, labels, st) for labels, (s, st) in done.items()]
                pool = sorted(pool + candidates, key=_rank_key)[:width]
                done = {e[2]: done[e[2]] for e in pool if e[1] == blank}
                active = []
                for score, k, labels, parent in pool:
                    if k != blank:
                        h, cs = model.predict_step(k, parent.cell)
                        active.append((score, labels, PredictionState(cs, h)))
            ranked = sorted(((s, blank, labels, st) for labels, (s, st) in done.items()),
                            key=_rank_key)[:width]
            beam = [Hypothesis(labels, s, st) for s, _, labels, st in ranked]
        best = beam[0]
    return DecodeResult(list(best.labels), best.log_prob, len(best.labels) >= cap)


def sequence_log_prob(model: TransducerModel, features, labels: Sequence[int]) -> float:
    """Total log-probability of ``labels`` summed over all alignments."""
    with nx.no_grad():
        return -float(model.loss(features, labels).value)
