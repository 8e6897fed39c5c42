"""scikit-learn style wrappers.

``RNNTransducer`` trains and decodes on lists of variable-length feature
matrices; ``DeltaFeatures`` and ``FrameStacker`` are the feature-pipeline
transformers, so the usual ``Pipeline`` composition works::

    pipe = make_pipeline(DeltaFeatures(), FrameStacker(), RNNTransducer(...))
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import Utterance, add_deltas, stack_frames
from .training import TrainConfig, fit, token_error_rate
from .transducer import TransducerConfig, TransducerModel


def check_sequences(X, n_features: int | None = None) -> list[np.ndarray]:
    """Validate a list of ``T x F`` float matrices with a common ``F``."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    seqs = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"sequence {i} must be a nonempty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"sequence {i} contains NaN or Inf")
        seqs.append(arr)
    if not seqs:
        raise ValueError("no sequences given")
    widths = {s.shape[1] for s in seqs}
    if len(widths) != 1:
        raise ValueError(f"sequences differ in feature width: {sorted(widths)}")
    if n_features is not None and widths != {n_features}:
        raise ValueError(f"expected {n_features} features per frame, got {widths.pop()}")
    return seqs


def check_label_sequences(y, n_seqs: int, vocab_size: int | None = None) -> list[list[int]]:
    labels = [[int(v) for v in seq] for seq in y]
    if len(labels) != n_seqs:
        raise ValueError(f"{n_seqs} feature sequences but {len(labels)} label sequences")
    if vocab_size is not None:
        for seq in labels:
            if any(not 0 <= v < vocab_size for v in seq):
                raise ValueError(f"labels must lie in [0, {vocab_size})")
    return labels


class DeltaFeatures(TransformerMixin, BaseEstimator):
    """Append first and second time differences to every sequence."""

    def fit(self, X, y=None):
        self.n_features_in_ = check_sequences(X)[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return [add_deltas(x) for x in check_sequences(X, self.n_features_in_)]


class FrameStacker(TransformerMixin, BaseEstimator):
    """Halve the frame rate by concatenating consecutive frame pairs."""

    def fit(self, X, y=None):
        self.n_features_in_ = check_sequences(X)[0].shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return [stack_frames(x) for x in check_sequences(X, self.n_features_in_)]


class RNNTransducer(BaseEstimator):
    """RNN-T sequence transducer with selectable recurrent units.

    Parameters mirror :class:`~snu_rnnt.transducer.TransducerConfig` and
    :class:`~snu_rnnt.training.TrainConfig`.  ``vocab_size=None`` infers it
    from the training labels.
    """

    def __init__(self, encoder_type="sSNU-o R", encoder_layers=2, encoder_units=64,
                 prediction_type="sSNU-a R", prediction_units=64, embedding_dim=10,
                 joint_dim=64, vocab_size=None, d=0.9, rho=0.9, beta=0.1, epochs=20,
                 batch_size=8, peak_lr=5e-3, clip=10.0, p_w=0.25, p_e=0.05,
                 weight_decay=0.01, decoder="greedy", beam_width=16, random_state=0):
        self.encoder_type = encoder_type
        self.encoder_layers = encoder_layers
        self.encoder_units = encoder_units
        self.prediction_type = prediction_type
        self.prediction_units = prediction_units
        self.embedding_dim = embedding_dim
        self.joint_dim = joint_dim
        self.vocab_size = vocab_size
        self.d = d
        self.rho = rho
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.clip = clip
        self.p_w = p_w
        self.p_e = p_e
        self.weight_decay = weight_decay
        self.decoder = decoder
        self.beam_width = beam_width
        self.random_state = random_state

    def _model_config(self, n_features: int, vocab_size: int) -> TransducerConfig:
        return TransducerConfig(
            input_size=n_features, vocab_size=vocab_size, encoder_type=self.encoder_type,
            encoder_layers=self.encoder_layers, encoder_units=self.encoder_units,
            prediction_type=self.prediction_type, prediction_units=self.prediction_units,
            embedding_dim=self.embedding_dim, joint_dim=self.joint_dim,
            d=self.d, rho=self.rho, beta=self.beta)

    def fit(self, X, y, eval_set=None):
        seqs = check_sequences(X)
        labels = check_label_sequences(y, len(seqs), self.vocab_size)
        vocab = self.vocab_size or 1 + max((max(s) for s in labels if s), default=0)
        self.n_features_in_ = seqs[0].shape[1]
        self.model_ = TransducerModel(self._model_config(self.n_features_in_, vocab),
                                      seed=self.random_state)
        train = [Utterance(str(i), x, l) for i, (x, l) in enumerate(zip(seqs, labels))]
        held_out = None
        if eval_set is not None:
            ex, ey = eval_set
            ex = check_sequences(ex, self.n_features_in_)
            held_out = [Utterance(str(i), x, l) for i, (x, l) in
                        enumerate(zip(ex, check_label_sequences(ey, len(ex), vocab)))]
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, peak_lr=self.peak_lr,
                             clip=self.clip, p_w=self.p_w, p_e=self.p_e,
                             weight_decay=self.weight_decay, seed=self.random_state)
        self.history_ = fit(self.model_, train, config, eval_data=held_out)
        return self

    def predict(self, X) -> list[list[int]]:
        check_is_fitted(self, "model_")
        seqs = check_sequences(X, self.n_features_in_)
        if self.decoder == "beam":
            return [self.model_.beam_decode(x, self.beam_width).labels for x in seqs]
        if self.decoder != "greedy":
            raise ValueError(f"decoder must be 'greedy' or 'beam', got {self.decoder!r}")
        return [self.model_.greedy_decode(x).labels for x in seqs]

    def score(self, X, y) -> float:
        """``1 - token error rate``."""
        hyps = self.predict(X)
        return 1.0 - token_error_rate(hyps, check_label_sequences(y, len(hyps)))
