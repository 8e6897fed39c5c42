"""Synthetic transduction data, feature post-processing and file formats.

Dataset files hold one JSON object per line::

    {"id": "utt00000", "shape": [T, F], "features": [...row-major...], "labels": [...]}

Checkpoints are a single binary container: a magic line, the byte length
of a JSON header, the header itself (model config plus one entry per
tensor with name, shape, element type and payload offset) and then the
row-major little-endian payloads back to back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    labels: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.id}: features must be a nonempty T x F matrix")
        self.labels = [int(y) for y in self.labels]


@dataclass(frozen=True)
class ToyTaskSpec:
    """Each label emits its prototype vector for a random number of frames,
    plus Gaussian noise.  Adjacent labels never repeat, so a label sequence
    is recoverable from its frames."""

    vocab_size: int = 8
    feature_dim: int = 16
    min_frames: int = 2
    max_frames: int = 5
    min_labels: int = 3
    max_labels: int = 8
    noise: float = 0.3
    n_utterances: int = 500
    seed: int = 42
    prototype_seed: int | None = None  # defaults to seed; share it for held-out splits

    def __post_init__(self):
        if min(self.vocab_size, self.feature_dim, self.min_frames, self.min_labels,
               self.n_utterances) < 1:
            raise ValueError("toy task sizes must be positive")
        if self.vocab_size < 2:
            raise ValueError("need at least two symbols to avoid adjacent repeats")
        if self.max_frames < self.min_frames or self.max_labels < self.min_labels:
            raise ValueError("max must not be below min")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def prototypes(spec: ToyTaskSpec) -> np.ndarray:
    """Per-symbol mean feature vectors (``vocab_size x feature_dim``)."""
    seed = spec.seed if spec.prototype_seed is None else spec.prototype_seed
    return np.random.default_rng([seed, 0]).normal(size=(spec.vocab_size, spec.feature_dim))


def generate_toy_dataset(spec: ToyTaskSpec) -> list[Utterance]:
    protos = prototypes(spec)
    rng = np.random.default_rng([spec.seed, 1])
    data = []
    for i in range(spec.n_utterances):
        n = int(rng.integers(spec.min_labels, spec.max_labels + 1))
        labels = [int(rng.integers(spec.vocab_size))]
        while len(labels) < n:
            # draw from the other vocab_size - 1 symbols
            y = int(rng.integers(spec.vocab_size - 1))
            labels.append(y + (y >= labels[-1]))
        frames = []
        for y in labels:
            repeat = int(rng.integers(spec.min_frames, spec.max_frames + 1))
            frames.extend([protos[y]] * repeat)
        feats = np.array(frames)
        feats = feats + spec.noise * rng.normal(size=feats.shape)
        data.append(Utterance(f"utt{i:05d}", feats, labels))
    return data


# ---------------------------------------------------------------- features

def _time_difference(x: np.ndarray) -> np.ndarray:
    T = x.shape[0]
    if T == 1:
        return np.zeros_like(x)
    if T == 2:
        return np.repeat(x[1:] - x[:1], 2, axis=0)
    d = np.empty_like(x)
    d[1:-1] = 0.5 * (x[2:] - x[:-2])
    d[0], d[-1] = d[1], d[-2]
    return d


def add_deltas(features: np.ndarray) -> np.ndarray:
    """Append first and second time derivatives: ``T x F -> T x 3F``.

    Interior frames use central differences; the first and last frame copy
    their neighbour's value.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a nonempty T x F matrix, got shape {x.shape}")
    delta = _time_difference(x)
    return np.concatenate([x, delta, _time_difference(delta)], axis=1)


def stack_frames(features: np.ndarray) -> np.ndarray:
    """Concatenate consecutive frame pairs: ``T x F -> ceil(T/2) x 2F``.

    An odd trailing frame is paired with a copy of itself.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a nonempty T x F matrix, got shape {x.shape}")
    if x.shape[0] % 2:
        x = np.concatenate([x, x[-1:]], axis=0)
    return x.reshape(x.shape[0] // 2, 2 * x.shape[1])


# ---------------------------------------------------------------- datasets

def write_dataset(data: Iterable[Utterance], path) -> None:
    with open(path, "w") as fh:
        for utt in data:
            record = {"id": utt.id, "shape": list(utt.features.shape),
                      "features": utt.features.ravel().tolist(), "labels": list(utt.labels)}
            fh.write(json.dumps(record) + "\n")


def read_dataset(path) -> list[Utterance]:
    data = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.array(rec["features"], dtype=np.float64).reshape(rec["shape"])
                data.append(Utterance(str(rec["id"]), feats, rec.get("labels", [])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from None
    return data


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SNURNNT-CKPT 1\n"


def save_checkpoint(path, model, metadata: dict | None = None) -> None:
    tensors, payloads, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].value)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset})
        raw = le.tobytes()
        payloads.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "metadata": metadata or {}, "tensors": tensors}
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(blob)}\n".encode())
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` from a checkpoint container."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        size = int(fh.readline())
        header = json.loads(fh.read(size))
        body = fh.read()
    arrays = {}
    for t in header["tensors"]:
        dtype = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(dtype.newbyteorder("="))
    return header, arrays


def load_checkpoint(path):
    """Rebuild a :class:`~snu_rnnt.transducer.TransducerModel` from disk."""
    from .transducer import TransducerConfig, TransducerModel

    header, arrays = read_checkpoint(path)
    model = TransducerModel(TransducerConfig.from_dict(header["config"]))
    model.load_state_dict(arrays)
    return model, header.get("metadata", {})


def labels_to_text(labels: Sequence[int]) -> str:
    return " ".join(str(y) for y in labels)
