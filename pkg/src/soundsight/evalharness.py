"""Measurement suite: nearest-medoid and linear-probe evaluation of the
joint space, policy success rates, and label accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Linear, Tensor


class EmptyClassError(ValueError):
    pass


@dataclass
class Medoids:
    """``centers[i]`` is the medoid of intent ``i``; row ``M`` is the empty
    intent (the origin under centering)."""
    centers: np.ndarray
    members: list[int | None] = field(default_factory=list)

    @property
    def intent_count(self) -> int:
        return len(self.centers) - 1


def _medoid_index(vectors: np.ndarray) -> int:
    # cosine similarity; gated-zero rows contribute nothing and are never chosen
    norms = np.linalg.norm(vectors, axis=1)
    unit = np.divide(vectors, norms[:, None], out=np.zeros_like(vectors), where=norms[:, None] > 0)
    totals = (unit @ unit.T).sum(axis=1)
    totals[norms == 0] = -np.inf
    return int(np.argmax(totals))


def compute_medoids(image_v: np.ndarray, sound_v: np.ndarray, labels: Sequence[int], intent_count: int,
                    centered: bool = True) -> Medoids:
    """Medoids over the pooled image and sound joint-space vectors.

    ``image_v`` and ``sound_v`` are the gated outputs ``v`` of a pair set
    whose intents are ``labels``.  Pool order is all images then all sounds,
    which fixes the lowest-index tie rule.
    """
    labels = np.asarray(labels)
    pool = np.concatenate([np.asarray(image_v), np.asarray(sound_v)])
    pool_labels = np.concatenate([labels, labels])
    classes = intent_count + 1
    centers = np.zeros((classes, pool.shape[1]))
    members: list[int | None] = []
    for c in range(classes):
        if c == intent_count and centered:
            members.append(None)
            continue
        idx = np.flatnonzero(pool_labels == c)
        if len(idx) == 0 or not np.linalg.norm(pool[idx], axis=1).any():
            raise EmptyClassError(f"intent {c} has no non-zero embedding")
        best = idx[_medoid_index(pool[idx])]
        centers[c] = pool[best]
        members.append(int(best))
    return Medoids(centers, members)


def nn_classify(medoids: Medoids, v: np.ndarray) -> np.ndarray | int:
    """``argmax_i v . C_i``; ``np.argmax`` returns the first maximum, so ties
    go to the lowest intent index.

    A vector the gate zeroed scores 0 against every medoid and carries no
    direction; it is assigned the empty intent outright when the empty
    medoid is the origin.
    """
    v = np.asarray(v)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    pred = np.argmax(v @ medoids.centers.T, axis=1)
    if not medoids.centers[-1].any():
        pred[~v.any(axis=1)] = medoids.intent_count
    return int(pred[0]) if single else pred


def nn_accuracy(medoids: Medoids, image_v, sound_v, labels) -> dict[str, float]:
    labels = np.asarray(labels)
    img = float(np.mean(nn_classify(medoids, image_v) == labels))
    snd = float(np.mean(nn_classify(medoids, sound_v) == labels))
    return {"NN_img": img, "NN_snd": snd, "NN": (img + snd) / 2}


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def train_linear_probe(features: np.ndarray, labels: np.ndarray, classes: int, epochs: int = 100,
                       lr: float = 1e-2, batch_size: int = 64, seed: int = 0) -> Linear:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("linear probe needs at least two classes")
    rng = np.random.default_rng([seed, 13])
    with nx.default_dtype(np.float64):
        layer = Linear(features.shape[1], classes, rng, gain=1.0)
    # the frozen features are standardized with training-split statistics
    opt = nx.Adam(layer.parameters(), lr=lr)
    x = np.asarray(features, dtype=np.float64)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            logits = layer(Tensor(x[idx]))
            logp = nx.log_softmax(logits, axis=1)
            loss = -nx.take_along(logp, labels[idx][:, None], axis=1).mean()
            loss.backward()
            opt.step()
    return layer


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0) + 1e-8
    return (train - mu) / sd, (test - mu) / sd


def probe_accuracy(train_h: np.ndarray, train_y, test_h: np.ndarray, test_y, classes: int,
                   epochs: int = 100, lr: float = 1e-2, seed: int = 0) -> float:
    train_h, test_h = _standardize(np.asarray(train_h, np.float64), np.asarray(test_h, np.float64))
    layer = train_linear_probe(train_h, np.asarray(train_y), classes, epochs=epochs, lr=lr, seed=seed)
    with nx.no_grad():
        pred = np.argmax(layer(Tensor(test_h)).data, axis=1)
    return float(np.mean(pred == np.asarray(test_y)))


def linear_probe(train: tuple[np.ndarray, np.ndarray, np.ndarray], test: tuple[np.ndarray, np.ndarray, np.ndarray],
                 classes: int, epochs: int = 100, lr: float = 1e-2, seed: int = 0) -> dict[str, float]:
    """``train`` and ``test`` are ``(h_image, h_sound, labels)`` triples of
    frozen encoder outputs.  Returns image, sound and average accuracy."""
    img = probe_accuracy(train[0], train[2], test[0], test[2], classes, epochs, lr, seed)
    snd = probe_accuracy(train[1], train[2], test[1], test[2], classes, epochs, lr, seed)
    return {"LL_img": img, "LL_snd": snd, "LL_avg": (img + snd) / 2}


def write_table_csv(path: str | Path, rows: list[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


# ---------------------------------------------------------------------------
# label accounting
# ---------------------------------------------------------------------------

LABEL_WEIGHTS = {"var_pair": 1, "triplet": 2, "e2e_step": 3}


@dataclass
class LabelLedger:
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in LABEL_WEIGHTS})

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def record_labels(ledger: LabelLedger, source: str, count: int) -> LabelLedger:
    if source not in LABEL_WEIGHTS:
        raise KeyError(f"unknown label source {source!r}")
    if count < 0:
        raise ValueError("count must be non-negative")
    ledger.counts[source] += count * LABEL_WEIGHTS[source]
    return ledger
