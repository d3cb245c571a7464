"""Dual-branch visual-audio representation (VAR++) and its objectives.

Images and MFCC matrices are encoded to representations ``h``, projected
onto the unit hypersphere (``z``), and scored by a binary head giving the
probability ``e_hat`` that the input carries an intent.  The joint-space
output ``v`` equals ``z`` when ``e_hat >= 0.5`` and the zero vector
otherwise, which parks every empty-intent input at the origin.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .numerics import Conv2d, Linear, MLP, Module, Tensor

log = logging.getLogger(__name__)

BCE_CLIP = 1e-7


@dataclass(frozen=True)
class VarConfig:
    image_size: int = 64
    frames: int = 100
    coefficients: int = 13
    intent_count: int = 4
    d_image: int = 128
    d_sound: int = 128
    d_joint: int = 32
    image_channels: tuple[int, ...] = (16, 32, 32)
    sound_channels: tuple[int, ...] = (16, 32)
    temperature: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 0.5
    margin: float = 0.5
    centered: bool = True
    loss: str = "supcon"
    sound_scale: float = 0.05
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 20
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("supcon", "triplet"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class VarOutput:
    h: np.ndarray
    z: np.ndarray
    e_hat: np.ndarray
    v: np.ndarray


def gate(z: np.ndarray, e_hat: np.ndarray, centered: bool = True) -> np.ndarray:
    """Zero the rows of ``z`` whose intent probability falls below 0.5."""
    if not centered:
        return z.copy()
    keep = (np.asarray(e_hat).reshape(-1) >= 0.5)[:, None]
    return np.where(keep, z, 0.0)


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


class ImageEncoder(Module):
    def __init__(self, cfg: VarConfig, rng, dtype):
        chans = (3,) + tuple(cfg.image_channels)
        self.convs = [Conv2d(a, b, 3, rng, stride=2, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        side = cfg.image_size
        for _ in self.convs:
            side = _conv_out(side, 3, 2)
        self.fc = Linear(chans[-1] * side * side, cfg.d_image, rng, dtype=dtype)

    def __call__(self, images: Tensor) -> Tensor:
        x = images
        for conv in self.convs:
            x = nx.relu(conv(x))
        return nx.relu(self.fc(x.reshape(x.shape[0], -1)))


class SoundEncoder(Module):
    def __init__(self, cfg: VarConfig, rng, dtype):
        chans = (1,) + tuple(cfg.sound_channels)
        self.convs = [Conv2d(a, b, 3, rng, stride=(2, 1), dtype=dtype) for a, b in zip(chans[:-1], chans[1:])]
        rows, cols = cfg.frames, cfg.coefficients
        for _ in self.convs:
            rows, cols = _conv_out(rows, 3, 2), _conv_out(cols, 3, 1)
        self.fc = Linear(chans[-1] * rows * cols, cfg.d_sound, rng, dtype=dtype)

    def __call__(self, sounds: Tensor) -> Tensor:
        x = sounds
        for conv in self.convs:
            x = nx.relu(conv(x))
        return nx.relu(self.fc(x.reshape(x.shape[0], -1)))


class VarModel(Module):
    """Encoders ``f``, projection heads ``g`` and binary heads ``b`` for
    both modalities."""

    def __init__(self, cfg: VarConfig = VarConfig(), dtype=None):
        self.cfg = cfg
        dtype = np.dtype(dtype or cfg.dtype).type
        self.dtype = dtype
        rng = np.random.default_rng([cfg.seed, 5501])
        self.f_image = ImageEncoder(cfg, rng, dtype)
        self.f_sound = SoundEncoder(cfg, rng, dtype)
        self.g_image = MLP([cfg.d_image, cfg.d_image, cfg.d_joint], rng, dtype=dtype)
        self.g_sound = MLP([cfg.d_sound, cfg.d_sound, cfg.d_joint], rng, dtype=dtype)
        self.b_image = Linear(cfg.d_image, 1, rng, gain=0.1, dtype=dtype)
        self.b_sound = Linear(cfg.d_sound, 1, rng, gain=0.1, dtype=dtype)
        # the all-zero sound drives h to zero at init; random biases keep
        # its projection off the origin so normalization stays defined
        for head in (self.g_image, self.g_sound):
            for layer in head.layers:
                layer.bias.data[...] = rng.normal(0.0, 0.1, layer.bias.shape)

    # -- input plumbing ------------------------------------------------------
    def image_tensor(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images)
        n = self.cfg.image_size
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (n, n, 3):
            raise ValueError(f"expected images of shape (B, {n}, {n}, 3), got {images.shape}")
        return Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=self.dtype))

    def sound_tensor(self, sounds: np.ndarray) -> Tensor:
        sounds = np.asarray(sounds)
        shape = (self.cfg.frames, self.cfg.coefficients)
        if sounds.ndim == 2:
            sounds = sounds[None]
        if sounds.shape[1:] != shape:
            raise ValueError(f"expected sounds of shape (B, {shape[0]}, {shape[1]}), got {sounds.shape}")
        scaled = sounds[:, None].astype(self.dtype) * self.dtype(self.cfg.sound_scale)
        return Tensor(scaled)

    # -- differentiable heads ------------------------------------------------
    def image_heads(self, images: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        h = self.f_image(self.image_tensor(images))
        return h, nx.l2_normalize(self.g_image(h)), self.b_image(h)

    def sound_heads(self, sounds: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        h = self.f_sound(self.sound_tensor(sounds))
        return h, nx.l2_normalize(self.g_sound(h)), self.b_sound(h)

    # -- frozen inference ----------------------------------------------------
    def _output(self, heads) -> VarOutput:
        h, z, logit = heads
        e_hat = nx.sigmoid(logit).data.reshape(-1)
        return VarOutput(h.data, z.data, e_hat, gate(z.data, e_hat, self.cfg.centered))

    def encode_image(self, images: np.ndarray, chunk: int = 256) -> VarOutput:
        with nx.no_grad():
            parts = [self._output(self.image_heads(images[i : i + chunk])) for i in range(0, len(images), chunk)] \
                if np.asarray(images).ndim == 4 else [self._output(self.image_heads(images))]
        return _merge(parts)

    def encode_sound(self, sounds: np.ndarray, chunk: int = 256) -> VarOutput:
        with nx.no_grad():
            parts = [self._output(self.sound_heads(sounds[i : i + chunk])) for i in range(0, len(sounds), chunk)] \
                if np.asarray(sounds).ndim == 3 else [self._output(self.sound_heads(sounds))]
        return _merge(parts)


def _merge(parts: list[VarOutput]) -> VarOutput:
    if len(parts) == 1:
        return parts[0]
    return VarOutput(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("h", "z", "e_hat", "v")))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _contrastive(z: Tensor, positives: np.ndarray, tau: float) -> Tensor:
    """``-sum_k mean_{p in P(k)} log softmax_{j != k}(z_k . z_j / tau)[p]``
    over anchors with at least one positive."""
    count = z.shape[0]
    eye = np.eye(count, dtype=bool)
    logits = nx.matmul(z, z.T) * (1.0 / tau)
    masked = nx.where(~eye, logits, Tensor(np.full((count, count), -np.inf, dtype=z.dtype)))
    log_prob = masked - nx.logsumexp(masked, axis=1, keepdims=True)
    sizes = positives.sum(axis=1)
    anchors = sizes > 0
    if not anchors.any():
        raise ValueError("no anchor has a positive; every label is unique")
    picked = nx.where(positives, log_prob, 0.0)
    per_anchor = picked.sum(axis=1) * Tensor(np.where(anchors, 1.0 / np.maximum(sizes, 1), 0.0).astype(z.dtype))
    return -per_anchor.sum()


def supcon_loss(z: Tensor, labels: Sequence[int], tau: float) -> Tensor:
    labels = np.asarray(labels)
    if z.shape[0] < 2 or len(labels) != z.shape[0]:
        raise ValueError("need at least two embeddings with one label each")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    positives = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    return _contrastive(z, positives, tau)


def ssc_loss(z: Tensor, pairing: Sequence[int], tau: float) -> Tensor:
    pairing = np.asarray(pairing)
    count = z.shape[0]
    if len(pairing) != count:
        raise ValueError("pairing must name one partner per embedding")
    idx = np.arange(count)
    if np.any(pairing == idx) or np.any(pairing[pairing] != idx):
        raise ValueError("pairing must be an involution without fixed points")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    positives = np.zeros((count, count), dtype=bool)
    positives[idx, pairing] = True
    return _contrastive(z, positives, tau)


def cross_pairing(n: int) -> np.ndarray:
    """Partner indices when the first ``n`` rows are images and the next
    ``n`` their sounds."""
    return np.concatenate([np.arange(n, 2 * n), np.arange(n)])


def triplet_loss(z_anchor: Tensor, z_pos: Tensor, z_neg: Tensor, margin: float) -> Tensor:
    """Mean over rows of ``max(0, a.n - a.p + margin)``."""
    gap = nx.dot(z_anchor, z_neg) - nx.dot(z_anchor, z_pos) + margin
    return nx.relu(gap).mean()


def bce(logit: Tensor, target: np.ndarray) -> Tensor:
    """Per-row binary cross entropy on sigmoid probabilities clipped to
    ``[1e-7, 1 - 1e-7]``."""
    p = nx.clip(nx.sigmoid(logit.reshape(-1)), BCE_CLIP, 1.0 - BCE_CLIP)
    target = np.asarray(target, dtype=p.dtype)
    return -(nx.log(p) * target + nx.log(1.0 - p) * (1.0 - target))


def _bce_term(logit_i: Tensor, logit_s: Tensor, target: np.ndarray) -> Tensor:
    return (bce(logit_i, target) + bce(logit_s, target)).mean()


def var_loss(model: VarModel, images, sounds, labels) -> Tensor:
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("batch needs at least two pairs")
    cfg = model.cfg
    _, z_i, b_i = model.image_heads(images)
    _, z_s, b_s = model.sound_heads(sounds)
    z = nx.concat([z_i, z_s], axis=0)
    loss = supcon_loss(z, np.concatenate([labels, labels]), cfg.temperature) * cfg.alpha1
    if cfg.centered:
        e = (labels != cfg.intent_count).astype(np.float64)
        loss = loss + _bce_term(b_i, b_s, e) * cfg.alpha2
    return loss


def finetune_loss(model: VarModel, images, sounds) -> Tensor:
    """SSC between each image and its own sound plus the emptiness BCE,
    with emptiness read off the all-zero sound matrix."""
    sounds = np.asarray(sounds)
    n = len(sounds)
    if n < 2:
        raise ValueError("batch needs at least two pairs")
    cfg = model.cfg
    _, z_i, b_i = model.image_heads(images)
    _, z_s, b_s = model.sound_heads(sounds)
    z = nx.concat([z_i, z_s], axis=0)
    loss = ssc_loss(z, cross_pairing(n), cfg.temperature) * cfg.alpha1
    if cfg.centered:
        e = sounds.reshape(n, -1).any(axis=1).astype(np.float64)
        loss = loss + _bce_term(b_i, b_s, e) * cfg.alpha2
    return loss


def triplet_batch_loss(model: VarModel, images, sounds_pos, sounds_neg) -> Tensor:
    _, z_i, _ = model.image_heads(images)
    _, z_p, _ = model.sound_heads(sounds_pos)
    _, z_n, _ = model.sound_heads(sounds_neg)
    return triplet_loss(z_i, z_p, z_n, model.cfg.margin)


# ---------------------------------------------------------------------------
# data and training
# ---------------------------------------------------------------------------

@dataclass
class PairArrays:
    images: np.ndarray
    sounds: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def from_pairs(cls, pairs) -> "PairArrays":
        images = np.stack([p.image for p in pairs]).astype(np.float32)
        sounds = np.stack([p.sound for p in pairs])
        labels = None
        if pairs and hasattr(pairs[0], "intent"):
            labels = np.array([p.intent for p in pairs])
        return cls(images, sounds, labels)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "PairArrays":
        return PairArrays(self.images[idx], self.sounds[idx], None if self.labels is None else self.labels[idx])


@dataclass
class TrainResult:
    model: VarModel
    losses: list[float] = field(default_factory=list)


def _batches(count: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch):
        idx = order[start : start + batch]
        if len(idx) >= 2:
            yield idx


def make_triplet_negatives(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each pair, the index of a pair with a different label."""
    out = np.empty(len(labels), dtype=np.int64)
    for i, y in enumerate(labels):
        candidates = np.flatnonzero(labels != y)
        out[i] = candidates[rng.integers(len(candidates))]
    return out


def train_var(model: VarModel, data: PairArrays, epochs: int | None = None, batch_size: int | None = None,
              lr: float | None = None, seed: int = 0, checkpoint: str | Path | None = None,
              unlabeled: bool = False) -> TrainResult:
    """Adam over shuffled minibatches.  ``unlabeled`` switches the objective
    to :func:`finetune_loss`; otherwise the config picks SupCon+BCE or the
    triplet baseline."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = batch_size or cfg.batch_size
    if not unlabeled:
        if data.labels is None:
            raise ValueError("labeled training needs intent labels")
        if len(np.unique(data.labels)) < 2:
            raise ValueError("degenerate dataset: a single class")
    if len(data) < 2:
        raise ValueError("dataset needs at least two pairs")
    rng = np.random.default_rng([seed, 7])
    opt = nx.Adam(model.parameters(), lr=lr or cfg.lr)
    negatives = None
    if cfg.loss == "triplet" and not unlabeled:
        negatives = make_triplet_negatives(data.labels, rng)
    result = TrainResult(model)
    for epoch in range(epochs):
        total, batches = 0.0, 0
        for idx in _batches(len(data), batch_size, rng):
            opt.zero_grad()
            if unlabeled:
                loss = finetune_loss(model, data.images[idx], data.sounds[idx])
            elif negatives is not None:
                loss = triplet_batch_loss(model, data.images[idx], data.sounds[idx], data.sounds[negatives[idx]])
            else:
                loss = var_loss(model, data.images[idx], data.sounds[idx], data.labels[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data)
            batches += 1
        result.losses.append(total / max(batches, 1))
        log.info("var epoch %d loss %.4f", epoch + 1, result.losses[-1])
    if checkpoint is not None:
        save_var(model, checkpoint)
    return result


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _config_dict(cfg: VarConfig) -> dict:
    out = asdict(cfg)
    out["image_channels"] = list(cfg.image_channels)
    out["sound_channels"] = list(cfg.sound_channels)
    return out


def var_config_from_dict(raw: dict) -> VarConfig:
    raw = dict(raw)
    for key in ("image_channels", "sound_channels"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return VarConfig(**raw)


def save_var(model: VarModel, path: str | Path, extra: dict | None = None) -> Path:
    config = {"var": _config_dict(model.cfg)}
    if extra:
        config.update(extra)
    return save_checkpoint(path, "var", config, model.state_dict())


def load_var(path: str | Path) -> VarModel:
    config, tensors = load_checkpoint(path, kind="var")
    try:
        cfg = var_config_from_dict(config["var"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad VAR config ({exc})") from exc
    model = VarModel(cfg)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model


def with_config(model: VarModel, **changes) -> VarModel:
    """Copy of ``model`` with config fields replaced and weights carried over."""
    clone = VarModel(replace(model.cfg, **changes), dtype=model.dtype)
    clone.load_state_dict(model.state_dict())
    return clone
