"""Chunk sampling, the Adam training loop, and WA / UA / SER metrics."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .models import Model

log = logging.getLogger(__name__)

SUBWINDOW_MS = 25.0
MAX_DRAWS = 32


@dataclass
class ChunkPolicy:
    chunk_ms: float = 250.0
    energy_filter: bool = True
    energy_quantile: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.chunk_ms <= 0:
            raise ValueError("chunk_ms must be positive")
        if not 0 <= self.energy_quantile <= 1:
            raise ValueError("energy_quantile must be in [0, 1]")


def chunk_samples(policy: ChunkPolicy, sample_rate) -> int:
    return int(round(sample_rate * policy.chunk_ms / 1000.0))


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def sample_chunk(signal, policy: ChunkPolicy, sample_rate=16000, rng=None):
    """Cut one chunk from ``signal``.

    With the energy filter on, random windows are drawn until one's RMS reaches
    the ``energy_quantile`` of the signal's 25 ms sub-window RMS values; after
    32 draws the loudest candidate wins.  ``rng`` defaults to a generator
    seeded from ``policy.seed``.
    """
    signal = np.asarray(signal, dtype=float)
    n = chunk_samples(policy, sample_rate)
    if len(signal) < n:
        raise ValueError(f"signal has {len(signal)} samples; a {policy.chunk_ms:g} ms chunk "
                         f"needs at least {n}")
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    last = len(signal) - n
    if last == 0:
        return signal.copy()
    if not policy.energy_filter:
        start = int(rng.integers(0, last + 1))
        return signal[start:start + n].copy()
    sub = max(1, int(round(sample_rate * SUBWINDOW_MS / 1000.0)))
    nsub = len(signal) // sub
    sub_rms = np.sqrt(np.mean(signal[:nsub * sub].reshape(nsub, sub) ** 2, axis=1))
    threshold = float(np.quantile(sub_rms, policy.energy_quantile))
    best, best_rms = 0, -1.0
    for _ in range(MAX_DRAWS):
        start = int(rng.integers(0, last + 1))
        r = _rms(signal[start:start + n])
        if r >= threshold:
            return signal[start:start + n].copy()
        if r > best_rms:
            best, best_rms = start, r
    return signal[best:best + n].copy()


# -- metrics ----------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Rows are gold classes, columns predicted classes."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (4, 4) or np.any(self.counts < 0):
            raise ValueError("confusion matrix must be 4x4 with non-negative counts")

    @classmethod
    def from_labels(cls, gold, pred) -> "ConfusionMatrix":
        cm = np.zeros((4, 4), dtype=np.int64)
        np.add.at(cm, (np.asarray(gold, int), np.asarray(pred, int)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self):
        return self.counts.tolist()


def _check_total(cm):
    if cm.total == 0:
        raise ValueError("confusion matrix is all zeros")


def weighted_accuracy(cm: ConfusionMatrix) -> float:
    _check_total(cm)
    return float(np.trace(cm.counts) / cm.total)


def unweighted_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes that have gold instances."""
    _check_total(cm)
    support = cm.counts.sum(axis=1)
    present = support > 0
    if not present.all():
        missing = [i for i in range(4) if not present[i]]
        warnings.warn(f"classes {missing} have no gold instances; excluded from UA", stacklevel=2)
    recalls = np.diag(cm.counts)[present] / support[present]
    return float(recalls.mean())


def sentence_error_rate(cm: ConfusionMatrix) -> float:
    """Fraction of misclassified sentences (one decision per sentence)."""
    return 1.0 - weighted_accuracy(cm)


def metrics(cm: ConfusionMatrix) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {"wa": weighted_accuracy(cm), "ua": unweighted_accuracy(cm),
                "ser": sentence_error_rate(cm)}


# -- optimisation --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    # cutoff thetas live in Hz, so they take a proportionally larger step
    cutoff_lr_scale: float = 20000.0
    seed: int = 0


class Adam:
    def __init__(self, params: dict, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            lr = c.lr * (c.cutoff_lr_scale if k.startswith("ac.theta") else 1.0)
            p -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


def stratified_split(labels, val_fraction=0.2, seed=0):
    """Seeded per-class split; returns (train_idx, val_idx), each sorted."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for k in range(4):
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        nv = int(round(len(idx) * val_fraction))
        val.extend(idx[:nv])
        train.extend(idx[nv:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def add(self, epoch, split, loss, m):
        self.records.append({"epoch": epoch, "split": split, "loss": float(loss),
                             "wa": m["wa"], "ua": m["ua"], "ser": m["ser"]})

    def series(self, split, key):
        return [r[key] for r in self.records if r["split"] == split]

    def epochs_to_reach(self, threshold, split="val", key="wa"):
        """First epoch whose ``key`` reaches ``threshold``, or None."""
        for r in self.records:
            if r["split"] == split and r[key] >= threshold:
                return r["epoch"]
        return None

    def to_jsonl(self, extra: dict | None = None) -> str:
        lines = []
        for r in self.records:
            rec = dict(r)
            if extra:
                rec.update(extra)
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def _chunk_batch(model, dataset, idx, policy, rng):
    fs = model.config.sample_rate
    return np.stack([sample_chunk(dataset[i].samples, policy, fs, rng) for i in idx])


def _inputs(model, dataset, idx, policy, rng):
    chunks = _chunk_batch(model, dataset, idx, policy, rng) if model.uses_acoustic else None
    tokens = [dataset[i].tokens for i in idx] if model.uses_linguistic else None
    return chunks, tokens


def predict_posteriors(model: Model, dataset, idx, policy: ChunkPolicy, batch_size=64):
    """Eval-mode posteriors; the acoustic chunk choice is seeded per utterance index."""
    idx = np.asarray(idx, dtype=int)
    K = model.config.num_classes
    out = np.zeros((len(idx), K))
    n_chunks = model.config.eval_chunks if model.uses_acoustic else 1
    for s in range(0, len(idx), batch_size):
        part = idx[s:s + batch_size]
        acc = np.zeros((len(part), K))
        for j in range(n_chunks):
            chunks = None
            if model.uses_acoustic:
                fs = model.config.sample_rate
                chunks = np.stack([
                    sample_chunk(dataset[i].samples, policy, fs,
                                 np.random.default_rng([policy.seed, int(i), j]))
                    for i in part])
            tokens = [dataset[i].tokens for i in part] if model.uses_linguistic else None
            acc += model.posteriors(chunks, tokens)
        out[s:s + len(part)] = acc / n_chunks
    return out


def evaluate(model: Model, dataset, idx, policy: ChunkPolicy):
    """(mean loss, ConfusionMatrix, posteriors) over ``dataset[idx]``."""
    post = predict_posteriors(model, dataset, idx, policy)
    gold = np.array([dataset[i].label for i in idx])
    loss = float(-np.mean(np.log(np.maximum(post[np.arange(len(idx)), gold], 1e-300))))
    return loss, ConfusionMatrix.from_labels(gold, post.argmax(axis=1)), post


def _batches(n, size):
    # a trailing batch of one would break batch statistics; fold it into its neighbour
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return list(zip(bounds[:-1], bounds[1:]))


class NonFiniteLoss(RuntimeError):
    pass


def train(model: Model, dataset, optimizer_config: OptimizerConfig | None = None, epochs=10,
          policy: ChunkPolicy | None = None, train_idx=None, val_idx=None, callback=None):
    """Minibatch Adam on softmax cross-entropy.

    Without explicit indices the dataset is split 80/20 stratified by class.
    Train-split metrics come from the train-mode predictions made during the
    epoch; validation metrics from an eval-mode pass afterwards.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = optimizer_config or OptimizerConfig()
    policy = policy or ChunkPolicy(chunk_ms=model.config.chunk_ms)
    if train_idx is None:
        if len(dataset) < 5:
            train_idx, val_idx = np.arange(len(dataset)), np.array([], dtype=int)
        else:
            train_idx, val_idx = stratified_split([u.label for u in dataset], 0.2, cfg.seed)
    train_idx = np.asarray(train_idx, dtype=int)
    val_idx = np.asarray(val_idx if val_idx is not None else [], dtype=int)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg)
    history = TrainingLog()
    labels = np.array([u.label for u in dataset])
    for epoch in range(1, epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total, preds = 0.0, np.empty(len(order), dtype=int)
        for s, e in _batches(len(order), cfg.batch_size):
            part = order[s:e]
            chunks, tokens = _inputs(model, dataset, part, policy, rng)
            loss, grads, logits = model.loss_and_grads(labels[part], chunks, tokens, mode="train")
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss {loss} at epoch {epoch}, batch starting {s}")
            opt.step(model.params, grads)
            total += loss * len(part)
            preds[s:s + len(part)] = logits.argmax(axis=1)
        cm = ConfusionMatrix.from_labels(labels[order], preds)
        history.add(epoch, "train", total / len(order), metrics(cm))
        if len(val_idx):
            vloss, vcm, _ = evaluate(model, dataset, val_idx, policy)
            history.add(epoch, "val", vloss, metrics(vcm))
        log.info("epoch %d %s", epoch, history.records[-1])
        if callback is not None and callback(epoch, history) is False:
            break
    return history
