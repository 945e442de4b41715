"""Dialogical emotion decoding over per-utterance posteriors.

A labeling of a dialog is scored as

    sum_t  log p_t(y_t)
         + lambda_history * log((count of y_t in y_<t + k) / (t + 4k))
         - shift_penalty * [t > 0 and y_t != y_{t-1}]

and :func:`decode` searches for the best labeling with a beam whose states
carry per-class history counts.  :func:`brute_force_decode` enumerates every
labeling and serves as the exact reference.
"""
from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, stats

NUM_CLASSES = 4
LOG_FLOOR = float(np.log(np.finfo(float).eps))
BRUTE_FORCE_MAX_LEN = 10


@dataclass
class DedConfig:
    lambda_history: float = 0.3
    shift_penalty: float = 0.7
    history_smoothing: float = 1.0
    beam_width: int = 16

    def __post_init__(self):
        if self.lambda_history < 0 or self.shift_penalty < 0:
            raise ValueError("lambda_history and shift_penalty must be >= 0")
        if self.history_smoothing <= 0:
            raise ValueError("history_smoothing must be > 0")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class DialogPosteriors:
    dialog_id: str
    utterance_ids: list
    probs: np.ndarray  # (T, 4)
    gold: list | None = None
    extra: list = field(default_factory=list)  # untouched per-row JSON fields

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2 or self.probs.shape[1] != NUM_CLASSES or len(self.probs) == 0:
            raise ValueError(f"dialog {self.dialog_id}: posteriors must be a non-empty (T, 4) array")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-6):
            raise ValueError(f"dialog {self.dialog_id}: every posterior row must be a probability vector")
        if len(self.utterance_ids) != len(self.probs):
            raise ValueError(f"dialog {self.dialog_id}: {len(self.utterance_ids)} ids for {len(self.probs)} rows")

    @classmethod
    def from_array(cls, probs, dialog_id="d0", gold=None):
        probs = np.asarray(probs, dtype=float)
        return cls(dialog_id, [f"{dialog_id}_{t}" for t in range(len(probs))], probs, gold)

    def __len__(self):
        return len(self.probs)


@dataclass
class DecodedDialog:
    labels: list
    total_score: float
    per_step_scores: list


def _log_probs(dp: DialogPosteriors):
    with np.errstate(divide="ignore"):
        lp = np.log(dp.probs)
    return np.maximum(lp, LOG_FLOOR)


def _terms(logp, counts, t, changed, cfg: DedConfig):
    """Per-candidate score increments at step t.  Shared by every search path."""
    k = cfg.history_smoothing
    prior = np.log((counts + k) / (t + NUM_CLASSES * k))
    return logp + cfg.lambda_history * prior - cfg.shift_penalty * changed


def score_steps(dp: DialogPosteriors, labels, cfg: DedConfig) -> list[float]:
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(dp):
        raise ValueError(f"{len(labels)} labels for a dialog of {len(dp)} utterances")
    if np.any((labels < 0) | (labels >= NUM_CLASSES)):
        raise ValueError("labels must be in 0..3")
    lp = _log_probs(dp)
    counts = np.zeros(NUM_CLASSES)
    out = []
    for t, y in enumerate(labels):
        changed = float(t > 0 and y != labels[t - 1])
        term = _terms(lp[t, y:y + 1], counts[y:y + 1], t, np.array([changed]), cfg)[0]
        out.append(float(term))
        counts[y] += 1
    return out


def score_assignment(dp: DialogPosteriors, labels, cfg: DedConfig) -> float:
    total = 0.0
    for s in score_steps(dp, labels, cfg):
        total += s
    return total


def decode(dp: DialogPosteriors, cfg: DedConfig | None = None) -> DecodedDialog:
    """Beam search; exact when ``beam_width >= 4**T``.

    Ties in score go to the lexicographically smaller label sequence.
    """
    cfg = cfg or DedConfig()
    lp = _log_probs(dp)
    T = len(dp)
    seqs = np.zeros((1, 0), dtype=np.int64)
    counts = np.zeros((1, NUM_CLASSES))
    scores = np.zeros(1)
    steps = np.zeros((1, 0))
    classes = np.arange(NUM_CLASSES)
    for t in range(T):
        nb = len(seqs)
        cand_lab = np.tile(classes, nb)
        parent = np.repeat(np.arange(nb), NUM_CLASSES)
        if t == 0:
            changed = np.zeros(len(cand_lab))
        else:
            changed = (cand_lab != seqs[parent, -1]).astype(float)
        c = counts[parent, cand_lab]
        term = _terms(lp[t, cand_lab], c, t, changed, cfg)
        new_scores = scores[parent] + term
        new_seqs = np.concatenate([seqs[parent], cand_lab[:, None]], axis=1)
        # primary key -score, then the label sequence left to right
        keys = [new_seqs[:, j] for j in range(t, -1, -1)] + [-new_scores]
        order = np.lexsort(keys)[:cfg.beam_width]
        seqs = new_seqs[order]
        scores = new_scores[order]
        steps = np.concatenate([steps[parent[order]], term[order, None]], axis=1)
        counts = counts[parent[order]].copy()
        counts[np.arange(len(order)), cand_lab[order]] += 1
    return DecodedDialog(seqs[0].tolist(), float(scores[0]), steps[0].tolist())


def brute_force_decode(dp: DialogPosteriors, cfg: DedConfig | None = None) -> DecodedDialog:
    """Score all 4**T labelings (T <= 10) and keep the first best in lexicographic order."""
    cfg = cfg or DedConfig()
    T = len(dp)
    if T > BRUTE_FORCE_MAX_LEN:
        raise ValueError(f"dialog has {T} utterances; brute force is capped at {BRUTE_FORCE_MAX_LEN}")
    lp = _log_probs(dp)
    # itertools.product enumerates in lexicographic order
    seqs = np.array(list(itertools.product(range(NUM_CLASSES), repeat=T)), dtype=np.int64)
    n = len(seqs)
    counts = np.zeros((n, NUM_CLASSES))
    total = np.zeros(n)
    steps = np.zeros((n, T))
    rows = np.arange(n)
    for t in range(T):
        lab = seqs[:, t]
        changed = np.zeros(n) if t == 0 else (lab != seqs[:, t - 1]).astype(float)
        term = _terms(lp[t, lab], counts[rows, lab], t, changed, cfg)
        total = total + term
        steps[:, t] = term
        counts[rows, lab] += 1
    best = int(np.argmax(total))
    return DecodedDialog(seqs[best].tolist(), float(total[best]), steps[best].tolist())


# -- gain study --------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def separation_for_accuracy(accuracy: float) -> float:
    """Mean offset of the gold logit (unit-variance noise) giving this argmax accuracy.

    P(correct) = integral phi(x - mu) * Phi(x)**3 dx, solved for mu by root finding.
    Accuracies at or below chance map to 0; near-perfect ones are capped.
    """

    def p_correct(mu):
        f = lambda x: stats.norm.pdf(x - mu) * stats.norm.cdf(x) ** (NUM_CLASSES - 1)
        return integrate.quad(f, -np.inf, np.inf)[0]

    chance = 1.0 / NUM_CLASSES
    if accuracy <= chance:
        return 0.0
    target = min(accuracy, 1.0 - 1e-6)
    return float(optimize.brentq(lambda mu: p_correct(mu) - target, 0.0, 20.0))


def simulate_dialog(rng, length, accuracy, autocorrelation=0.8, priors=None, confidence=1.0):
    """Gold labels from a sticky Markov chain plus classifier posteriors of a given accuracy.

    Each utterance is first drawn correct with probability ``accuracy``; its
    logits ``mu * onehot(gold) + N(0, I)`` are then sampled conditional on that
    outcome (argmax on gold, or off it).  Posteriors are softmax(confidence *
    mu * logits), the Bayes posterior of this model when ``confidence`` is 1.
    Returns (gold, probs, raw_argmax).
    """
    priors = np.full(NUM_CLASSES, 1.0 / NUM_CLASSES) if priors is None else np.asarray(priors)
    mu = separation_for_accuracy(accuracy)
    gold = np.empty(length, dtype=int)
    gold[0] = rng.choice(NUM_CLASSES, p=priors)
    for t in range(1, length):
        gold[t] = gold[t - 1] if rng.random() < autocorrelation else rng.choice(NUM_CLASSES, p=priors)
    probs = np.empty((length, NUM_CLASSES))
    raw = np.empty(length, dtype=int)
    for t in range(length):
        want_correct = rng.random() < accuracy
        while True:
            z = rng.standard_normal(NUM_CLASSES)
            z[gold[t]] += mu
            if (int(np.argmax(z)) == gold[t]) == want_correct:
                break
        a = confidence * mu * z
        e = np.exp(a - a.max())
        probs[t] = e / e.sum()
        raw[t] = int(np.argmax(z))
    return gold, probs, raw


def ded_gain_study(classifier_accuracy_grid, num_dialogs=50, seed=0, cfg: DedConfig | None = None,
                   dialog_length_range=(6, 14), autocorrelation=0.8, confidence=1.0):
    """Raw argmax WA versus decoded WA for simulated classifiers of each accuracy.

    Returns a list of dicts with keys ``pre_acc``, ``raw_wa`` and ``ded_wa``.
    """
    grid = list(classifier_accuracy_grid)
    if not grid:
        raise ValueError("accuracy grid is empty")
    if any(not 0 < a <= 1 for a in grid):
        raise ValueError(f"accuracies must lie in (0, 1], got {grid}")
    cfg = cfg or DedConfig()
    out = []
    for acc in grid:
        rng = np.random.default_rng([seed, int(round(acc * 1e6))])
        raw_hits = ded_hits = n = 0
        for d in range(num_dialogs):
            T = int(rng.integers(dialog_length_range[0], dialog_length_range[1] + 1))
            gold, probs, raw = simulate_dialog(rng, T, acc, autocorrelation, confidence=confidence)
            dec = decode(DialogPosteriors.from_array(probs, f"sim{d}"), cfg)
            raw_hits += int((raw == gold).sum())
            ded_hits += int((np.array(dec.labels) == gold).sum())
            n += T
        out.append({"pre_acc": acc, "raw_wa": raw_hits / n, "ded_wa": ded_hits / n})
    return out


# -- JSON-lines interface ------------------------------------------------------------------

def read_posteriors_jsonl(lines) -> list[DialogPosteriors]:
    """Group ``{dialog_id, utterance_id, posterior, gold?}`` records by dialog, in stream order."""
    groups: dict = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        for key in ("dialog_id", "utterance_id", "posterior"):
            if key not in rec:
                raise ValueError(f"line {lineno}: missing field {key!r}")
        if len(rec["posterior"]) != NUM_CLASSES:
            raise ValueError(f"line {lineno}: posterior must have 4 entries")
        groups.setdefault(rec["dialog_id"], []).append(rec)
    out = []
    for did, recs in groups.items():
        gold = [r["gold"] for r in recs] if all("gold" in r for r in recs) else None
        out.append(DialogPosteriors(did, [r["utterance_id"] for r in recs],
                                    np.array([r["posterior"] for r in recs], dtype=float),
                                    gold, recs))
    return out


def decode_jsonl(lines, cfg: DedConfig | None = None) -> list[str]:
    """Decode every dialog in the stream; echo each record plus decoded_label and score."""
    out = []
    for dp in read_posteriors_jsonl(lines):
        dec = decode(dp, cfg)
        for rec, lab, s in zip(dp.extra, dec.labels, dec.per_step_scores):
            rec = dict(rec)
            rec["decoded_label"] = int(lab)
            rec["score"] = float(s)
            out.append(json.dumps(rec, sort_keys=True))
    return out
