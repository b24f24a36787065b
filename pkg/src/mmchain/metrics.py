"""Evaluation metrics: CER/WER, BLEU4, squared speech error, inception score.

All metric functions are pure.  The inception score depends on a small
frozen image classifier trained once per dataset so that scores stay
comparable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DataError
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, affine, backward, cross_entropy_loss, tanh, zero_grad
from .world import Image, SpeechSeq, TextSeq

_IS_SPLIT_SEED = 9173


def _as_symbols(seq) -> list:
    if isinstance(seq, TextSeq):
        return list(seq.text)
    if isinstance(seq, str):
        return list(seq)
    return list(seq)


def edit_distance(hyp, ref) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    h, r = _as_symbols(hyp), _as_symbols(ref)
    prev = list(range(len(r) + 1))
    for i, hc in enumerate(h, start=1):
        cur = [i] + [0] * len(r)
        for j, rc in enumerate(r, start=1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (0 if hc == rc else 1),
            )
        prev = cur
    return prev[len(r)]


def cer(hyp, ref) -> float:
    """Character error rate in percent: edit distance / reference length."""
    r = _as_symbols(ref)
    if not r:
        raise ContractViolation("cer: empty reference")
    return 100.0 * edit_distance(hyp, r) / len(r)


def wer(hyp, ref) -> float:
    """Word error rate in percent over whitespace-separated tokens."""
    hw = (hyp.text if isinstance(hyp, TextSeq) else str(hyp)).split()
    rw = (ref.text if isinstance(ref, TextSeq) else str(ref)).split()
    if not rw:
        raise ContractViolation("wer: empty reference")
    return 100.0 * edit_distance(hw, rw) / len(rw)


def corpus_cer(pairs) -> float:
    """Micro-averaged CER: total edits over total reference characters."""
    edits = total = 0
    for hyp, ref in pairs:
        r = _as_symbols(ref)
        if not r:
            raise ContractViolation("corpus_cer: empty reference")
        edits += edit_distance(hyp, r)
        total += len(r)
    return 100.0 * edits / total


def corpus_wer(pairs) -> float:
    edits = total = 0
    for hyp, ref in pairs:
        hw = (hyp.text if isinstance(hyp, TextSeq) else str(hyp)).split()
        rw = (ref.text if isinstance(ref, TextSeq) else str(ref)).split()
        if not rw:
            raise ContractViolation("corpus_wer: empty reference")
        edits += edit_distance(hw, rw)
        total += len(rw)
    return 100.0 * edits / total


def _ngram_counts(words: list[str], n: int) -> dict:
    counts: dict[tuple, int] = {}
    for i in range(len(words) - n + 1):
        g = tuple(words[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu4(hyp, refs) -> float:
    """Sentence BLEU with 4-gram cap, in [0, 100].

    Clipped n-gram precisions are combined by geometric mean and scaled by
    the brevity penalty against the closest reference length (ties go to the
    shorter reference).  Zero-count precisions for n >= 2 receive add-one
    smoothing; a zero unigram precision or an empty hypothesis scores 0.
    """
    hw = (hyp.text if isinstance(hyp, TextSeq) else str(hyp)).split()
    if not refs:
        raise ContractViolation("bleu4: no references")
    refs_w = [(r.text if isinstance(r, TextSeq) else str(r)).split() for r in refs]
    if any(not rw for rw in refs_w):
        raise ContractViolation("bleu4: empty reference")
    c = len(hw)
    if c == 0:
        return 0.0
    r = min((abs(len(rw) - c), len(rw)) for rw in refs_w)[1]
    log_sum = 0.0
    for n in range(1, 5):
        hyp_counts = _ngram_counts(hw, n)
        total = max(c - n + 1, 0)
        clipped = 0
        for g, cnt in hyp_counts.items():
            best = max(_ngram_counts(rw, n).get(g, 0) for rw in refs_w)
            clipped += min(cnt, best)
        if n == 1:
            if clipped == 0:
                return 0.0
            p = clipped / total
        elif clipped == 0:
            p = (clipped + 1.0) / (total + 1.0)
        else:
            p = clipped / total
        log_sum += 0.25 * np.log(p)
    bp = 1.0 if c >= r else float(np.exp(1.0 - r / c))
    return 100.0 * bp * float(np.exp(log_sum))


def l2sq_speech(x: SpeechSeq, x_hat: SpeechSeq) -> float:
    """Mean squared frame error over the overlap plus a relative length penalty.

    Matches the text-to-speech training convention so train and eval agree.
    """
    if len(x) == 0 or len(x_hat) == 0:
        raise ContractViolation("l2sq_speech: empty sequence")
    t = min(len(x), len(x_hat))
    diff = x.frames[:t] - x_hat.frames[:t]
    return float((diff * diff).mean() + abs(len(x_hat) - len(x)) / len(x))


def inception_score(images, classifier, splits: int = 2) -> float:
    """exp(mean KL(p(c|image) || marginal)), averaged over seeded splits."""
    n = len(images)
    if n < 2 * splits:
        raise ContractViolation(f"inception_score: need at least {2 * splits} images")
    pixels = np.stack([im.pixels if isinstance(im, Image) else np.asarray(im) for im in images])
    probs = classifier.predict_probs(pixels)
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ContractViolation("inception_score: classifier rows do not sum to 1")
    order = np.random.default_rng(_IS_SPLIT_SEED).permutation(n)
    scores = []
    bounds = np.linspace(0, n, splits + 1).astype(int)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        p = probs[order[lo:hi]]
        marginal = p.mean(axis=0, keepdims=True)
        kl = (p * (np.log(np.maximum(p, 1e-300)) - np.log(np.maximum(marginal, 1e-300)))).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores))


@dataclass
class WorldClassifier:
    """Frozen one-hidden-layer scene-class classifier for the IS metric."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def predict_probs(self, pixels: np.ndarray) -> np.ndarray:
        flat = pixels.reshape(pixels.shape[0], -1)
        h = np.tanh(flat @ self.w1 + self.b1)
        logits = h @ self.w2 + self.b2
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, pixels: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict_probs(pixels).argmax(axis=1) == labels).mean())


def train_world_classifier(
    images,
    labels,
    num_classes: int,
    hidden: int = 48,
    steps: int = 400,
    lr: float = 3e-2,
    min_dev_accuracy: float = 0.95,
    seed: int = 2025,
) -> WorldClassifier:
    """Train and freeze the scene classifier used by the inception score.

    Deterministic given its inputs; raises DataError below the accuracy bar
    because the score would be meaningless.
    """
    pixels = np.stack([im.pixels if isinstance(im, Image) else np.asarray(im) for im in images])
    y = np.asarray(labels, dtype=np.int64)
    flat = pixels.reshape(pixels.shape[0], -1)
    n = flat.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([19, seed]))
    order = rng.permutation(n)
    n_dev = max(1, n // 5)
    dev_idx, tr_idx = order[:n_dev], order[n_dev:]

    params = {
        "w1": Tensor(rng.uniform(-0.2, 0.2, (flat.shape[1], hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.uniform(-0.2, 0.2, (hidden, num_classes)), requires_grad=True),
        "b2": Tensor(np.zeros(num_classes), requires_grad=True),
    }
    state = AdamState(lr=lr)
    xin = Tensor(flat[tr_idx])
    for _ in range(steps):
        zero_grad(params)
        with Tape() as tape:
            h = tanh(affine(xin, params["w1"], params["b1"]))
            logits = affine(h, params["w2"], params["b2"])
            loss = cross_entropy_loss(logits, y[tr_idx])
        backward(loss, tape)
        adam_step(params, state)

    clf = WorldClassifier(
        w1=params["w1"].data.copy(),
        b1=params["b1"].data.copy(),
        w2=params["w2"].data.copy(),
        b2=params["b2"].data.copy(),
    )
    acc = clf.accuracy(pixels[dev_idx], y[dev_idx])
    if acc < min_dev_accuracy:
        raise DataError(
            f"world classifier dev accuracy {acc:.3f} below {min_dev_accuracy}; "
            "inception score would be meaningless"
        )
    return clf
