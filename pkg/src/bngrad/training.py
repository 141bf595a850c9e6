"""Deterministic SGD loop with softmax cross-entropy and variance probes."""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import batch_iterator
from .numerics import SeededRng
from .probes import ProbeRecorder
from .resnet import network_backward, network_forward

BATCH_STREAM = 1  # rng stream id for minibatch shuffling (init uses stream 0)


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    total_steps: int = 2000
    probe_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if self.total_steps > 0 and self.probe_every > self.total_steps:
            raise ValueError("probe_every must not exceed total_steps")


@dataclass
class TrainRecord:
    step: int
    loss: float
    train_accuracy: float


@dataclass
class TrainResult:
    records: list
    trace: object            # probes.VarTrace
    a_stats: list
    exploded: bool = False
    explosion_step: int | None = None


def softmax_xent(logits, labels):
    """Mean cross-entropy and its logit gradient.

    Non-finite logits yield a non-finite loss (the explosion signal)
    instead of raising.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("labels out of range")
    with np.errstate(all="ignore"):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(m), labels].mean())
        dlogits = np.exp(logp)
        dlogits[np.arange(m), labels] -= 1.0
        dlogits /= m
    return loss, dlogits


def sgd_step(model, grads, lr):
    """In-place theta <- theta - lr * grad for every parameter."""
    for name, p in model.param_items():
        p -= lr * grads[name]


def batch_accuracy(logits, labels):
    with np.errstate(all="ignore"):
        pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == labels))


def train(model, dataset, cfg: SgdConfig, probes: ProbeRecorder | None = None) -> TrainResult:
    """Run cfg.total_steps of SGD, probing gradient stats every probe_every
    steps (step 0 included).

    A non-finite loss or boundary gradient ends the run cleanly with the
    explosion flag set; the offending step is force-probed so the trace
    carries the non-finite marker rows.
    """
    recorder = probes if probes is not None else ProbeRecorder()
    records = []
    result = TrainResult(records, recorder.trace, recorder.a_stats)
    batches = batch_iterator(dataset, cfg.batch_size, SeededRng(cfg.seed, BATCH_STREAM))

    # a diverging run overflows on purpose before it is caught; keep the
    # numpy warnings quiet and let the non-finite values carry the signal
    with np.errstate(all="ignore"):
        for step in range(cfg.total_steps):
            x, labels = next(batches)
            logits, cache = network_forward(model, x)
            loss, dlogits = softmax_xent(logits, labels)
            records.append(TrainRecord(step, loss, batch_accuracy(logits, labels)))

            grads, boundaries, pairs = network_backward(model, cache, dlogits)
            blew_up = (not math.isfinite(loss)
                       or not all(np.all(np.isfinite(g)) for g in boundaries))
            if blew_up or step % cfg.probe_every == 0:
                recorder.record(step, model, boundaries, pairs)
            if blew_up:
                result.exploded = True
                result.explosion_step = step
                return result

            sgd_step(model, grads, cfg.learning_rate)
    return result


def evaluate(model, dataset, batch_size):
    """Accuracy over the dataset in full batches (drop last).

    Batches are drawn in a fixed pseudo-random interleaving, not dataset
    order: BN normalizes with batch statistics, so a batch must mix
    classes (a single-class batch has its class mean normalized away).
    """
    n = len(dataset)
    order = SeededRng(0).permutation(n)
    correct = 0
    seen = 0
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        logits, _ = network_forward(model, dataset.inputs[idx])
        with np.errstate(all="ignore"):
            pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == dataset.labels[idx]))
        seen += batch_size
    if seen == 0:
        raise ValueError("dataset smaller than one batch")
    return correct / seen
