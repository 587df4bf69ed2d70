"""Emotion classifier providing the recognition probability for the reward.

Architecture: 1-D conv feature extractor -> bidirectional gated recurrence
-> additive attention pooling over time -> linear -> softmax. The classifier
is pretrained on (features, label) pairs and frozen for all generator
training.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError
from .optim import AdamState, Schedule, adam_step, lr_at


@dataclass
class SerHyper:
    channels: int = 8
    emotions: int = 5
    conv_width: int = 16
    kernel: int = 3
    hidden: int = 32  # per direction
    att_width: int = 32


class SerModel:
    """Classifier parameters plus hyperparameters (the phi of the reward)."""

    def __init__(self, hyper, rng=None):
        self.hyper = hyper
        rng = rng if rng is not None else np.random.default_rng(0)
        h = hyper
        self.specs = {
            "conv": nn.LayerSpec("conv1d", h.channels, h.conv_width, kernel=h.kernel),
            "rnn": nn.LayerSpec("recurrent", h.conv_width, h.hidden, direction="bi"),
            "att": nn.LayerSpec("attention", 2 * h.hidden, h.att_width),
            "out": nn.LayerSpec("linear", 2 * h.hidden, h.emotions),
        }
        self.params = {name: nn.init_parameters(spec, rng)
                       for name, spec in self.specs.items()}

    def named_parameters(self):
        return nn.collect(self.params)

    def checksum(self):
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


def _batchify(ys):
    """Right-pad feature sequences to a common length; returns (x, mask)."""
    lengths = [y.shape[0] for y in ys]
    tmax = max(lengths)
    channels = ys[0].shape[1]
    batch = np.zeros((len(ys), tmax, channels))
    mask = np.zeros((len(ys), tmax))
    for i, y in enumerate(ys):
        batch[i, :len(y)] = y
        mask[i, :len(y)] = 1.0
    return batch, mask


def ser_forward_batch(model, ys):
    """Posteriors for a list of (T_i, C) feature arrays; returns Node (B, E).

    Right padding plus masking gives results identical to per-sample runs.
    """
    h = model.hyper
    for y in ys:
        if y.shape[1] != h.channels:
            raise ShapeError(f"classifier expects {h.channels} channels, got {y.shape[1]}")
        if y.shape[0] < h.kernel:
            raise ShapeError(f"sequence of {y.shape[0]} frames shorter than conv kernel {h.kernel}")
    batch, mask = _batchify(ys)
    x = ad.relu(ad.conv1d(ad.constant(batch), model.params["conv"]["w"],
                          model.params["conv"]["b"]))
    hs, _ = nn.bigru_run(model.params["rnn"], x, mask=mask)
    ctx, _ = nn.additive_attention(model.params["att"], hs, mask=mask)
    logits = ctx @ model.params["out"]["w"] + model.params["out"]["b"]
    return ad.softmax(logits)


def ser_forward(model, y):
    """Emotion posterior for one feature sequence; Node of shape (E,)."""
    probs = ser_forward_batch(model, [np.asarray(y, dtype=np.float64)])
    return ad.reshape(probs, (model.hyper.emotions,))


def attention_weights(model, y):
    """Time-attention weights for one sequence (diagnostic surface)."""
    y = np.asarray(y, dtype=np.float64)
    batch, mask = _batchify([y])
    x = ad.relu(ad.conv1d(ad.constant(batch), model.params["conv"]["w"],
                          model.params["conv"]["b"]))
    hs, _ = nn.bigru_run(model.params["rnn"], x, mask=mask)
    _, alpha = nn.additive_attention(model.params["att"], hs, mask=mask)
    return alpha.data[0]


def ser_probability(model, y, label):
    """Recognition probability of the target emotion, in [0, 1]."""
    if not 0 <= label < model.hyper.emotions:
        raise ValueError(f"label {label} out of range for {model.hyper.emotions} emotions")
    return float(ser_forward(model, y).data[label])


def classify_batch(model, ys, chunk=32):
    """Argmax predictions for a list of feature sequences."""
    preds = []
    for lo in range(0, len(ys), chunk):
        probs = ser_forward_batch(model, ys[lo:lo + chunk])
        preds.extend(np.argmax(probs.data, axis=1).tolist())
    return preds


def accuracy(model, items):
    preds = classify_batch(model, [u.y for u in items])
    return float(np.mean([p == u.l for p, u in zip(preds, items)]))


def pretrain_ser(corpus, hyper=None, schedule=None, steps=3000, seed=0,
                 target_acc=None, eval_every=100, log=None):
    """Cross-entropy training on (y, l) pairs of the train split with Adam.

    Returns (model, report). With ``target_acc`` set, stops early once
    validation accuracy reaches it (the step budget is an upper bound).
    """
    hyper = hyper or SerHyper(channels=corpus.meta.channels,
                              emotions=corpus.meta.emotions)
    schedule = schedule or Schedule()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E2]))
    model = SerModel(hyper, rng=rng)
    opt = AdamState()
    params = model.named_parameters()
    items = corpus.train
    curve = []
    for step in range(steps):
        idx = rng.choice(len(items), size=min(schedule.batch_size, len(items)),
                         replace=False)
        ys = [items[i].y for i in idx]
        labels = np.array([items[i].l for i in idx])
        probs = ser_forward_batch(model, ys)
        picked = probs[np.arange(len(ys)), labels]
        loss = -ad.nmean(ad.log(picked + 1e-12))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"classifier pretraining diverged at step {step}")
        ad.zero_grad([p for _, p in params])
        ad.backward(loss)
        adam_step(params, opt, lr_at(step, schedule))
        if (step + 1) % eval_every == 0:
            val_acc = accuracy(model, corpus.val)
            curve.append({"step": step + 1, "loss": loss.item(), "val_acc": val_acc})
            if log:
                log(curve[-1])
            if target_acc is not None and val_acc >= target_acc:
                break
    report = {
        "steps": curve[-1]["step"] if curve else 0,
        "train_acc": accuracy(model, corpus.train),
        "val_acc": accuracy(model, corpus.val),
        "test_acc": accuracy(model, corpus.test),
        "curve": curve,
    }
    return model, report
