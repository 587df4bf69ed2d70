"""Objective evaluation: classifier-measured emotion accuracy and confusion
matrices of synthesized outputs, plus the averaged style-token-weight
profile used for inference-time emotion control.
"""

import json
from dataclasses import dataclass

import numpy as np

from .agent import ref_embed_batch, synthesize
from .ser import ser_forward_batch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray      # (E, E) ints, row = truth, column = prediction
    normalized: np.ndarray  # row-normalized floats

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.counts.sum())

    def per_class_accuracy(self):
        return np.diag(self.counts) / self.counts.sum(axis=1)


def tally_confusion(truths, preds, n_classes):
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truths, preds):
        counts[t, p] += 1
    rows = counts.sum(axis=1, keepdims=True)
    normalized = counts / np.where(rows > 0, rows, 1)
    return ConfusionMatrix(counts=counts, normalized=normalized)


def build_token_profile(agent, test_items):
    """Per-emotion mean style-token weights over the test split: (E, E)
    rows on the simplex."""
    e_total = agent.hyper.emotions
    weights, _ = ref_embed_batch(agent, [u.y for u in test_items])
    weights = weights.data
    labels = np.array([u.l for u in test_items])
    profile = np.zeros((e_total, e_total))
    for e in range(e_total):
        rows = weights[labels == e]
        if len(rows) == 0:
            raise ValueError(f"emotion {e} absent from the test split")
        profile[e] = rows.mean(axis=0)
    return profile


def evaluate_emotion_accuracy(agent, ser_model, profile, items):
    """Synthesize each text with its label's profile row, classify with the
    frozen classifier, and tally argmax predictions against labels."""
    e_total = ser_model.hyper.emotions
    ys = [synthesize(agent, u.x, profile[u.l]) for u in items]
    preds = []
    for lo in range(0, len(ys), 16):
        probs = ser_forward_batch(ser_model, ys[lo:lo + 16]).data
        preds.extend(np.argmax(probs, axis=1).tolist())
    truths = [u.l for u in items]
    matrix = tally_confusion(truths, preds, e_total)
    per_emotion = matrix.per_class_accuracy()
    return per_emotion, matrix


def evaluation_report(agent, ser_model, test_items):
    profile = build_token_profile(agent, test_items)
    per_emotion, matrix = evaluate_emotion_accuracy(agent, ser_model, profile, test_items)
    return {
        "per_emotion_accuracy": per_emotion.tolist(),
        "average_accuracy": matrix.accuracy,
        "confusion_counts": matrix.counts.tolist(),
        "confusion_normalized": matrix.normalized.tolist(),
        "token_profile": profile.tolist(),
    }


def save_report(report, path, csv_path=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        counts = np.asarray(report["confusion_counts"])
        with open(csv_path, "w", encoding="utf-8") as fh:
            for row in counts:
                fh.write(",".join(str(int(v)) for v in row) + "\n")


def compare_regimes(reports_by_regime):
    """Per-emotion and average accuracy deltas between the MSE-only and
    iterative regimes, with seed-wise medians.

    reports_by_regime: {"mse-only": [report, ...], "iterative": [report, ...]}
    with matching seeds in matching order, all evaluated on identical test
    texts with the same frozen classifier.
    """
    mse_reports = reports_by_regime["mse-only"]
    it_reports = reports_by_regime["iterative"]
    if len(mse_reports) != len(it_reports):
        raise ValueError("regimes must be evaluated over the same seed set")
    for a, b in zip(mse_reports, it_reports):
        if np.asarray(a["confusion_counts"]).sum() != np.asarray(b["confusion_counts"]).sum():
            raise ValueError("regimes were evaluated on different test sets")
    mse_avg = [r["average_accuracy"] for r in mse_reports]
    it_avg = [r["average_accuracy"] for r in it_reports]
    per_emotion_delta = (np.median([r["per_emotion_accuracy"] for r in it_reports], axis=0)
                         - np.median([r["per_emotion_accuracy"] for r in mse_reports], axis=0))
    return {
        "mse_only_avg": mse_avg,
        "iterative_avg": it_avg,
        "mse_only_median": float(np.median(mse_avg)),
        "iterative_median": float(np.median(it_avg)),
        "median_delta": float(np.median(it_avg) - np.median(mse_avg)),
        "per_emotion_median_delta": per_emotion_delta.tolist(),
        "per_seed_delta": [b - a for a, b in zip(mse_avg, it_avg)],
    }
