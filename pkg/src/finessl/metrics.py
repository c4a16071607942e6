"""Quantitative instruments: accuracy, pseudo-label quality, calibration.

Entropy is reported in nats with the 0*ln(0)=0 convention. ECE uses 15
equal-width bins on (0, 1] unless told otherwise; rectified confidences are
clamped into [0, 1] because the raw rescaling can exceed probability range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class PseudoLabelStats:
    hist: np.ndarray  # confident pseudo-labels per class
    accuracy: Optional[float]  # fraction correct among confident (needs ground truth)
    entropy: float  # Shannon entropy (nats) of the normalized hist
    mean_conf: float  # mean max-probability over all rows


@dataclass
class ConfGroups:
    correct: np.ndarray
    incorrect: np.ndarray
    ood: np.ndarray
    hist_correct: np.ndarray
    hist_incorrect: np.ndarray
    hist_ood: np.ndarray


def top1_accuracy(logits_batch: np.ndarray, labels: np.ndarray) -> float:
    z = np.asarray(logits_batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[0] != y.shape[0]:
        raise ValueError("logits and labels must align")
    if z.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(z, axis=1) == y))


def hist_entropy(hist: np.ndarray) -> float:
    """Shannon entropy (nats) of a count histogram; empty histogram -> 0."""
    h = np.asarray(hist, dtype=np.float64)
    total = float(np.sum(h))
    if total <= 0.0:
        return 0.0
    p = h / total
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def pl_stats(
    q_weak_all: np.ndarray,
    ground_truth: Optional[np.ndarray],
    zeta_or_tau: float,
) -> PseudoLabelStats:
    q = np.asarray(q_weak_all, dtype=np.float64)
    c = q.shape[1]
    conf = np.max(q, axis=1)
    winners = np.argmax(q, axis=1)
    confident = conf >= zeta_or_tau
    hist = np.bincount(winners[confident], minlength=c).astype(np.int64)
    accuracy = None
    if ground_truth is not None:
        gt = np.asarray(ground_truth, dtype=np.int64)
        known = confident & (gt >= 0)
        if np.any(known):
            accuracy = float(np.mean(winners[known] == gt[known]))
    return PseudoLabelStats(
        hist=hist,
        accuracy=accuracy,
        entropy=hist_entropy(hist),
        mean_conf=float(np.mean(conf)) if conf.size else 0.0,
    )


def ece(confidences: np.ndarray, correctness: np.ndarray, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width bins on (0, 1]."""
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correctness, dtype=np.float64)
    if conf.shape != correct.shape:
        raise ValueError("confidences and correctness must align")
    if np.any((conf < 0.0) | (conf > 1.0)):
        raise ValueError("confidences must lie in [0, 1]")
    n = conf.size
    if n == 0:
        return 0.0
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        members = idx == b
        n_b = int(np.sum(members))
        if n_b == 0:
            continue
        acc_b = float(np.mean(correct[members]))
        conf_b = float(np.mean(conf[members]))
        total += (n_b / n) * abs(acc_b - conf_b)
    return total


def rectified_conf(confidences: np.ndarray, pl_accuracy: float) -> np.ndarray:
    """Rescale confidences so their mean matches pseudo-label accuracy, then clamp."""
    conf = np.asarray(confidences, dtype=np.float64)
    mean = float(np.mean(conf)) if conf.size else 0.0
    if mean <= 0.0:
        raise ValueError("rectified_conf requires positive mean confidence")
    kappa = pl_accuracy / mean
    return np.clip(kappa * conf, 0.0, 1.0)


def conf_groups(
    q_all: np.ndarray,
    ground_truth: np.ndarray,
    ood_mask: Optional[np.ndarray],
    pseudo_labels: Optional[np.ndarray] = None,
    n_bins: int = 20,
) -> ConfGroups:
    """Partition max-confidences by pseudo-label correctness and OOD membership.

    ``pseudo_labels`` defaults to the argmax of ``q_all``; passing them lets the
    caller score one head's confidence against another head's pseudo-labels.
    """
    q = np.asarray(q_all, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    conf = np.max(q, axis=1)
    pl = np.argmax(q, axis=1) if pseudo_labels is None else np.asarray(pseudo_labels)
    ood = np.zeros(q.shape[0], dtype=bool) if ood_mask is None else np.asarray(ood_mask, bool)
    in_dist = ~ood
    correct = in_dist & (pl == gt)
    incorrect = in_dist & (pl != gt)
    edges = np.linspace(0.0, 1.0, n_bins + 1)

    def _hist(values):
        return np.histogram(values, bins=edges)[0]

    return ConfGroups(
        correct=conf[correct],
        incorrect=conf[incorrect],
        ood=conf[ood],
        hist_correct=_hist(conf[correct]),
        hist_incorrect=_hist(conf[incorrect]),
        hist_ood=_hist(conf[ood]),
    )


def write_conf_groups_csv(groups: ConfGroups, path) -> None:
    """Plot-ready CSV of (group, confidence) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "confidence"])
        for name, values in (
            ("correct", groups.correct),
            ("incorrect", groups.incorrect),
            ("ood", groups.ood),
        ):
            for v in values:
                writer.writerow([name, f"{float(v):.6f}"])
