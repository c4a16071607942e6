"""Unlabeled-loss strategies: supervised, PL, FixMatch, FlexMatch-lite,
DebiasPL-lite, and the margin+reweighting objective (finessl).

Baselines reduce to one shape the trainer can differentiate generically:
per-row hard targets, per-row weights (the threshold mask), and the view the
CE consumed. The finessl path instead defers to ``objective`` for its two
consistency terms. The *-lite variants are deliberate approximations: this
engine only needs their qualitative behavior as comparison rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .embedstore import Batch
from .errors import ConfigError
from .model import Heads, forward_main
from .numkit import softmax_rows
from .objective import (
    ALL_PARTS,
    DetachSnapshot,
    LossConfig,
    _margin_rows,
    detach_snapshot,
    finessl_loss,
)
from .pace import PaceState

VARIANTS = ("supervised", "pl", "fixmatch", "flexmatch_lite", "debiaspl_lite", "finessl")


@dataclass(frozen=True)
class StrategySpec:
    variant: str = "finessl"
    tau: float = 0.7
    lambda_d: float = 0.5
    m_ema: float = 0.999

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown strategy {self.variant!r}")
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError("tau must be in (0, 1]")
        if self.lambda_d < 0.0:
            raise ConfigError("lambda_d must be >= 0")
        if not (0.0 <= self.m_ema < 1.0):
            raise ConfigError("m_ema must be in [0, 1)")

    @property
    def uses_pace(self) -> bool:
        return self.variant in ("finessl", "flexmatch_lite")

    @property
    def uses_aux(self) -> bool:
        return self.variant == "finessl"


@dataclass
class DebiasState:
    """EMA of the pseudo-label marginal used for lite logit adjustment."""

    p_bar: np.ndarray

    @classmethod
    def uniform(cls, c: int) -> "DebiasState":
        return cls(p_bar=np.full(c, 1.0 / c))

    def update(self, pseudo_labels: np.ndarray, m_ema: float) -> None:
        c = self.p_bar.shape[0]
        marginal = np.bincount(pseudo_labels, minlength=c).astype(np.float64)
        marginal /= max(float(marginal.sum()), 1.0)
        p = m_ema * self.p_bar + (1.0 - m_ema) * marginal
        p = np.maximum(p, 1e-6)
        self.p_bar = p / p.sum()


@dataclass
class BatchPseudoStats:
    hist: np.ndarray  # confident pseudo-labels per class
    mean_conf: float  # mean max-probability over all rows
    n_correct: Optional[int] = None  # among confident, when ground truth known
    n_incorrect: Optional[int] = None


@dataclass
class UnlabeledTerms:
    loss: float
    targets: Optional[np.ndarray]  # per-row hard targets (None for supervised)
    weights: Optional[np.ndarray]  # per-row loss weights/masks
    view: str  # "weak" | "strong"
    use_margin: bool
    stats: BatchPseudoStats
    frozen: Optional[DetachSnapshot] = field(default=None, repr=False)


def pseudo_label(q_weak: np.ndarray) -> Tuple[int, float]:
    """(argmax, max) of a probability vector; ties break to the lowest index."""
    q = np.asarray(q_weak, dtype=np.float64)
    idx = int(np.argmax(q))
    return idx, float(q[idx])


def flex_thresholds(pace_counts: np.ndarray, tau: float) -> np.ndarray:
    """Per-class thresholds tau * beta/(2-beta), floored at tau/2."""
    counts = np.asarray(pace_counts, dtype=np.float64)
    top = float(np.max(counts)) if counts.size else 0.0
    beta = counts / top if top > 0.0 else np.ones_like(counts)
    mapped = tau * beta / (2.0 - beta)
    return np.maximum(mapped, 0.5 * tau)


def debias_logits(z: np.ndarray, state: DebiasState, lambda_d: float) -> np.ndarray:
    """Subtract lambda_d * log(p_bar) so over-produced classes lose score."""
    return np.asarray(z, dtype=np.float64) - lambda_d * np.log(state.p_bar)


def _stats(
    q: np.ndarray,
    confident: np.ndarray,
    targets: np.ndarray,
    c: int,
    true_labels: Optional[np.ndarray],
) -> BatchPseudoStats:
    hist = np.bincount(targets[confident], minlength=c).astype(np.int64)
    mean_conf = float(np.mean(np.max(q, axis=1))) if q.shape[0] else 0.0
    n_correct = n_incorrect = None
    if true_labels is not None:
        known = confident & (np.asarray(true_labels) >= 0)
        n_correct = int(np.sum(targets[known] == np.asarray(true_labels)[known]))
        n_incorrect = int(np.sum(known)) - n_correct
    return BatchPseudoStats(hist=hist, mean_conf=mean_conf,
                            n_correct=n_correct, n_incorrect=n_incorrect)


def unlabeled_step(
    spec: StrategySpec,
    heads: Heads,
    batch: Batch,
    pace: PaceState,
    loss_cfg: Optional[LossConfig] = None,
    debias: Optional[DebiasState] = None,
    true_labels: Optional[np.ndarray] = None,
    frozen: Optional[DetachSnapshot] = None,
) -> UnlabeledTerms:
    """Dispatch one batch through the configured unlabeled-loss strategy."""
    spec.validate()
    c = heads.num_classes
    mu_b = batch.unlabeled_weak.shape[0]
    z_weak = forward_main(heads, batch.unlabeled_weak)

    if spec.variant == "finessl":
        if loss_cfg is None:
            loss_cfg = LossConfig()
        bundle = finessl_loss(
            heads, batch, (pace.delta, pace.alpha_t), loss_cfg,
            frozen=frozen, parts=ALL_PARTS,
        )
        if frozen is None:
            frozen = detach_snapshot(heads, batch, loss_cfg)
        confident = np.max(frozen.q_weak, axis=1) >= pace.zeta
        stats = _stats(frozen.q_weak, confident, frozen.pseudo, c, true_labels)
        return UnlabeledTerms(
            loss=bundle.cons_main + bundle.cons_aux,
            targets=frozen.pseudo,
            weights=frozen.psi,
            view="strong",
            use_margin=True,
            stats=stats,
            frozen=frozen,
        )

    if spec.variant == "debiaspl_lite":
        if debias is None:
            raise ConfigError("debiaspl_lite requires a DebiasState")
        z_sel = debias_logits(z_weak, debias, spec.lambda_d)
    else:
        z_sel = z_weak
    q = softmax_rows(z_sel)
    conf = np.max(q, axis=1)
    targets = np.argmax(q, axis=1)

    if spec.variant == "supervised":
        stats = _stats(q, conf >= spec.tau, targets, c, true_labels)
        return UnlabeledTerms(
            loss=0.0, targets=None, weights=None, view="weak",
            use_margin=False, stats=stats,
        )

    if spec.variant == "flexmatch_lite":
        taus = flex_thresholds(pace.counts, spec.tau)
        mask = conf >= taus[targets]
    else:
        mask = conf >= spec.tau

    if spec.variant == "debiaspl_lite":
        debias.update(targets, spec.m_ema)

    weights = mask.astype(np.float64)
    view = "weak" if spec.variant == "pl" else "strong"
    z_pred = z_weak if view == "weak" else forward_main(heads, batch.unlabeled_strong)
    losses, _ = _margin_rows(z_pred, targets, np.zeros(c), 0.0)
    loss = float(np.sum(weights * losses)) / mu_b
    stats = _stats(q, mask, targets, c, true_labels)
    return UnlabeledTerms(
        loss=loss, targets=targets, weights=weights, view=view,
        use_margin=False, stats=stats,
    )
