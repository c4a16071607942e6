"""Loss functions and their analytic gradients with respect to the heads.

The margin cross-entropy shifts only the target logit: for target y with
per-class margins delta and scale alpha_t,

    margin_ce(z, y) = ce(z - alpha_t * delta[y] * e_y, y)

The soft variant mixes per-target hard losses under a smoothed label vector
and is evaluated in O(C) via a denominator correction: with shifted
exponentials E_j = exp(z_j - m) and E'_j = exp(z_j - alpha_t*delta_j - m),
the target-k denominator is S - E_k + E'_k where S = sum_j E_j.

Gradient semantics follow pseudo-labeling convention: pseudo-labels, masks,
and sample weights psi are constants, and the auxiliary branch consumes a
gradient-blocked copy of the adapter features, so auxiliary losses never
reach the adapter. ``detach_snapshot`` captures exactly those constants; the
loss under a fixed snapshot is the differentiable function that ``grad``
differentiates, which is what finite-difference checks must probe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .embedstore import Batch
from .model import Heads, forward_features
from .numkit import log_sum_exp, softmax_rows

ALL_PARTS = ("sup_main", "cons_main", "sup_aux", "cons_aux")


@dataclass(frozen=True)
class LossConfig:
    lambda_: float = 0.5  # label smoothing strength for the aux branch
    gamma: float = 3.0  # sample-weight scale: psi = gamma * max p_aux

    def validate(self) -> None:
        if not (0.0 < self.lambda_ < 1.0):
            raise ValueError("lambda must be in (0,1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")


@dataclass
class LossBundle:
    sup_main: float
    cons_main: float
    sup_aux: float
    cons_aux: float
    total: float


@dataclass
class GradBundle:
    main_w: np.ndarray
    main_b: np.ndarray
    aux_w: np.ndarray
    aux_b: np.ndarray
    adapter_w: Optional[np.ndarray] = None
    adapter_b: Optional[np.ndarray] = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"main_w": self.main_w, "main_b": self.main_b,
               "aux_w": self.aux_w, "aux_b": self.aux_b}
        if self.adapter_w is not None:
            out["adapter_w"] = self.adapter_w
            out["adapter_b"] = self.adapter_b
        return out


@dataclass
class DetachSnapshot:
    """Constants of one step: pseudo-labels, sample weights, blocked features."""

    pseudo: np.ndarray  # (muB,) argmax of main weak view
    psi: np.ndarray  # (muB,) gamma * max p_aux(weak)
    q_weak: np.ndarray  # (muB, C) main weak probabilities, for stats
    aux_feat_labeled: np.ndarray  # (B, D') frozen adapter output
    aux_feat_strong: np.ndarray  # (muB, D') frozen adapter output


# ---------------------------------------------------------------------------
# Scalar ops
# ---------------------------------------------------------------------------


def smooth_labels(y_hat: int, lambda_: float, c: int) -> np.ndarray:
    """Smoothed one-hot: (1-lambda)+lambda/c on the target, lambda/c elsewhere."""
    if not (0.0 < lambda_ < 1.0):
        raise ValueError("lambda must be in (0,1)")
    if not (0 <= y_hat < c):
        raise ValueError("target class out of range")
    q = np.full(c, lambda_ / c)
    q[y_hat] = (1.0 - lambda_) + lambda_ / c
    return q


def ce(z, y: int) -> float:
    """Standard cross-entropy -log softmax(z)[y], evaluated via log_sum_exp."""
    z = np.asarray(z, dtype=np.float64)
    if not (0 <= y < z.shape[0]):
        raise ValueError("target class out of range")
    return log_sum_exp(z) - float(z[y])


def margin_ce(z, y: int, delta, alpha_t: float) -> float:
    """Margin cross-entropy: competitors gain alpha_t*delta[y] over the target."""
    z = np.asarray(z, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if alpha_t < 0:
        raise ValueError("alpha_t must be >= 0")
    shifted = z.copy()
    shifted[y] -= alpha_t * delta[y]
    return ce(shifted, y)


def soft_margin_ce(z, q_tilde, delta, alpha_t: float) -> float:
    """Mixture of per-target margin losses under a probability vector q_tilde."""
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q_tilde, dtype=np.float64)
    if np.any(q < 0) or abs(float(np.sum(q)) - 1.0) > 1e-6:
        raise ValueError("q_tilde must be a probability vector")
    losses, _ = _soft_margin_rows(
        z[None, :], q[None, :], np.asarray(delta, dtype=np.float64), alpha_t
    )
    return float(losses[0])


def consistency_fixmatch(z_strong_batch, q_weak_batch, tau: float) -> float:
    """Threshold-masked CE between strong logits and weak-view pseudo-labels.

    The mean runs over the full batch: masked rows contribute zero but still
    count in the denominator.
    """
    z = np.asarray(z_strong_batch, dtype=np.float64)
    q = np.asarray(q_weak_batch, dtype=np.float64)
    n = z.shape[0]
    conf = np.max(q, axis=1)
    targets = np.argmax(q, axis=1)
    total = 0.0
    for j in range(n):
        if conf[j] >= tau:
            total += ce(z[j], int(targets[j]))
    return total / n


def consistency_weighted(z_strong_batch, pseudo_labels, psi, delta, alpha_t: float) -> float:
    """Weighted margin CE over the batch; psi are constants, mean over all rows."""
    z = np.asarray(z_strong_batch, dtype=np.float64)
    y = np.asarray(pseudo_labels, dtype=np.int64)
    w = np.asarray(psi, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("psi entries must be >= 0")
    losses, _ = _margin_rows(z, y, np.asarray(delta, dtype=np.float64), alpha_t)
    return float(np.sum(w * losses)) / z.shape[0]


# ---------------------------------------------------------------------------
# Vectorized row kernels (loss values and dL/dz)
# ---------------------------------------------------------------------------


def _margin_rows(z: np.ndarray, y: np.ndarray, delta: np.ndarray, alpha_t: float):
    """Hard-target margin CE per row. Returns (losses (n,), dz (n,C))."""
    n = z.shape[0]
    rows = np.arange(n)
    shifted = z.copy()
    shifted[rows, y] -= alpha_t * delta[y]
    m = np.max(shifted, axis=1, keepdims=True)
    e = np.exp(shifted - m)
    s = np.sum(e, axis=1, keepdims=True)
    losses = (np.log(s[:, 0]) + m[:, 0]) - shifted[rows, y]
    dz = e / s
    dz[rows, y] -= 1.0
    return losses, dz


def _soft_margin_rows(z: np.ndarray, q: np.ndarray, delta: np.ndarray, alpha_t: float):
    """Soft-target margin CE per row in O(C). Returns (losses (n,), dz (n,C)).

    Per row: L = sum_k q_k * [-(z_k - a*d_k - m) + log(S - E_k + E'_k)]
    dL/dz_j = E_j*T - E_j*q_j/D_j + q_j*E'_j/D_j - q_j,  T = sum_k q_k/D_k.
    """
    m = np.max(z, axis=1, keepdims=True)
    e = np.exp(z - m)
    e_shift = np.exp(z - alpha_t * delta[None, :] - m)
    s = np.sum(e, axis=1, keepdims=True)
    denom = s - e + e_shift
    losses = np.sum(q * (-(z - alpha_t * delta[None, :] - m) + np.log(denom)), axis=1)
    t = np.sum(q / denom, axis=1, keepdims=True)
    dz = e * t - e * q / denom + q * e_shift / denom - q
    return losses, dz


# ---------------------------------------------------------------------------
# Full objective
# ---------------------------------------------------------------------------


def detach_snapshot(heads: Heads, batch: Batch, cfg: LossConfig) -> DetachSnapshot:
    """Freeze every quantity that gradients must not flow through."""
    cfg.validate()
    h_weak = forward_features(heads, batch.unlabeled_weak)
    z_weak = h_weak @ heads.main_w.T + heads.main_b
    q_weak = softmax_rows(z_weak)
    pseudo = np.argmax(q_weak, axis=1)
    p_aux = softmax_rows(h_weak @ heads.aux_w.T + heads.aux_b)
    psi = cfg.gamma * np.max(p_aux, axis=1)
    return DetachSnapshot(
        pseudo=pseudo,
        psi=psi,
        q_weak=q_weak,
        aux_feat_labeled=forward_features(heads, batch.labeled_x).copy(),
        aux_feat_strong=forward_features(heads, batch.unlabeled_strong).copy(),
    )


def _relu_backprop(heads: Heads, x: np.ndarray, h: np.ndarray, dh: np.ndarray, grads):
    """Push feature gradients through the adapter into the grad accumulators."""
    gate = (h > 0.0).astype(np.float64)
    da = dh * gate
    grads["adapter_w"] += da.T @ x
    grads["adapter_b"] += np.sum(da, axis=0)


def _eval(
    heads: Heads,
    batch: Batch,
    pace: Tuple[np.ndarray, float],
    cfg: LossConfig,
    frozen: Optional[DetachSnapshot],
    want_grad: bool,
    parts: Sequence[str],
):
    cfg.validate()
    delta, alpha_t = pace
    delta = np.asarray(delta, dtype=np.float64)
    if frozen is None:
        frozen = detach_snapshot(heads, batch, cfg)

    b = batch.labeled_x.shape[0]
    mu_b = batch.unlabeled_strong.shape[0]
    c = heads.num_classes
    y = np.asarray(batch.labeled_y, dtype=np.int64)

    h_lab = forward_features(heads, batch.labeled_x)
    h_strong = forward_features(heads, batch.unlabeled_strong)
    z_lab = h_lab @ heads.main_w.T + heads.main_b
    z_strong = h_strong @ heads.main_w.T + heads.main_b
    z_aux_lab = frozen.aux_feat_labeled @ heads.aux_w.T + heads.aux_b
    z_aux_strong = frozen.aux_feat_strong @ heads.aux_w.T + heads.aux_b

    values = {}
    grads = None
    if want_grad:
        grads = {name: np.zeros_like(arr) for name, arr in heads.arrays().items()}

    # main branch: margin CE on labeled rows
    if "sup_main" in parts:
        losses, dz = _margin_rows(z_lab, y, delta, alpha_t)
        values["sup_main"] = float(np.sum(losses)) / b
        if want_grad:
            dz = dz / b
            grads["main_w"] += dz.T @ h_lab
            grads["main_b"] += np.sum(dz, axis=0)
            if heads.has_adapter:
                _relu_backprop(heads, batch.labeled_x, h_lab, dz @ heads.main_w, grads)

    # main branch: psi-weighted margin CE on strong views
    if "cons_main" in parts:
        losses, dz = _margin_rows(z_strong, frozen.pseudo, delta, alpha_t)
        values["cons_main"] = float(np.sum(frozen.psi * losses)) / mu_b
        if want_grad:
            dz = dz * (frozen.psi[:, None] / mu_b)
            grads["main_w"] += dz.T @ h_strong
            grads["main_b"] += np.sum(dz, axis=0)
            if heads.has_adapter:
                _relu_backprop(
                    heads, batch.unlabeled_strong, h_strong, dz @ heads.main_w, grads
                )

    # aux branch: plain CE on labeled rows, blocked features
    if "sup_aux" in parts:
        losses, dz = _margin_rows(z_aux_lab, y, np.zeros(c), 0.0)
        values["sup_aux"] = float(np.sum(losses)) / b
        if want_grad:
            dz = dz / b
            grads["aux_w"] += dz.T @ frozen.aux_feat_labeled
            grads["aux_b"] += np.sum(dz, axis=0)

    # aux branch: smoothed soft margin CE on strong views, blocked features
    if "cons_aux" in parts:
        q_tilde = np.full((mu_b, c), cfg.lambda_ / c)
        q_tilde[np.arange(mu_b), frozen.pseudo] += 1.0 - cfg.lambda_
        losses, dz = _soft_margin_rows(z_aux_strong, q_tilde, delta, alpha_t)
        values["cons_aux"] = float(np.sum(losses)) / mu_b
        if want_grad:
            dz = dz / mu_b
            grads["aux_w"] += dz.T @ frozen.aux_feat_strong
            grads["aux_b"] += np.sum(dz, axis=0)

    bundle = LossBundle(
        sup_main=values.get("sup_main", 0.0),
        cons_main=values.get("cons_main", 0.0),
        sup_aux=values.get("sup_aux", 0.0),
        cons_aux=values.get("cons_aux", 0.0),
        total=sum(values.values()),
    )
    grad_bundle = None
    if want_grad:
        grad_bundle = GradBundle(
            main_w=grads["main_w"],
            main_b=grads["main_b"],
            aux_w=grads["aux_w"],
            aux_b=grads["aux_b"],
            adapter_w=grads.get("adapter_w"),
            adapter_b=grads.get("adapter_b"),
        )
    return bundle, grad_bundle, frozen


def finessl_loss(
    heads: Heads,
    batch: Batch,
    pace: Tuple[np.ndarray, float],
    cfg: LossConfig,
    frozen: Optional[DetachSnapshot] = None,
    parts: Sequence[str] = ALL_PARTS,
) -> LossBundle:
    bundle, _, _ = _eval(heads, batch, pace, cfg, frozen, want_grad=False, parts=parts)
    return bundle


def grad(
    heads: Heads,
    batch: Batch,
    pace: Tuple[np.ndarray, float],
    cfg: LossConfig,
    frozen: Optional[DetachSnapshot] = None,
    parts: Sequence[str] = ALL_PARTS,
) -> GradBundle:
    _, grad_bundle, _ = _eval(heads, batch, pace, cfg, frozen, want_grad=True, parts=parts)
    return grad_bundle


def loss_and_grad(
    heads: Heads,
    batch: Batch,
    pace: Tuple[np.ndarray, float],
    cfg: LossConfig,
    frozen: Optional[DetachSnapshot] = None,
):
    """One-pass loss + gradient + the snapshot used (trainer hot path)."""
    return _eval(heads, batch, pace, cfg, frozen, want_grad=True, parts=ALL_PARTS)


def weighted_hard_ce(
    heads: Heads,
    x: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    delta: np.ndarray,
    alpha_t: float,
    denom: int,
):
    """Weighted hard-target (optionally margined) CE through the main head.

    Returns (loss, grads dict touching main_w/main_b and the adapter). This is
    the differentiable core shared by the supervised term and every baseline's
    unlabeled term; weights are constants.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    h = forward_features(heads, x)
    z = h @ heads.main_w.T + heads.main_b
    losses, dz = _margin_rows(z, y, np.asarray(delta, dtype=np.float64), alpha_t)
    loss = float(np.sum(w * losses)) / denom
    dz = dz * (w[:, None] / denom)
    grads = {"main_w": dz.T @ h, "main_b": np.sum(dz, axis=0)}
    if heads.has_adapter:
        grads["adapter_w"] = np.zeros_like(heads.adapter_w)
        grads["adapter_b"] = np.zeros_like(heads.adapter_b)
        _relu_backprop(heads, x, h, dz @ heads.main_w, grads)
    return loss, grads
