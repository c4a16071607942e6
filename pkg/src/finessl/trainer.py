"""Training loop: batches, pace refresh, loss/gradient, momentum SGD, reporting.

Each step: draw a batch, compute weak-view probabilities, fold them into the
pace counts (margin-driven strategies only), refresh (delta, alpha_t),
dispatch the strategy's unlabeled term, add the supervised term, apply one SGD
step under the cosine schedule. Per-epoch metrics accumulate into a RunReport
whose JSON Lines serialization is byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .embedstore import AugmentConfig, BatchSampler, EmbeddingDataset, ensure_normalized
from .errors import ConfigError
from .metrics import ece as ece_metric
from .metrics import hist_entropy, top1_accuracy
from .model import Heads, forward_main, init_heads
from .numkit import RandomStream, softmax_rows
from .objective import LossConfig, detach_snapshot, loss_and_grad, weighted_hard_ce
from .pace import PaceState
from .strategy import DebiasState, StrategySpec, unlabeled_step


class TrainingDiverged(RuntimeError):
    """Non-finite loss or parameters; carries the failing step index."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_b: int = 32
    mu: int = 1
    epochs: int = 30
    steps_per_epoch: int = 500
    zeta: float = 0.7
    alpha_base: float = 8.0
    lambda_: float = 0.5
    gamma: float = 3.0
    tau: float = 0.7
    strategy: str = "finessl"
    lambda_d: float = 0.5
    m_ema: float = 0.999
    seed: int = 1
    eval_every: int = 1
    pace_window: Optional[int] = None  # defaults to steps_per_epoch
    pace_mode: str = "window"
    weak_noise_sd: float = 0.0
    strong_noise_sd: float = 0.05
    strong_drop_frac: float = 0.10
    init_mode: str = "zeros"
    init_sd: float = 0.01
    init_scale: float = 1.0
    adapter: bool = False
    adapter_dim: Optional[int] = None

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_b < 1 or self.mu < 1:
            raise ConfigError("batch_b and mu must be >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if not (0.0 < self.zeta <= 1.0):
            raise ConfigError("zeta must be in (0, 1]")
        if self.alpha_base < 0:
            raise ConfigError("alpha_base must be >= 0")
        if not (0.0 < self.lambda_ < 1.0):
            raise ConfigError("lambda must be in (0,1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.strategy_spec().validate()
        self.augment_config().validate()

    def strategy_spec(self) -> StrategySpec:
        return StrategySpec(
            variant=self.strategy, tau=self.tau, lambda_d=self.lambda_d, m_ema=self.m_ema
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_=self.lambda_, gamma=self.gamma)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            weak_noise_sd=self.weak_noise_sd,
            strong_noise_sd=self.strong_noise_sd,
            strong_drop_frac=self.strong_drop_frac,
        )

    def snapshot(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lambda_")
        return out


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    t: int = 0
    total: int = 0

    @classmethod
    def for_heads(cls, heads: Heads, total: int) -> "OptimizerState":
        return cls(
            velocity={name: np.zeros_like(arr) for name, arr in heads.arrays().items()},
            t=0,
            total=total,
        )


def cosine_lr(t: int, total: int, base: float) -> float:
    """Half-cosine decay from base to zero across the full run."""
    if not (0 <= t <= max(total, 0)):
        raise ValueError("step index outside [0, total]")
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(
    heads: Heads,
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Momentum SGD with decoupled-from-biases weight decay, in place."""
    for name, param in heads.arrays().items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}", step=opt.t)
        if name.endswith("_w") and weight_decay != 0.0:
            g = g + weight_decay * param
        v = opt.velocity[name]
        v *= momentum
        v += g
        param -= lr * v
    opt.t += 1


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    sup_loss: Optional[float]
    unsup_loss: Optional[float]
    test_acc: Optional[float]
    pl_acc: Optional[float]
    pl_entropy: float
    mean_conf: float
    ece: Optional[float]
    alpha_t: float
    delta: list
    pseudo_label_hist: list


@dataclass
class RunReport:
    config: dict
    records: list = field(default_factory=list)
    final_test_acc: Optional[float] = None
    heads: Optional[Heads] = field(default=None, repr=False, compare=False)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(asdict_record(rec), sort_keys=True, separators=(",", ":"))
            for rec in self.records
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def asdict_record(rec: EpochRecord) -> dict:
    return {
        "epoch": rec.epoch,
        "lr": rec.lr,
        "sup_loss": rec.sup_loss,
        "unsup_loss": rec.unsup_loss,
        "test_acc": rec.test_acc,
        "pl_acc": rec.pl_acc,
        "pl_entropy": rec.pl_entropy,
        "mean_conf": rec.mean_conf,
        "ece": rec.ece,
        "alpha_t": rec.alpha_t,
        "delta": rec.delta,
        "pseudo_label_hist": rec.pseudo_label_hist,
    }


def read_report_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _evaluate(heads: Heads, test: EmbeddingDataset):
    logits = forward_main(heads, test.features.astype(np.float64))
    acc = top1_accuracy(logits, test.labels)
    probs = softmax_rows(logits)
    conf = np.max(probs, axis=1)
    correct = (np.argmax(probs, axis=1) == test.labels).astype(np.float64)
    return acc, ece_metric(conf, correct)


def run_training(
    dataset: EmbeddingDataset,
    config: TrainConfig,
    test_dataset: Optional[EmbeddingDataset] = None,
) -> RunReport:
    """Run the full optimization loop and return the per-epoch report.

    Deterministic for a fixed (dataset, config): the report's JSON Lines form
    is byte-identical across invocations.
    """
    config.validate()
    dataset = ensure_normalized(dataset)
    test = ensure_normalized(test_dataset) if test_dataset is not None else None

    spec = config.strategy_spec()
    loss_cfg = config.loss_config()
    root = RandomStream(config.seed)
    heads = init_heads(
        dataset.num_classes,
        dataset.d,
        mode=config.init_mode,
        rng=root.derive("init"),
        prototypes=dataset.prototypes,
        sd=config.init_sd,
        scale=config.init_scale,
        adapter=config.adapter,
        adapter_dim=config.adapter_dim,
    )
    total_steps = config.epochs * config.steps_per_epoch
    opt = OptimizerState.for_heads(heads, total_steps)
    pace = PaceState(
        num_classes=dataset.num_classes,
        zeta=config.zeta,
        alpha_base=config.alpha_base,
        window=config.pace_window or config.steps_per_epoch,
        mode=config.pace_mode,
    )
    pace.refresh_margins()
    debias = DebiasState.uniform(dataset.num_classes) if spec.variant == "debiaspl_lite" else None
    report = RunReport(config=config.snapshot(), heads=heads)

    if config.epochs == 0:
        acc = ece_val = None
        if test is not None:
            acc, ece_val = _evaluate(heads, test)
        report.records.append(
            EpochRecord(
                epoch=0, lr=config.lr, sup_loss=None, unsup_loss=None,
                test_acc=acc, pl_acc=None, pl_entropy=0.0, mean_conf=0.0,
                ece=ece_val, alpha_t=pace.alpha_t, delta=pace.delta.tolist(),
                pseudo_label_hist=[0] * dataset.num_classes,
            )
        )
        report.final_test_acc = acc
        return report

    sampler = BatchSampler(
        dataset, config.batch_b, config.mu, root.derive("batches"), config.augment_config()
    )
    truth = dataset.true_labels
    zeros_delta = np.zeros(dataset.num_classes)

    for epoch in range(config.epochs):
        sup_sum = 0.0
        unsup_sum = 0.0
        conf_sum = 0.0
        hist = np.zeros(dataset.num_classes, dtype=np.int64)
        n_correct = 0
        n_known = 0
        saw_truth = False

        for _step in range(config.steps_per_epoch):
            batch = sampler.next_batch()
            batch_truth = truth[batch.unlabeled_index] if truth is not None else None

            if spec.variant == "finessl":
                frozen = detach_snapshot(heads, batch, loss_cfg)
                pace.update_counts(frozen.q_weak)
                pace.refresh_margins()
                bundle, grads_bundle, _ = loss_and_grad(
                    heads, batch, (pace.delta, pace.alpha_t), loss_cfg, frozen=frozen
                )
                sup_loss = bundle.sup_main + bundle.sup_aux
                unsup_loss = bundle.cons_main + bundle.cons_aux
                grads = grads_bundle.arrays()
                confident = np.max(frozen.q_weak, axis=1) >= pace.zeta
                hist += np.bincount(
                    frozen.pseudo[confident], minlength=dataset.num_classes
                )
                conf_sum += float(np.mean(np.max(frozen.q_weak, axis=1)))
                if batch_truth is not None:
                    saw_truth = True
                    known = confident & (batch_truth >= 0)
                    n_correct += int(np.sum(frozen.pseudo[known] == batch_truth[known]))
                    n_known += int(np.sum(known))
            else:
                if spec.variant == "flexmatch_lite":
                    q_weak = softmax_rows(forward_main(heads, batch.unlabeled_weak))
                    pace.update_counts(q_weak)
                    pace.refresh_margins()
                terms = unlabeled_step(
                    spec, heads, batch, pace,
                    loss_cfg=loss_cfg, debias=debias, true_labels=batch_truth,
                )
                sup_loss, grads = weighted_hard_ce(
                    heads, batch.labeled_x, batch.labeled_y,
                    np.ones(config.batch_b), zeros_delta, 0.0, config.batch_b,
                )
                unsup_loss = terms.loss
                if terms.targets is not None and np.any(terms.weights > 0.0):
                    view_x = (
                        batch.unlabeled_weak if terms.view == "weak" else batch.unlabeled_strong
                    )
                    _, ugrads = weighted_hard_ce(
                        heads, view_x, terms.targets, terms.weights,
                        zeros_delta, 0.0, view_x.shape[0],
                    )
                    for name, g in ugrads.items():
                        grads[name] = grads[name] + g
                hist += terms.stats.hist
                conf_sum += terms.stats.mean_conf
                if terms.stats.n_correct is not None:
                    saw_truth = True
                    n_correct += terms.stats.n_correct
                    n_known += terms.stats.n_correct + terms.stats.n_incorrect

            total = sup_loss + unsup_loss
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss {total}", step=opt.t)
            lr_t = cosine_lr(opt.t, total_steps, config.lr)
            sgd_step(heads, grads, opt, lr_t, config.momentum, config.weight_decay)
            try:
                heads.check_finite()
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), step=opt.t) from exc
            sup_sum += sup_loss
            unsup_sum += unsup_loss

        evaluate_now = test is not None and (
            (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1
        )
        acc = ece_val = None
        if evaluate_now:
            acc, ece_val = _evaluate(heads, test)
        pl_acc = (n_correct / n_known) if (saw_truth and n_known > 0) else None
        report.records.append(
            EpochRecord(
                epoch=epoch + 1,
                lr=cosine_lr(opt.t, total_steps, config.lr),
                sup_loss=sup_sum / config.steps_per_epoch,
                unsup_loss=unsup_sum / config.steps_per_epoch,
                test_acc=acc,
                pl_acc=pl_acc,
                pl_entropy=hist_entropy(hist),
                mean_conf=conf_sum / config.steps_per_epoch,
                ece=ece_val,
                alpha_t=pace.alpha_t,
                delta=pace.delta.tolist(),
                pseudo_label_hist=hist.tolist(),
            )
        )
        if acc is not None:
            report.final_test_acc = acc

    return report
