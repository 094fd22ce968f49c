"""Min-max contrastive pretraining, finetuning regimes and SA/RA evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from . import tensor_core as tc
from .attack import AttackConfig, AttackError, pgd_contrastive, pgd_supervised
from .data import AugmentPolicy, Dataset, epoch_batches, make_batch
from .encoder import EncoderDims, LinearClassifier, MlpEncoder, Model, classify, init_params
from .losses import (LOSS_KINDS, AnnealState, LossConfig, anneal_alpha,
                     clean_adv_distance, loss_terms)

log = logging.getLogger(__name__)

FINETUNE_MODES = ("LP", "ALF", "AFF")
METRIC_FIELDS = ("epoch", "loss_total", "loss_clean", "loss_adv", "alpha", "d_mean")

# rng stream tags
_AUG, _ATK, _FT_ATK, _EVAL = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AnnealConfig:
    enabled: bool = True
    alpha_min: float = 0.2
    alpha_max: float = 0.5
    warmup_epochs: int = 5
    d_min_ratio: float = 0.25
    momentum: float = 0.9

    def state(self) -> AnnealState:
        return AnnealState(self.alpha_min, self.alpha_max, self.warmup_epochs,
                           self.d_min_ratio, self.momentum)


@dataclass
class TrainConfig:
    loss_kind: str = "ip"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    k: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    attack: AttackConfig = field(default_factory=AttackConfig.pretrain_default)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("epochs, batch_size and lr must be positive, momentum in [0, 1)")
        if self.anneal.enabled and self.anneal.warmup_epochs < 1 and self.loss_kind != "infonce":
            raise ValueError("alpha annealing needs at least one warm-up epoch")

    def dims(self, d_in: int) -> EncoderDims:
        return EncoderDims(d_in, self.hidden, self.hidden[-1], self.k)


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig.eval_default)


class Sgd:
    """Heavy-ball SGD: ``v <- mu v + g``, ``p <- p - lr v``."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            self.params[k] -= self.lr * v


def _train_step(cfg, enc, opt, batch, alpha, anneal, use_anneal, rng_atk):
    """Attack, forward, anneal, backward and update for one batch."""
    B = batch.B
    _, zc = enc.encode(np.vstack([batch.view1, batch.view2]))

    def attack_loss(Z, B_, a=alpha):
        return loss_terms(cfg.loss_kind, Z, B_, cfg.loss, a, "mean").total

    batch.adv = pgd_contrastive(batch.x_hat, zc, enc, attack_loss, cfg.attack, rng_atk)

    g = tc.Graph()
    bound = enc.bind(g)
    _, Z = enc.forward(g.constant(batch.inputs()), bound)
    d = clean_adv_distance(Z.value, B)
    if use_anneal:
        alpha = anneal_alpha(anneal, d, cfg.loss.alpha)
    terms = loss_terms(cfg.loss_kind, Z, B, cfg.loss, alpha, "mean")
    if np.isfinite(terms.total.value):
        tc.backward(terms.total)
        opt.step({n: bound[n].grad for n in enc.names})
    return terms, alpha, d


def pretrain(cfg: TrainConfig, dataset: Dataset, *,
             on_epoch: Callable[[dict, MlpEncoder], None] | None = None
             ) -> tuple[MlpEncoder, list[dict]]:
    """Adversarial contrastive pretraining on the train split.

    Each batch: two augmented views, a PGD adversary of the raw input that
    maximizes the selected loss, then one SGD step on that loss.  Returns
    the encoder and one metrics row per epoch; ``on_epoch`` is called after
    each epoch with the row and the current encoder.
    """
    if dataset.n < 1:
        raise ValueError("pretrain needs a non-empty training split")
    enc = init_params(cfg.seed, cfg.dims(dataset.dim))
    opt = Sgd(enc.params, cfg.lr, cfg.momentum)
    anneal = cfg.anneal.state()
    use_anneal = cfg.anneal.enabled and cfg.loss_kind != "infonce"
    alpha = cfg.loss.alpha
    history = []

    for epoch in range(cfg.epochs):
        sums = dict(loss_total=0.0, loss_clean=0.0, loss_adv=0.0, alpha=0.0, d_mean=0.0)
        batches = epoch_batches(dataset.n, cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(batches):
            rng_aug = np.random.default_rng([cfg.seed, epoch, b, _AUG])
            rng_atk = np.random.default_rng([cfg.seed, epoch, b, _ATK])
            batch = make_batch(dataset, idx, rng_aug, cfg.augment)
            try:
                terms, alpha, d = _train_step(cfg, enc, opt, batch, alpha, anneal, use_anneal,
                                              rng_atk)
            except (tc.DomainError, AttackError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(terms.total.value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            if not all(np.all(np.isfinite(enc.params[n])) for n in enc.names):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, batch {b}")

            sums["loss_total"] += float(terms.total.value)
            sums["loss_clean"] += float(terms.clean.value)
            sums["loss_adv"] += float(terms.adv.value)
            sums["alpha"] += alpha
            sums["d_mean"] += d
        if use_anneal and not anneal.warm and epoch + 1 >= cfg.anneal.warmup_epochs:
            anneal.finish_warmup()
            log.info("warm-up done: d_max=%.4f d_min=%.4f", anneal.d_max, anneal.d_min)
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        history.append(row)
        log.debug("epoch %d loss %.6f alpha %.4f", epoch, row["loss_total"], row["alpha"])
        if on_epoch is not None:
            on_epoch(row, enc)
    return enc, history


def finetune(encoder: MlpEncoder, dataset: Dataset, mode: str,
             cfg: FinetuneConfig | None = None, n_classes: int | None = None, *,
             on_step=None) -> Model:
    """Train a linear head (LP, ALF) or the whole model (AFF).

    LP trains on clean inputs; ALF and AFF train on PGD adversaries of the
    current model.  The encoder passed in is never modified; AFF works on a
    copy.  ``on_step(clf)`` is called after every optimizer step.
    """
    cfg = cfg or FinetuneConfig()
    if mode not in FINETUNE_MODES:
        raise ValueError(f"finetune mode must be one of {FINETUNE_MODES}")
    if dataset.dim != encoder.dims.d_in:
        raise ValueError(f"dataset has {dataset.dim} features, encoder expects {encoder.dims.d_in}")
    n_classes = n_classes or dataset.n_classes
    enc = encoder.copy() if mode == "AFF" else encoder
    clf = LinearClassifier.zeros(n_classes, enc.dims.h)
    clf_params = {"clf.W": clf.W, "clf.b": clf.b}
    params = dict(clf_params)
    if mode == "AFF":
        params.update(enc.params)
    opt = Sgd(params, cfg.lr, cfg.momentum)

    for epoch in range(cfg.epochs):
        for b, idx in enumerate(epoch_batches(dataset.n, cfg.batch_size, cfg.seed, epoch)):
            xb, yb = dataset.X[idx], dataset.y[idx]
            if mode != "LP":
                rng = np.random.default_rng([cfg.seed, epoch, b, _FT_ATK])
                xb = pgd_supervised(xb, yb, enc, clf, cfg.attack, rng)
            g = tc.Graph()
            enc_bound = enc.bind(g, frozen=(mode != "AFF"))
            clf_bound = clf.bind(g)
            h, _ = enc.forward(g.constant(xb), enc_bound)
            loss = tc.softmax_cross_entropy(classify(h, clf_bound), yb)
            tc.backward(loss)
            grads = {n: clf_bound[n].grad for n in clf_params}
            if mode == "AFF":
                grads.update({n: enc_bound[n].grad for n in enc.names})
            opt.step(grads)
            if on_step is not None:
                on_step(clf)
    return Model(enc, clf)


@dataclass
class EvalReport:
    sa: float
    ra: float
    n: int
    correct_clean: list[int]
    correct_robust: list[int]
    class_counts: list[int]
    attack: dict

    def as_dict(self) -> dict:
        return dict(SA=self.sa, RA=self.ra, n=self.n, correct_clean=self.correct_clean,
                    correct_robust=self.correct_robust, class_counts=self.class_counts,
                    attack=self.attack)


def evaluate(model: Model, testset: Dataset, attack: AttackConfig | None = None,
             seed: int = 0, chunk: int = 256) -> EvalReport:
    """Standard accuracy on clean inputs and robust accuracy under PGD."""
    attack = attack or AttackConfig.eval_default()
    if testset.n < 1:
        raise ValueError("evaluate needs a non-empty test split")
    C = model.classifier.n_classes
    pred_clean = model.predict(testset.X)
    x_adv = np.empty_like(testset.X)
    for c, start in enumerate(range(0, testset.n, chunk)):
        sl = slice(start, start + chunk)
        rng = np.random.default_rng([seed, c, _EVAL])
        x_adv[sl] = pgd_supervised(testset.X[sl], testset.y[sl], model.encoder,
                                   model.classifier, attack, rng)
    pred_adv = model.predict(x_adv)
    ok_c = pred_clean == testset.y
    ok_r = pred_adv == testset.y
    counts = np.bincount(testset.y, minlength=C)
    return EvalReport(
        sa=float(ok_c.mean()), ra=float(ok_r.mean()), n=testset.n,
        correct_clean=np.bincount(testset.y[ok_c], minlength=C).tolist(),
        correct_robust=np.bincount(testset.y[ok_r], minlength=C).tolist(),
        class_counts=counts.tolist(),
        attack=dict(epsilon=attack.epsilon, step_size=attack.step_size, steps=attack.steps,
                    random_start=attack.random_start, input_range=list(attack.input_range),
                    seed=seed))


def collapse_metric(Z) -> float:
    """Mean pairwise Euclidean distance between rows (0 when all coincide)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("collapse_metric needs at least two rows")
    return float(pdist(Z).mean())
