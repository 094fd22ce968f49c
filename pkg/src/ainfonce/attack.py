"""L-infinity PGD: contrastive (pretraining) and supervised (evaluation) variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .encoder import LinearClassifier, MlpEncoder, classify


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    step_size: float = 0.025
    steps: int = 5
    random_start: bool = True
    input_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        lo, hi = self.input_range
        self.input_range = (float(lo), float(hi))
        if self.epsilon < 0 or self.step_size <= 0 or self.steps < 1 or lo > hi:
            raise ValueError(f"invalid attack config {self}")

    @classmethod
    def pretrain_default(cls, epsilon: float = 0.1) -> "AttackConfig":
        return cls(epsilon, epsilon / 4, 5, True)

    @classmethod
    def eval_default(cls, epsilon: float = 0.1) -> "AttackConfig":
        return cls(epsilon, epsilon / 10, 20, True)


def _project(x0, x, cfg: AttackConfig) -> np.ndarray:
    lo, hi = cfg.input_range
    eps = cfg.epsilon
    return np.clip(np.clip(x, x0 - eps, x0 + eps), lo, hi)


def pgd_ascent(x0: np.ndarray, loss_grad: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
               cfg: AttackConfig, rng: np.random.Generator | None = None,
               on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Sign-gradient ascent inside the epsilon box around ``x0``.

    ``loss_grad(x)`` returns ``(losses, grad)`` where ``losses`` is either a
    scalar (one objective for the whole input) or one value per row.  The
    best iterate seen so far is kept (per row when losses are per row), so
    the returned point never scores below the starting point and a larger
    step budget never scores below a smaller one.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if cfg.epsilon == 0:
        return x0.copy()
    x = x0.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        x = _project(x0, x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), cfg)
    best = x.copy()
    best_loss = None
    for it in range(cfg.steps + 1):
        loss, grad = loss_grad(x)
        loss = np.asarray(loss, dtype=np.float64)
        if not np.all(np.isfinite(grad)) or not np.all(np.isfinite(loss)):
            raise AttackError(f"non-finite loss/gradient at PGD iteration {it}")
        if best_loss is None:
            best_loss = loss.copy()
        elif loss.ndim == 0:
            if loss > best_loss:
                best, best_loss = x.copy(), loss
        else:
            better = loss > best_loss
            best[better] = x[better]
            best_loss = np.where(better, loss, best_loss)
        if it == cfg.steps:
            break
        x = _project(x0, x + cfg.step_size * np.sign(grad), cfg)
        if on_step is not None:
            on_step(it, x)
    return best


def pgd_contrastive(x_hat: np.ndarray, clean_z: np.ndarray, encoder: MlpEncoder,
                    loss_fn: Callable[[tc.Tensor, int], tc.Tensor], cfg: AttackConfig,
                    rng: np.random.Generator | None = None, on_step=None) -> np.ndarray:
    """Adversarial views of ``x_hat`` maximizing a contrastive batch loss.

    ``clean_z`` holds the ``2B`` clean-view embeddings (held constant);
    ``loss_fn(Z, B)`` scores the full ``3B``-row embedding matrix.  Encoder
    parameters enter the graph behind stop-gradient.
    """
    B = x_hat.shape[0]

    def loss_grad(x):
        g = tc.Graph()
        leaf = g.leaf(x, name="x_adv")
        _, z_adv = encoder.forward(leaf, encoder.bind(g, frozen=True))
        Z = tc.concat_rows([g.constant(clean_z), z_adv])
        loss = loss_fn(Z, B)
        tc.backward(loss)
        return loss.value, leaf.grad

    return pgd_ascent(x_hat, loss_grad, cfg, rng, on_step)


def per_example_ce(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return logz - shifted[np.arange(len(y)), y]


def pgd_supervised(x: np.ndarray, y: np.ndarray, encoder: MlpEncoder,
                   classifier: LinearClassifier, cfg: AttackConfig,
                   rng: np.random.Generator | None = None, on_step=None) -> np.ndarray:
    """Per-example PGD on cross-entropy through encoder and linear head."""
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= classifier.n_classes):
        raise ValueError("labels outside the classifier's range")
    n = len(y)

    def loss_grad(xa):
        g = tc.Graph()
        leaf = g.leaf(xa, name="x_adv")
        h, _ = encoder.forward(leaf, encoder.bind(g, frozen=True))
        logits = classify(h, classifier.bind(g, frozen=True))
        loss = tc.softmax_cross_entropy(logits, y)
        tc.backward(loss)
        # mean CE gradient scaled back to per-example objectives
        return per_example_ce(logits.value, y), leaf.grad * n

    return pgd_ascent(x, loss_grad, cfg, rng, on_step)
