"""Asymmetric InfoNCE loss family.

Batch layout (CoreACL): for ``B`` instances the embedding matrix ``Z`` has
``3B`` unit rows ordered ``[clean view 1 | clean view 2 | adversarial view]``.
Row ``v * B + i`` is view ``v`` of instance ``i``.  Anchors are the ``2B``
clean rows; each has ``M = 2`` positives (its other clean view and its
adversarial view) and ``N = 3(B - 1)`` negatives (every view of every other
instance).

Inside the losses the asymmetric similarity is used with ``gain=2`` so that
``alpha = 0.5`` reproduces the symmetric similarity in value *and* gradient;
:func:`sim_alpha` on its own defaults to the plain ``alpha / (1 - alpha)``
split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import tensor_core as tc

WEIGHT_MODES = ("uniform", "similarity")
LOSS_GAIN = 2.0
NORM_TOL = 1e-6


@dataclass
class LossConfig:
    t: float = 0.5
    alpha: float = 0.3
    gamma: float = 1.0
    tau: float = 0.1
    weight_mode: str = "similarity"

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"temperature must be > 0, got {self.t}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")


# ---------------------------------------------------------------------------
# similarity


def pairwise_cosine(Z: tc.Tensor) -> tc.Tensor:
    """``Z Z^T`` for unit-norm rows."""
    norms = np.linalg.norm(Z.value, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"pairwise_cosine: rows are not unit norm "
                         f"(max deviation {np.max(np.abs(norms - 1.0)):.3g})")
    return Z @ Z.T


def sim_alpha(z_i: tc.Tensor, z_j: tc.Tensor, alpha: float, gain: float = 1.0) -> tc.Tensor:
    """Similarity whose value is ``<z_i, z_j>`` but whose gradient is split.

    The gradient reaching ``z_i`` is ``gain * alpha * z_j`` and the one
    reaching ``z_j`` is ``gain * (1 - alpha) * z_i``.  Rank-1 inputs give a
    scalar, rank-2 inputs (``m x K`` and ``n x K``) give the ``m x n`` matrix.
    """
    if z_i.value.ndim == 1:
        left = tc.dot_rows(z_i, tc.stop_gradient(z_j))
        right = tc.dot_rows(tc.stop_gradient(z_i), z_j)
    else:
        left = z_i @ tc.stop_gradient(z_j).T
        right = tc.stop_gradient(z_i) @ z_j.T
    mixed = tc.scale(left, gain * alpha) + tc.scale(right, gain * (1.0 - alpha))
    # value stays exactly <z_i, z_j>; only the mixed term carries gradient
    return tc.stop_gradient(left) + (mixed - tc.stop_gradient(mixed))


def pair_weights(S, t: float, mode: str) -> np.ndarray:
    """Importance weights for pairs; always returned as constants."""
    S = np.asarray(S.value if isinstance(S, tc.Tensor) else S, dtype=np.float64)
    if mode == "uniform":
        return np.ones_like(S)
    if mode == "similarity":
        return np.exp(S / t)
    raise ValueError(f"unknown weight mode {mode!r}")


def lambda_pos_coeff(M: int, N: int, tau: float) -> float:
    """Positive-pair factor ``(M - (M + N) tau) / (M (1 - tau))``.

    Exposed for inspection only; the losses keep a unit positive weight in the
    numerator because this factor goes negative once ``N tau > M (1 - tau)``.
    """
    if not tau < 1:
        raise ValueError(f"tau must be < 1, got {tau}")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    return (M - (M + N) * tau) / (M * (1.0 - tau))


def mass_floor(N: int, t: float) -> float:
    return N * math.exp(-1.0 / t)


def debiased_negative_mass(neg_sims: tc.Tensor, pos_sims: tc.Tensor, w_n, w_p,
                           tau: float, M: int, N: int, t: float) -> tc.Tensor:
    """PU-debiased, reweighted negative mass, clamped below at ``N e^{-1/t}``.

    ``neg_sims`` / ``pos_sims`` are rank-1 tensors of length ``N`` / ``M``;
    the weights are plain arrays and get no gradient.
    """
    if M == 0 and tau > 0:
        raise ValueError("debiased_negative_mass: M = 0 with tau > 0")
    if neg_sims.shape != (N,) or pos_sims.shape != (M,):
        raise tc.ShapeError("debiased-negative-mass", neg_sims.shape, pos_sims.shape)
    g = neg_sims.graph
    inv_t = 1.0 / t
    neg = tc.sum(tc.exp(tc.scale(neg_sims, inv_t)) * g.constant(np.broadcast_to(w_n, (N,))))
    raw = neg
    if M > 0 and tau > 0:
        pos = tc.sum(tc.exp(tc.scale(pos_sims, inv_t)) * g.constant(np.broadcast_to(w_p, (M,))))
        raw = neg - tc.scale(pos, N / M * tau)
    raw = tc.scale(raw, 1.0 / (1.0 - tau))
    return tc.clamp_min(raw, mass_floor(N, t))


# ---------------------------------------------------------------------------
# per-pair losses


def _rows(z_negs):
    return z_negs is not None and z_negs.value.ndim == 2 and z_negs.shape[0] > 0


def infonce(z_i: tc.Tensor, z_j: tc.Tensor, z_negs: tc.Tensor | None, t: float) -> tc.Tensor:
    """Symmetric InfoNCE for anchor ``z_i``, positive ``z_j`` (rank-1 tensors)."""
    if z_j is None:
        raise ValueError("infonce needs a positive")
    s_ij = tc.dot_rows(z_i, z_j)
    pos = tc.exp(tc.scale(s_ij, 1.0 / t))
    if not _rows(z_negs):
        return tc.log(pos) - tc.scale(s_ij, 1.0 / t)
    s_ik = z_negs @ tc.reshape(z_i, (-1, 1))
    neg = tc.sum(tc.exp(tc.scale(s_ik, 1.0 / t)))
    return tc.log(pos + neg) - tc.scale(s_ij, 1.0 / t)


def a_infonce(z_i: tc.Tensor, z_j: tc.Tensor, z_negs: tc.Tensor | None, alpha: float,
              lam_p: float, lam_n, t: float, gain: float = LOSS_GAIN) -> tc.Tensor:
    """Asymmetric InfoNCE for one anchor/positive pair.

    ``lam_n`` is a scalar or one weight per negative row.  Every similarity
    in the call goes through :func:`sim_alpha` with the anchor on the
    ``alpha`` side.
    """
    if not lam_p > 0:
        raise ValueError(f"lam_p must be > 0 in the numerator, got {lam_p}")
    g = z_i.graph
    inv_t = 1.0 / t
    s_ij = sim_alpha(z_i, z_j, alpha, gain)
    pos = tc.scale(tc.exp(tc.scale(s_ij, inv_t)), lam_p)
    denom = pos
    if _rows(z_negs):
        n = z_negs.shape[0]
        lam = np.broadcast_to(np.asarray(lam_n, dtype=np.float64), (n,))
        if np.any(lam < 0):
            raise ValueError("lam_n must be >= 0")
        s_ik = sim_alpha(tc.reshape(z_i, (1, -1)), z_negs, alpha, gain)
        denom = pos + tc.sum(tc.exp(tc.scale(s_ik, inv_t)) * g.constant(lam[None, :]))
    if not denom.value > 0:
        raise ArithmeticError("a_infonce: non-positive denominator")
    return tc.log(denom) - tc.scale(s_ij, inv_t) - g.constant(math.log(lam_p))


# ---------------------------------------------------------------------------
# batched CoreACL losses


@lru_cache(maxsize=64)
def coreacl_layout(B: int):
    """Index structure for a CoreACL batch of ``B`` instances.

    Returns ``(anchors, clean_pos, adv_pos, neg_mask, pos_mask)`` where the
    masks are ``2B x 3B`` float arrays over columns of ``Z``.
    """
    if B < 1:
        raise ValueError("batch needs at least one instance")
    anchors = np.arange(2 * B)
    inst = anchors % B
    clean_pos = np.where(anchors < B, anchors + B, anchors - B)
    adv_pos = 2 * B + inst
    col_inst = np.arange(3 * B) % B
    neg_mask = (col_inst[None, :] != inst[:, None]).astype(np.float64)
    pos_mask = np.zeros((2 * B, 3 * B))
    pos_mask[anchors, clean_pos] = 1.0
    pos_mask[anchors, adv_pos] = 1.0
    for a in (anchors, clean_pos, adv_pos, neg_mask, pos_mask):
        a.flags.writeable = False
    return anchors, clean_pos, adv_pos, neg_mask, pos_mask


def positives(a: int, B: int) -> list[int]:
    _, cp, ap, _, _ = coreacl_layout(B)
    return [int(cp[a]), int(ap[a])]


def negatives(a: int, B: int) -> list[int]:
    return [int(c) for c in np.flatnonzero(coreacl_layout(B)[3][a])]


def _onehot(cols, n_cols):
    m = np.zeros((len(cols), n_cols))
    m[np.arange(len(cols)), cols] = 1.0
    return m


def _anchor_sims(Z: tc.Tensor, B: int, alpha: float | None, gain: float) -> tc.Tensor:
    A = tc.take_rows(Z, coreacl_layout(B)[0])
    if alpha is None:
        return A @ Z.T
    return sim_alpha(A, Z, alpha, gain)


def _pair_terms(Z: tc.Tensor, B: int, pos_cols, alpha: float | None, t: float, *,
                tau: float = 0.0, weight_mode: str = "uniform", debias: bool = False,
                gain: float = LOSS_GAIN) -> tc.Tensor:
    """Per-anchor loss vector (length 2B) for anchors paired with ``pos_cols``.

    ``alpha=None`` means the plain symmetric similarity (InfoNCE).
    """
    g = Z.graph
    _, _, _, neg_mask, pos_mask = coreacl_layout(B)
    n_cols = 3 * B
    S = _anchor_sims(Z, B, alpha, gain)
    scaled = tc.scale(S, 1.0 / t)
    E = tc.exp(scaled)
    pick = g.constant(_onehot(pos_cols, n_cols))
    if weight_mode == "similarity":
        # detached exp(sim / t): the weight is an importance factor, not a signal
        w = tc.stop_gradient(tc.exp(tc.scale(S, 1.0 / t))) * g.constant(neg_mask)
    elif weight_mode == "uniform":
        w = g.constant(neg_mask)
    else:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    mass = tc.sum(E * w, axis=1)
    if debias:
        N = 3 * (B - 1)
        M = 2
        if tau > 0 and N > 0:
            allpos = tc.sum(E * g.constant(pos_mask), axis=1)
            mass = mass - tc.scale(allpos, N / M * tau)
        mass = tc.clamp_min(tc.scale(mass, 1.0 / (1.0 - tau)), mass_floor(N, t))
    pos = tc.sum(E * pick, axis=1)
    logit_pos = tc.sum(scaled * pick, axis=1)
    return tc.log(pos + mass) - logit_pos


def _reduce(vec: tc.Tensor, reduction: str) -> tc.Tensor:
    if reduction == "sum":
        return tc.sum(vec)
    if reduction == "mean":
        return tc.mean(vec)
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_batch(Z: tc.Tensor, B: int):
    if Z.value.ndim != 2 or Z.shape[0] != 3 * B:
        raise ValueError(f"expected {3 * B} rows (clean, clean, adversarial) for B={B}, "
                         f"got shape {Z.shape}")


class LossTerms(NamedTuple):
    total: tc.Tensor
    clean: tc.Tensor
    adv: tc.Tensor


def infonce_terms(Z, B, t, reduction="sum") -> LossTerms:
    """Symmetric CoreACL baseline: plain InfoNCE over both clean positives."""
    _check_batch(Z, B)
    _, cp, ap, _, _ = coreacl_layout(B)
    clean = _reduce(_pair_terms(Z, B, cp, None, t), reduction)
    adv = _reduce(_pair_terms(Z, B, ap, None, t), reduction)
    return LossTerms(clean + adv, clean, adv)


def ip_terms(Z, B, alpha, gamma, t, reduction="sum") -> LossTerms:
    _check_batch(Z, B)
    _, cp, ap, _, _ = coreacl_layout(B)
    clean = _reduce(_pair_terms(Z, B, cp, 0.5, t), reduction)
    adv = _reduce(_pair_terms(Z, B, ap, alpha, t), reduction)
    return LossTerms(clean + tc.scale(adv, gamma), clean, adv)


def hn_terms(Z, B, alpha, tau, t, weight_mode="similarity", reduction="sum") -> LossTerms:
    _check_batch(Z, B)
    _, cp, ap, _, _ = coreacl_layout(B)
    kw = dict(tau=tau, weight_mode=weight_mode, debias=True)
    clean = _reduce(_pair_terms(Z, B, cp, alpha, t, **kw), reduction)
    adv = _reduce(_pair_terms(Z, B, ap, alpha, t, **kw), reduction)
    return LossTerms(clean + adv, clean, adv)


def ip_hn_terms(Z, B, alpha, gamma, tau, t, weight_mode="similarity", reduction="sum") -> LossTerms:
    _check_batch(Z, B)
    _, cp, ap, _, _ = coreacl_layout(B)
    kw = dict(tau=tau, weight_mode=weight_mode, debias=True)
    clean = _reduce(_pair_terms(Z, B, cp, 0.5, t, **kw), reduction)
    adv = _reduce(_pair_terms(Z, B, ap, alpha, t, **kw), reduction)
    return LossTerms(clean + tc.scale(adv, gamma), clean, adv)


def loss_infonce(Z, B, t, reduction="sum"):
    return infonce_terms(Z, B, t, reduction).total


def loss_ip(Z, B, alpha, gamma, t, reduction="sum"):
    """Clean pairs at alpha = 0.5 plus ``gamma`` times clean-to-adversarial pairs at ``alpha``."""
    return ip_terms(Z, B, alpha, gamma, t, reduction).total


def loss_hn(Z, B, alpha, tau, t, weight_mode="similarity", reduction="sum"):
    """Both positives per clean anchor, debiased and reweighted negatives."""
    return hn_terms(Z, B, alpha, tau, t, weight_mode, reduction).total


def loss_ip_hn(Z, B, alpha, gamma, tau, t, weight_mode="similarity", reduction="sum"):
    return ip_hn_terms(Z, B, alpha, gamma, tau, t, weight_mode, reduction).total


LOSS_KINDS = ("infonce", "ip", "hn", "ip_hn")


def loss_terms(kind: str, Z: tc.Tensor, B: int, cfg: LossConfig, alpha: float,
               reduction: str = "sum") -> LossTerms:
    """Dispatch on ``kind`` with hyperparameters from ``cfg`` and the current ``alpha``."""
    if kind == "infonce":
        return infonce_terms(Z, B, cfg.t, reduction)
    if kind == "ip":
        return ip_terms(Z, B, alpha, cfg.gamma, cfg.t, reduction)
    if kind == "hn":
        return hn_terms(Z, B, alpha, cfg.tau, cfg.t, cfg.weight_mode, reduction)
    if kind == "ip_hn":
        return ip_hn_terms(Z, B, alpha, cfg.gamma, cfg.tau, cfg.t, cfg.weight_mode, reduction)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


# ---------------------------------------------------------------------------
# alpha annealing


@dataclass
class AnnealState:
    """Linear alpha schedule driven by the clean/adversarial embedding distance.

    During the first ``warmup_epochs`` epochs alpha stays at the configured
    value while batch distances are averaged; that average becomes
    ``d_max`` and ``d_min = d_min_ratio * d_max``.
    """

    alpha_min: float = 0.2
    alpha_max: float = 0.5
    warmup_epochs: int = 5
    d_min_ratio: float = 0.25
    momentum: float = 0.9
    d_min: float | None = None
    d_max: float | None = None
    d_smooth: float | None = None
    warm: bool = False
    _acc_sum: float = 0.0
    _acc_n: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha_min <= self.alpha_max == 0.5:
            raise ValueError("need 0 <= alpha_min <= alpha_max = 0.5")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def finish_warmup(self):
        if self._acc_n == 0:
            raise ValueError("no distances observed during warm-up")
        self.d_max = self._acc_sum / self._acc_n
        self.d_min = self.d_min_ratio * self.d_max
        self.d_smooth = self.d_max
        self.warm = True
        if not self.d_max > self.d_min:
            raise ValueError(f"anneal: d_max={self.d_max} must exceed d_min={self.d_min}")


def alpha_from_distance(d: float, alpha_min: float, alpha_max: float,
                        d_min: float, d_max: float) -> float:
    """Linear map taking ``d_max -> alpha_min`` and ``d_min -> alpha_max``, clamped."""
    if not d_max > d_min:
        raise ValueError(f"anneal: d_max={d_max} must exceed d_min={d_min}")
    a = alpha_min + (d_max - d) * (alpha_max - alpha_min) / (d_max - d_min)
    return min(max(a, alpha_min), alpha_max)


def anneal_alpha(state: AnnealState, d_batch: float, fixed_alpha: float) -> float:
    if d_batch < 0:
        raise ValueError("distance must be >= 0")
    if not state.warm:
        state._acc_sum += float(d_batch)
        state._acc_n += 1
        return fixed_alpha
    m = state.momentum
    state.d_smooth = m * state.d_smooth + (1.0 - m) * float(d_batch)
    return alpha_from_distance(state.d_smooth, state.alpha_min, state.alpha_max,
                               state.d_min, state.d_max)


def clean_adv_distance(Z: np.ndarray, B: int) -> float:
    """Mean ``||z_anchor - z_adv||`` over both clean views of each instance."""
    anchors, _, adv_pos, _, _ = coreacl_layout(B)
    return float(np.mean(np.linalg.norm(Z[anchors] - Z[adv_pos], axis=1)))
