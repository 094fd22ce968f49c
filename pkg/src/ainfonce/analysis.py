"""Gradient-check suites, the alpha sweep and negative-pair distance histograms."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.spatial.distance import pdist

from . import losses as L
from . import tensor_core as tc
from .data import Dataset
from .encoder import EncoderDims, LinearClassifier, classify, init_params
from .train_eval import collapse_metric, evaluate, finetune, pretrain

log = logging.getLogger(__name__)

GRAD_TOL = 1e-5


@dataclass
class GradResult:
    suite: str
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def toy_embeddings(rng: np.random.Generator, B: int = 3, K: int = 4) -> np.ndarray:
    """Raw (unnormalized) rows for a CoreACL toy batch."""
    return rng.standard_normal((3 * B, K))


def _normed(fn):
    return lambda g, lv: fn(tc.l2_normalize_rows(lv["x"]))


def loss_cases(alpha: float = 0.3, gamma: float = 0.7, tau: float = 0.1, t: float = 0.5,
               B: int = 3) -> dict[str, Callable]:
    """Scalar loss builders over a raw ``3B x K`` leaf named ``x``."""
    def pair(kind):
        def f(g, lv):
            Z = tc.l2_normalize_rows(lv["x"])
            zi, zj = tc.take_rows(Z, [0]), tc.take_rows(Z, [B])
            negs = tc.take_rows(Z, L.negatives(0, B))
            zi, zj = tc.reshape(zi, (-1,)), tc.reshape(zj, (-1,))
            if kind == "infonce":
                return L.infonce(zi, zj, negs, t)
            return L.a_infonce(zi, zj, negs, alpha, 1.0, 1.5, t)
        return f

    return {
        "infonce": pair("infonce"),
        "a_infonce": pair("a_infonce"),
        "loss_ip": _normed(lambda Z: L.loss_ip(Z, B, alpha, gamma, t)),
        "loss_hn": _normed(lambda Z: L.loss_hn(Z, B, alpha, tau, t)),
        "loss_ip_hn": _normed(lambda Z: L.loss_ip_hn(Z, B, alpha, gamma, tau, t)),
    }


def loss_suite(seed: int = 0, n_batches: int = 10) -> list[GradResult]:
    out = []
    for b in range(n_batches):
        rng = np.random.default_rng([seed, b])
        x = toy_embeddings(rng)
        for name, f in loss_cases().items():
            err = tc.finite_diff_check(f, {"x": x})
            out.append(GradResult("losses", f"{name}[{b}]", err, GRAD_TOL))
    return out


def _primitive_cases(rng):
    m, n, p = rng.integers(1, 5, size=3)
    A = rng.standard_normal((m, n))
    Bm = rng.standard_normal((n, p))
    C = rng.standard_normal((m, n))
    pos = rng.uniform(0.5, 2.0, size=(m, n))
    bias = rng.standard_normal(n)
    labels = rng.integers(0, n, size=m)
    # keep relu inputs away from the kink
    R = np.where(np.abs(A) < 1e-3, 0.1, A)
    return {
        "add": (lambda g, v: tc.sum(tc.add(v["a"], v["b"]) * v["c"]), dict(a=A, b=bias, c=C)),
        "sub": (lambda g, v: tc.sum(tc.sub(v["a"], v["c"]) * v["a"]), dict(a=A, c=C)),
        "elementwise-mul": (lambda g, v: tc.sum(tc.mul(v["a"], v["c"])), dict(a=A, c=C)),
        "scalar-scale": (lambda g, v: tc.sum(tc.scale(v["a"], 1.7) * v["c"]), dict(a=A, c=C)),
        "matmul": (lambda g, v: tc.sum(tc.matmul(v["a"], v["b"]) * g.constant(np.ones((m, p)) * 0.3)
                                       + tc.matmul(v["a"], v["b"]) * tc.matmul(v["a"], v["b"])),
                   dict(a=A, b=Bm)),
        "relu": (lambda g, v: tc.sum(tc.relu(v["a"]) * g.constant(C)), dict(a=R)),
        "exp": (lambda g, v: tc.sum(tc.exp(v["a"]) * g.constant(C)), dict(a=A)),
        "log": (lambda g, v: tc.sum(tc.log(v["p"]) * g.constant(C)), dict(p=pos)),
        "sum": (lambda g, v: tc.sum(tc.sum(v["a"], axis=1) * tc.sum(v["a"], axis=1)), dict(a=A)),
        "mean": (lambda g, v: tc.mean(v["a"] * v["a"]), dict(a=A)),
        "dot-rows": (lambda g, v: tc.sum(tc.dot_rows(v["a"], v["c"]) * tc.dot_rows(v["a"], v["a"])),
                     dict(a=A, c=C)),
        "l2-normalize-rows": (lambda g, v: tc.sum(tc.l2_normalize_rows(v["a"]) * g.constant(C)),
                              dict(a=A + np.sign(A) * 0.1)),
        "softmax-cross-entropy": (lambda g, v: tc.softmax_cross_entropy(v["a"], labels), dict(a=A)),
    }


def primitive_suite(seed: int = 0, n_shapes: int = 10) -> list[GradResult]:
    out = []
    for s in range(n_shapes):
        rng = np.random.default_rng([seed, 100 + s])
        for name, (f, params) in _primitive_cases(rng).items():
            err = tc.finite_diff_check(f, params, freeze_stopped=False)
            out.append(GradResult("primitives", f"{name}[{s}]", err, GRAD_TOL))
    return out


def encoder_suite(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng([seed, 7])
    enc = init_params(seed, EncoderDims(5, (6, 4), 4, 3))
    clf = LinearClassifier(rng.standard_normal((3, 4)), rng.standard_normal(3))
    x = rng.uniform(0, 1, size=(4, 5))
    y = rng.integers(0, 3, size=4)
    names = enc.names

    def f(g, lv):
        bound = {n: lv[n] for n in names}
        h, z = enc.forward(lv["x"], bound)
        logits = classify(h, {"clf.W": lv["clf.W"], "clf.b": lv["clf.b"]})
        return tc.softmax_cross_entropy(logits, y) + tc.sum(z * g.constant(np.ones(z.shape) * 0.5))

    params = {**enc.params, "x": x, "clf.W": clf.W, "clf.b": clf.b}
    return [GradResult("encoder", "mlp+head", tc.finite_diff_check(f, params), GRAD_TOL)]


GRAD_SUITES: dict[str, Callable[[int], list[GradResult]]] = {
    "primitives": primitive_suite,
    "encoder": encoder_suite,
    "losses": loss_suite,
}


def run_gradcheck(seed: int = 0, suites: Iterable[str] | None = None) -> list[GradResult]:
    results = []
    for name in suites or GRAD_SUITES:
        results += GRAD_SUITES[name](seed)
    return results


# ---------------------------------------------------------------------------
# alpha sweep


SWEEP_FIELDS = ("alpha", "SA", "RA", "collapse")


def alpha_sweep(run_cfg, alphas, epochs: int | None = None,
                finetune_epochs: int | None = None) -> list[dict]:
    """One pretrain + LP + eval cycle per fixed alpha (L^IP, no annealing).

    Seeds and data are shared across alphas; rows come back sorted by alpha.
    """
    alphas = sorted(float(a) for a in alphas)
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    train_set, test_set = run_cfg.datasets()
    rows = []
    for a in alphas:
        tcfg = run_cfg.train_config()
        tcfg = dataclasses.replace(
            tcfg, loss_kind="ip", epochs=epochs or tcfg.epochs,
            loss=dataclasses.replace(tcfg.loss, alpha=a),
            anneal=dataclasses.replace(tcfg.anneal, enabled=False))
        fcfg = run_cfg.finetune_config()
        if finetune_epochs:
            fcfg = dataclasses.replace(fcfg, epochs=finetune_epochs)
        enc, _ = pretrain(tcfg, train_set)
        model = finetune(enc, train_set, "LP", fcfg, n_classes=train_set.n_classes)
        rep = evaluate(model, test_set, run_cfg.eval_attack, seed=run_cfg.seed)
        _, z = enc.encode(test_set.X)
        rows.append(dict(alpha=a, SA=rep.sa, RA=rep.ra, collapse=collapse_metric(z)))
        log.info("alpha=%.3f SA=%.4f RA=%.4f collapse=%.4f", a, rep.sa, rep.ra, rows[-1]["collapse"])
    return rows


# ---------------------------------------------------------------------------
# negative-pair distances


HIST_FIELDS = ("bin_lo", "bin_hi", "count")


def negative_pair_distances(Z) -> np.ndarray:
    """Euclidean distances between all pairs of distinct instances."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    return pdist(Z)


def histogram_from_embeddings(Z, bins: int) -> list[dict]:
    """Uniform bins over ``[0, 2]``; counts are fractions summing to 1."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    d = negative_pair_distances(Z)
    edges = np.linspace(0.0, 2.0, bins + 1)
    counts, _ = np.histogram(np.clip(d, 0.0, 2.0), bins=edges)
    frac = counts / counts.sum()
    return [dict(bin_lo=float(edges[k]), bin_hi=float(edges[k + 1]), count=float(frac[k]))
            for k in range(bins)]


def distance_histogram(encoder, dataset: Dataset, bins: int = 20) -> list[dict]:
    """Histogram of negative-pair distances of ``dataset``'s projections."""
    if dataset is None or dataset.n < 2:
        raise ValueError("distance_histogram needs at least two examples")
    _, z = encoder.encode(dataset.X)
    return histogram_from_embeddings(z, bins)


def mean_negative_distance(encoder, dataset: Dataset) -> float:
    _, z = encoder.encode(dataset.X)
    return float(negative_pair_distances(z).mean())
