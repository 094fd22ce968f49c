"""MLP encoder producing backbone features and unit-norm projections."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc


@dataclass(frozen=True)
class EncoderDims:
    d_in: int
    hidden: tuple[int, ...] = (128, 128)
    h: int = 128
    k: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.d_in < 1 or self.h < 1 or self.k < 1 or not self.hidden \
                or any(w < 1 for w in self.hidden):
            raise ValueError(f"all encoder dims must be >= 1, got {self}")
        if self.hidden[-1] != self.h:
            raise ValueError(f"h={self.h} must equal the last hidden width {self.hidden[-1]}")


def _he_normal(rng, fan_out, fan_in):
    return rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)


@dataclass
class MlpEncoder:
    """Backbone ``relu(W x + b)`` layers followed by a linear projection.

    Parameters live in ``params`` as ndarrays keyed ``backbone.{i}.W``,
    ``backbone.{i}.b``, ``proj.W`` and ``proj.b``.
    """

    dims: EncoderDims
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        out = []
        for i in range(len(self.dims.hidden)):
            out += [f"backbone.{i}.W", f"backbone.{i}.b"]
        return out + ["proj.W", "proj.b"]

    def n_params(self) -> int:
        return int(sum(self.params[n].size for n in self.names))

    def copy(self) -> "MlpEncoder":
        return MlpEncoder(self.dims, {k: v.copy() for k, v in self.params.items()})

    def bind(self, graph: tc.Graph, frozen: bool = False) -> dict[str, tc.Tensor]:
        """Attach parameters to ``graph`` as leaves (or stopped leaves)."""
        out = {}
        for n in self.names:
            leaf = graph.leaf(self.params[n], name=n, requires_grad=not frozen)
            out[n] = tc.stop_gradient(leaf) if frozen else leaf
        return out

    def forward(self, x: tc.Tensor, bound: dict[str, tc.Tensor]):
        """Return ``(h, z)`` tensors for input tensor ``x``."""
        if x.value.ndim != 2 or x.shape[1] != self.dims.d_in:
            raise tc.ShapeError("encode", x.shape, (None, self.dims.d_in))
        h = x
        for i in range(len(self.dims.hidden)):
            h = tc.relu(h @ bound[f"backbone.{i}.W"].T + bound[f"backbone.{i}.b"])
        p = h @ bound["proj.W"].T + bound["proj.b"]
        return h, tc.l2_normalize_rows(p)

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Plain-array forward pass (no gradient bookkeeping kept)."""
        g = tc.Graph()
        h, z = self.forward(g.constant(np.asarray(x, dtype=np.float64)), self.bind(g, frozen=True))
        return h.value, z.value


def init_params(seed: int, dims: EncoderDims) -> MlpEncoder:
    """He-normal weights from ``default_rng(seed)``, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    fan_in = dims.d_in
    for i, width in enumerate(dims.hidden):
        params[f"backbone.{i}.W"] = _he_normal(rng, width, fan_in)
        params[f"backbone.{i}.b"] = np.zeros(width)
        fan_in = width
    params["proj.W"] = _he_normal(rng, dims.k, dims.h)
    params["proj.b"] = np.zeros(dims.k)
    return MlpEncoder(dims, params)


@dataclass
class LinearClassifier:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros(cls, n_classes: int, h: int) -> "LinearClassifier":
        return cls(np.zeros((n_classes, h)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(self.W.copy(), self.b.copy())

    def bind(self, graph: tc.Graph, frozen: bool = False) -> dict[str, tc.Tensor]:
        out = {}
        for n, v in (("clf.W", self.W), ("clf.b", self.b)):
            leaf = graph.leaf(v, name=n, requires_grad=not frozen)
            out[n] = tc.stop_gradient(leaf) if frozen else leaf
        return out


def classify(h: tc.Tensor, bound: dict[str, tc.Tensor]) -> tc.Tensor:
    """Affine logits ``h W^T + b``; softmax is left to the loss."""
    W = bound["clf.W"]
    if h.value.ndim != 2 or h.shape[1] != W.shape[1]:
        raise tc.ShapeError("classify", h.shape, W.shape)
    return h @ W.T + bound["clf.b"]


@dataclass
class Model:
    """Encoder plus linear head, as produced by finetuning."""

    encoder: MlpEncoder
    classifier: LinearClassifier

    def logits(self, x) -> np.ndarray:
        g = tc.Graph()
        h, _ = self.encoder.forward(g.constant(np.asarray(x, dtype=np.float64)),
                                    self.encoder.bind(g, frozen=True))
        return classify(h, self.classifier.bind(g, frozen=True)).value

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)
