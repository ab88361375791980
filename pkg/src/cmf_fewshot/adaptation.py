"""Prior-to-FiLM mapping and the prototype-conditioned linear classifier.

FiLM: for every backbone block, ``scale = 1 + W_s @ prior + b_s`` and
``shift = W_b @ prior + b_b``. All four tensors start at zero, so an untrained
adaptation network leaves the backbone unchanged.

Classifier: class prototypes are the means of L2-normalised support
embeddings. A residual one-hidden-layer map turns each prototype into a weight
row (``p + fc2(relu(fc1(p)))``) and another into a bias. The output layers
start at zero, which makes the untrained head a plain nearest-mean (cosine)
classifier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import BackboneConfig, FiLMParams, backbone_forward
from .encoder import MeanPrior
from .numerics import Graph, Node, kaiming_uniform


class AdaptationError(ValueError):
    pass


def init_adaptation(prior_dim: int, config: BackboneConfig) -> Dict[str, np.ndarray]:
    params = {}
    for i, c in enumerate(config.channels):
        for kind in ("scale", "shift"):
            params[f"block{i}/{kind}/w"] = np.zeros((c, prior_dim), np.float32)
            params[f"block{i}/{kind}/b"] = np.zeros(c, np.float32)
    return params


def film_graph(g: Graph, prior: Node, w: Dict[str, Node], config: BackboneConfig) -> List[Tuple[Node, Node]]:
    d = prior.shape[0]
    row = g.reshape(prior, (1, d))
    out = []
    for i, c in enumerate(config.channels):
        s = g.linear(row, w[f"block{i}/scale/w"], w[f"block{i}/scale/b"])
        b = g.linear(row, w[f"block{i}/shift/w"], w[f"block{i}/shift/b"])
        out.append(
            (
                g.add_const(g.reshape(s, (c,)), 1.0, name=f"adapt/block{i}/scale"),
                g.reshape(b, (c,), name=f"adapt/block{i}/shift"),
            )
        )
    return out


def compute_film(prior, params: Dict[str, np.ndarray], config: BackboneConfig, dtype: str = "float32") -> FiLMParams:
    """FiLM parameters for a mean prior (a :class:`MeanPrior` or a vector)."""
    values = prior.values if isinstance(prior, MeanPrior) else np.asarray(prior)
    expected = params["block0/scale/w"].shape[1]
    if values.shape != (expected,):
        raise AdaptationError(f"prior has shape {values.shape}, adaptation network expects ({expected},)")
    g = Graph(dtype, keep_ctx=False)
    nodes = film_graph(g, g.input("prior", values), {k: g.const(v) for k, v in params.items()}, config)
    return FiLMParams(tuple(s.value for s, _ in nodes), tuple(b.value for _, b in nodes))


# classifier head -------------------------------------------------------------


def init_head(embed_dim: int, hidden: int = 64, seed: int = 0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 2])
    return {
        "w/fc1/w": kaiming_uniform(rng, (hidden, embed_dim)),
        "w/fc1/b": np.zeros(hidden, np.float32),
        "w/fc2/w": np.zeros((embed_dim, hidden), np.float32),
        "w/fc2/b": np.zeros(embed_dim, np.float32),
        "b/fc1/w": kaiming_uniform(rng, (hidden, embed_dim)),
        "b/fc1/b": np.zeros(hidden, np.float32),
        "b/fc2/w": np.zeros((1, hidden), np.float32),
        "b/fc2/b": np.zeros(1, np.float32),
    }


def class_average_matrix(labels: Sequence[int], way: int) -> np.ndarray:
    """[way, S] matrix whose row c averages the support rows labelled c."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= way):
        raise AdaptationError(f"support labels must lie in [0, {way})")
    counts = np.bincount(labels, minlength=way)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise AdaptationError(f"classes {missing} have no support samples")
    A = np.zeros((way, len(labels)))
    A[labels, np.arange(len(labels))] = 1.0
    return A / counts[:, None]


def head_graph(g: Graph, support_emb: Node, labels, way: int, w: Dict[str, Node]) -> Tuple[Node, Node]:
    """Weight rows [way, D] and biases [way] from normalised support embeddings."""
    protos = g.matmul(g.const(class_average_matrix(labels, way)), support_emb, name="head/prototypes")
    hw = g.relu(g.linear(protos, w["w/fc1/w"], w["w/fc1/b"]))
    W = g.add(protos, g.linear(hw, w["w/fc2/w"], w["w/fc2/b"]), name="head/W")
    hb = g.relu(g.linear(protos, w["b/fc1/w"], w["b/fc1/b"]))
    b = g.reshape(g.linear(hb, w["b/fc2/w"], w["b/fc2/b"]), (way,), name="head/b")
    return W, b


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    W: np.ndarray
    b: np.ndarray
    classes: Tuple[int, ...]

    @property
    def way(self) -> int:
        return self.W.shape[0]


def build_classifier(support_embeddings: np.ndarray, labels, params: Dict[str, np.ndarray], way: Optional[int] = None, classes: Optional[Sequence[int]] = None, dtype: str = "float32") -> ClassifierHead:
    """Linear head from support embeddings (normalised here) and 0-based labels."""
    labels = np.asarray(labels, dtype=np.int64)
    way = int(labels.max()) + 1 if way is None else way
    g = Graph(dtype, keep_ctx=False)
    emb = g.l2_normalize(g.input("support", support_embeddings))
    W, b = head_graph(g, emb, labels, way, {k: g.const(v) for k, v in params.items()})
    return ClassifierHead(W.value, b.value, tuple(range(way)) if classes is None else tuple(classes))


def logits_graph(g: Graph, target_emb: Node, W: Node, b: Node) -> Node:
    return g.linear(g.l2_normalize(target_emb), W, b, name="logits")


def predict(target_images: np.ndarray, backbone, film: Optional[FiLMParams], head: ClassifierHead, dtype: str = "float32") -> np.ndarray:
    """Logits [T, way]; ``argmax`` (first index on ties) gives the class."""
    emb = backbone_forward(target_images, backbone, film, dtype=dtype)
    if emb.shape[1] != head.W.shape[1]:
        raise AdaptationError(f"embedding width {emb.shape[1]} != head width {head.W.shape[1]}")
    g = Graph(dtype, keep_ctx=False)
    return logits_graph(g, g.input("emb", emb), g.const(head.W), g.const(head.b)).value
