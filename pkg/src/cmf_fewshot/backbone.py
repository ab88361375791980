"""Frozen convolutional trunk with a FiLM site after every convolution.

Each block is ``conv3x3 (+bias) -> FiLM (scale, shift per channel) -> ReLU ->
max-pool 2x2``; a global max-pool over the last block gives the embedding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .numerics import Adam, Graph, Node, kaiming_uniform

logger = logging.getLogger(__name__)


class FiLMError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    channels: Tuple[int, ...] = (32, 32, 64, 64)
    in_channels: int = 1
    image_size: int = 32
    kernel: int = 3

    def __post_init__(self):
        if not self.channels or min(self.channels) < 1:
            raise ValueError("backbone needs at least one block with positive width")
        if self.image_size % (2 ** len(self.channels)):
            raise ValueError(f"image_size {self.image_size} must be divisible by 2**blocks")

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True, eq=False)
class FiLMParams:
    """Per-block channel scale and shift vectors."""

    scales: Tuple[np.ndarray, ...]
    shifts: Tuple[np.ndarray, ...]

    @classmethod
    def identity(cls, config: BackboneConfig, dtype=np.float32) -> "FiLMParams":
        return cls(
            tuple(np.ones(c, dtype) for c in config.channels),
            tuple(np.zeros(c, dtype) for c in config.channels),
        )

    def validate(self, config: BackboneConfig) -> None:
        if len(self.scales) != config.blocks or len(self.shifts) != config.blocks:
            raise FiLMError(f"FiLM has {len(self.scales)} blocks, backbone has {config.blocks}")
        for i, (s, b, c) in enumerate(zip(self.scales, self.shifts, config.channels)):
            if s.shape != (c,) or b.shape != (c,):
                raise FiLMError(f"block {i}: FiLM vectors {s.shape}/{b.shape} do not match width {c}")

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (s, b) in enumerate(zip(self.scales, self.shifts)):
            out[f"block{i}/scale"] = s
            out[f"block{i}/shift"] = b
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "FiLMParams":
        n = len([k for k in tensors if k.endswith("/scale")])
        return cls(tuple(tensors[f"block{i}/scale"] for i in range(n)), tuple(tensors[f"block{i}/shift"] for i in range(n)))

    def equals(self, other: "FiLMParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.scales + self.shifts, other.scales + other.shifts))


@dataclass(eq=False)
class BackboneWeights:
    config: BackboneConfig
    params: Dict[str, np.ndarray]
    frozen: bool = True
    train_accuracy: float = float("nan")

    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_backbone(config: BackboneConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    c_in = config.in_channels
    for i, c in enumerate(config.channels):
        params[f"conv{i}/w"] = kaiming_uniform(rng, (c, c_in, config.kernel, config.kernel))
        params[f"conv{i}/b"] = np.zeros(c, np.float32)
        c_in = c
    return params


FilmNodes = Sequence[Tuple[Optional[Node], Optional[Node]]]


def backbone_graph(g: Graph, x: Node, w: Dict[str, Node], film: Optional[FilmNodes], config: BackboneConfig, probes: Optional[Dict[str, Node]] = None) -> Node:
    """Embeddings [N, D_e]; ``film[i]`` may be ``(None, None)`` to skip a site.

    When ``probes`` is given, the post-FiLM pre-activation map of block ``i``
    is stored under ``"block{i}/preact"``.
    """
    h = x
    pad = config.kernel // 2
    for i in range(config.blocks):
        h = g.conv2d(h, w[f"conv{i}/w"], w[f"conv{i}/b"], stride=1, pad=pad, name=f"backbone/conv{i}")
        if film is not None:
            scale, shift = film[i]
            if scale is not None:
                h = g.channel_scale(h, scale, name=f"backbone/film{i}/scale")
            if shift is not None:
                h = g.channel_shift(h, shift, name=f"backbone/film{i}/shift")
        if probes is not None:
            probes[f"block{i}/preact"] = h
        h = g.relu(h)
        h = g.max_pool2d(h, 2)
    return g.global_max_pool(h, name="backbone/embedding")


def _const_weights(g: Graph, params: Dict[str, np.ndarray]) -> Dict[str, Node]:
    return {k: g.const(v) for k, v in params.items()}


def film_nodes(g: Graph, film: FiLMParams) -> List[Tuple[Node, Node]]:
    return [(g.const(s), g.const(b)) for s, b in zip(film.scales, film.shifts)]


def backbone_forward(images: np.ndarray, weights: BackboneWeights, film: Optional[FiLMParams] = None, dtype: str = "float32", return_preacts: bool = False):
    """Eager forward pass; ``film=None`` removes the FiLM sites entirely."""
    config = weights.config
    if images.ndim != 4 or images.shape[1] != config.in_channels:
        raise ValueError(f"expected images [N, {config.in_channels}, H, W], got {images.shape}")
    if film is not None:
        film.validate(config)
    g = Graph(dtype, keep_ctx=False)
    x = g.input("images", images)
    nodes = film_nodes(g, film) if film is not None else None
    probes: Dict[str, Node] = {}
    emb = backbone_graph(g, x, _const_weights(g, weights.params), nodes, config, probes)
    if return_preacts:
        return emb.value, {k: v.value for k, v in probes.items()}
    return emb.value


def pretrain_backbone(datasets, config: BackboneConfig = BackboneConfig(), epochs: int = 5, seed: int = 0, lr: float = 1e-3, batch_size: int = 64, split: str = "train") -> BackboneWeights:
    """Supervised pre-training on the union of ``datasets`` with identity FiLM.

    Classes of different datasets are kept distinct. A throw-away linear head
    sits on the embedding; only the trunk is returned, frozen.
    """
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    xs, ys, vx, vy = [], [], [], []
    offset = 0
    for ds in datasets:
        classes = ds.classes
        remap = {int(c): i + offset for i, c in enumerate(classes)}
        tr = ds.indices(split)
        xs.append(ds.images[tr])
        ys.append(np.array([remap[int(c)] for c in ds.labels[tr]]))
        va = ds.indices("val")
        vx.append(ds.images[va])
        vy.append(np.array([remap[int(c)] for c in ds.labels[va]], dtype=np.int64))
        offset += len(classes)
    n_classes = offset
    if n_classes < 2:
        raise ValueError("pre-training needs at least 2 classes")
    X = np.concatenate(xs)
    Y = np.concatenate(ys).astype(np.int64)
    rng = np.random.default_rng(seed)
    params = init_backbone(config, seed)
    params["head/w"] = kaiming_uniform(rng, (n_classes, config.embed_dim))
    params["head/b"] = np.zeros(n_classes, np.float32)
    opt = Adam(params, lr=lr) if epochs > 0 else None
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        correct = 0
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            g = Graph("float32")
            p = {k: g.param(k, v) for k, v in params.items()}
            emb = backbone_graph(g, g.input("x", X[idx]), p, None, config)
            logits = g.linear(emb, p["head/w"], p["head/b"])
            loss = g.softmax_cross_entropy(logits, Y[idx])
            correct += int((logits.value.argmax(1) == Y[idx]).sum())
            params = opt.step(params, g.backward(loss))
        val_acc = _pretrain_accuracy(params, config, np.concatenate(vx), np.concatenate(vy)) if vx else float("nan")
        logger.info("pretrain epoch %d: train acc %.3f, val acc %.3f", epoch + 1, correct / len(X), val_acc)
    trunk = {k: v for k, v in params.items() if not k.startswith("head/")}
    train_acc = _pretrain_accuracy(params, config, X, Y) if epochs > 0 else float("nan")
    return BackboneWeights(config, trunk, frozen=True, train_accuracy=train_acc)


def _pretrain_accuracy(params, config, X, Y, batch: int = 256) -> float:
    if len(X) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(X), batch):
        g = Graph("float32", keep_ctx=False)
        p = _const_weights(g, params)
        emb = backbone_graph(g, g.input("x", X[s : s + batch]), p, None, config)
        logits = emb.value @ params["head/w"].T + params["head/b"]
        hits += int((logits.argmax(1) == Y[s : s + batch]).sum())
    return hits / len(X)
