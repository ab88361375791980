"""Set encoder producing the mean prior that drives adaptation.

Two variants share one conv stack (``conv3x3 -> ReLU -> max-pool 2x2`` per
layer, global max-pool at the end, mean over the support set):

``plain``
    each support image is encoded independently and the pooled features are
    averaged.

``cmf``
    before every layer after the first, a squeeze-style attention vector is
    computed for each sample from that layer's input (global max-pool, FC,
    ReLU, FC), the vectors are averaged over the whole support set, and the
    average rescales the layer's output channels. Scaling the conv output is
    the same as scaling the kernels, so each layer's kernels become
    set-conditioned.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .numerics import Graph, Node, kaiming_uniform

VARIANTS = ("plain", "cmf")


class EncoderConfigError(ValueError):
    pass


class EmptySupportError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channels: Tuple[int, ...] = (32, 32, 64)
    in_channels: int = 1
    kernel: int = 3
    reduction: int = 4
    variant: str = "plain"
    attention_gate: Optional[str] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise EncoderConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention_gate not in (None, "sigmoid"):
            raise EncoderConfigError(f"attention_gate must be None or 'sigmoid', got {self.attention_gate!r}")
        if self.variant == "cmf":
            for c in self.channels[:-1]:
                if c % self.reduction:
                    raise EncoderConfigError(f"attention input width {c} is not divisible by {self.reduction}")

    @property
    def prior_dim(self) -> int:
        return self.channels[-1]

    def attention_layers(self):
        """Indices of layers whose kernels receive fused attention weights."""
        return range(1, len(self.channels)) if self.variant == "cmf" else range(0)


@dataclass(frozen=True, eq=False)
class MeanPrior:
    values: np.ndarray
    source: str = ""


def init_encoder(config: EncoderConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    """Conv stack plus, for the cmf variant, one attention MLP per fused layer.

    The conv kernels are drawn first, so both variants share them for a seed.
    """
    rng = np.random.default_rng([seed, 1])
    params: Dict[str, np.ndarray] = {}
    c_in = config.in_channels
    for i, c in enumerate(config.channels):
        params[f"conv{i}/w"] = kaiming_uniform(rng, (c, c_in, config.kernel, config.kernel))
        params[f"conv{i}/b"] = np.zeros(c, np.float32)
        c_in = c
    for i in config.attention_layers():
        c_prev, c_out = config.channels[i - 1], config.channels[i]
        hidden = c_prev // config.reduction
        params[f"attn{i}/fc1/w"] = kaiming_uniform(rng, (hidden, c_prev))
        params[f"attn{i}/fc1/b"] = np.zeros(hidden, np.float32)
        params[f"attn{i}/fc2/w"] = kaiming_uniform(rng, (c_out, hidden))
        params[f"attn{i}/fc2/b"] = np.zeros(c_out, np.float32)
    return params


def attention_graph(g: Graph, fmap: Node, w: Dict[str, Node], layer: int, gate: Optional[str] = None) -> Node:
    pooled = g.global_max_pool(fmap)
    h = g.relu(g.linear(pooled, w[f"attn{layer}/fc1/w"], w[f"attn{layer}/fc1/b"]))
    sf = g.linear(h, w[f"attn{layer}/fc2/w"], w[f"attn{layer}/fc2/b"], name=f"encoder/salient{layer}")
    if gate == "sigmoid":
        sf = g.sigmoid(sf)
    return sf


def encoder_graph(g: Graph, x: Node, w: Dict[str, Node], config: EncoderConfig) -> Node:
    """Mean prior node of shape [D_r] for support images ``x``."""
    if x.shape[0] == 0:
        raise EmptySupportError("empty support set")
    pad = config.kernel // 2
    attn = set(config.attention_layers())
    h = x
    for i in range(len(config.channels)):
        fused = g.mean_set(attention_graph(g, h, w, i, config.attention_gate), name=f"encoder/fused{i}") if i in attn else None
        h = g.conv2d(h, w[f"conv{i}/w"], w[f"conv{i}/b"], stride=1, pad=pad, name=f"encoder/conv{i}")
        if fused is not None:
            h = g.channel_scale(h, fused, name=f"encoder/cmf{i}")
        h = g.relu(h)
        h = g.max_pool2d(h, 2)
    pooled = g.global_max_pool(h, name="encoder/pooled")
    return g.mean_set(pooled, name="encoder/prior")


# eager helpers mirroring the graph pieces ------------------------------------


def _consts(g: Graph, params: Dict[str, np.ndarray]) -> Dict[str, Node]:
    return {k: g.const(v) for k, v in params.items()}


def attention_vector(feature_map: np.ndarray, fc1_w, fc1_b, fc2_w, fc2_b, dtype: str = "float32") -> np.ndarray:
    """Salient feature per sample: max-pool over H, W then FC -> ReLU -> FC."""
    if fc1_w.shape[1] != feature_map.shape[1]:
        raise EncoderConfigError(f"attention expects {fc1_w.shape[1]} channels, feature map has {feature_map.shape[1]}")
    if feature_map.shape[1] % 4:
        raise EncoderConfigError(f"channel count {feature_map.shape[1]} is not divisible by 4")
    g = Graph(dtype, keep_ctx=False)
    w = {"attn0/fc1/w": g.const(fc1_w), "attn0/fc1/b": g.const(fc1_b), "attn0/fc2/w": g.const(fc2_w), "attn0/fc2/b": g.const(fc2_b)}
    return attention_graph(g, g.input("f", feature_map), w, 0).value


def fuse_salient(sf: np.ndarray) -> np.ndarray:
    """Average the per-sample attention vectors over the support set."""
    sf = np.asarray(sf)
    if sf.ndim != 2 or sf.shape[0] == 0:
        raise EmptySupportError("empty support set")
    g = Graph("float64" if sf.dtype == np.float64 else "float32", keep_ctx=False)
    return g.mean_set(g.input("sf", sf)).value


def cmf_layer(inputs: np.ndarray, kernels: np.ndarray, fused: np.ndarray, bias: Optional[np.ndarray] = None, pad: Optional[int] = None, dtype: str = "float32") -> np.ndarray:
    """Convolution whose output channel ``c`` is multiplied by ``fused[c]``."""
    if fused.shape != (kernels.shape[0],):
        raise EncoderConfigError(f"fused weights {fused.shape} do not match {kernels.shape[0]} kernels")
    g = Graph(dtype, keep_ctx=False)
    b = None if bias is None else g.const(bias)
    out = g.conv2d(g.input("x", inputs), g.const(kernels), b, pad=kernels.shape[2] // 2 if pad is None else pad)
    return g.channel_scale(out, g.const(fused)).value


def encode_mean(images: np.ndarray, params: Dict[str, np.ndarray], config: EncoderConfig, dtype: str = "float32", source: str = "") -> MeanPrior:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise EmptySupportError("empty support set")
    g = Graph(dtype, keep_ctx=False)
    prior = encoder_graph(g, g.input("support", images), _consts(g, params), config)
    return MeanPrior(prior.value, source)
