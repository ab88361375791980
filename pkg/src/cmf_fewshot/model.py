"""The full conditional model: frozen backbone, set encoder, adaptation, head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .adaptation import compute_film, film_graph, head_graph, init_adaptation, init_head, logits_graph
from .backbone import BackboneConfig, BackboneWeights, FiLMParams, backbone_graph, film_nodes
from .encoder import EncoderConfig, MeanPrior, encode_mean, encoder_graph, init_encoder
from .episodes import Episode
from .numerics import Graph, Node, load_checkpoint, save_checkpoint
from .numerics.checkpoint import namespace, prefixed

TRAINABLE = ("encoder", "adapt", "head")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head_hidden: int = 64
    seed: int = 0

    @property
    def variant(self) -> str:
        return self.encoder.variant

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        bb["channels"] = tuple(bb["channels"])
        enc = dict(d["encoder"])
        enc["channels"] = tuple(enc["channels"])
        return cls(BackboneConfig(**bb), EncoderConfig(**enc), d["head_hidden"], d["seed"])


def _digest(config: dict, tensors: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode())
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tensors[k]).tobytes())
    return h.hexdigest()[:16]


class CNAPModel:
    """Weights plus the graph builders for one encoder variant.

    ``params`` holds only the trainable tensors, keyed ``encoder/...``,
    ``adapt/...`` and ``head/...``; the backbone is kept apart and never
    appears as a trainable leaf.
    """

    def __init__(self, config: ModelConfig, backbone: BackboneWeights, params: Optional[Dict[str, np.ndarray]] = None):
        if backbone.config != config.backbone:
            raise ValueError("backbone weights were built for a different backbone config")
        self.config = config
        self.backbone = backbone
        if params is None:
            params = {}
            params.update(prefixed(init_encoder(config.encoder, config.seed), "encoder"))
            params.update(prefixed(init_adaptation(config.encoder.prior_dim, config.backbone), "adapt"))
            params.update(prefixed(init_head(config.backbone.embed_dim, config.head_hidden, config.seed), "head"))
        self.params = params

    # weights -----------------------------------------------------------------

    def part(self, name: str) -> Dict[str, np.ndarray]:
        if name == "backbone":
            return dict(self.backbone.params)
        return namespace(self.params, name)

    def with_params(self, params: Dict[str, np.ndarray]) -> "CNAPModel":
        return CNAPModel(self.config, self.backbone, dict(params))

    def fingerprint(self) -> str:
        return _digest(self.config.to_dict(), {**prefixed(self.backbone.params, "backbone"), **self.params})

    def core_fingerprint(self) -> str:
        """Hash of the parts a stripped model keeps (config, backbone, head)."""
        return _digest(self.config.to_dict(), {**prefixed(self.backbone.params, "backbone"), **prefixed(self.part("head"), "head")})

    def tensors(self) -> Dict[str, np.ndarray]:
        return {**prefixed(self.backbone.params, "backbone"), **self.params}

    def save(self, path, meta: Optional[dict] = None) -> None:
        save_checkpoint(path, self.tensors(), {"kind": "full", "config": self.config.to_dict(), "fingerprint": self.fingerprint(), **(meta or {})})

    @classmethod
    def load(cls, path) -> "CNAPModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "full":
            raise ValueError(f"{path}: not a full-model checkpoint (kind={meta.get('kind')!r})")
        config = ModelConfig.from_dict(meta["config"])
        backbone = BackboneWeights(config.backbone, namespace(tensors, "backbone"), frozen=True)
        params = {k: v for k, v in tensors.items() if k.split("/", 1)[0] in TRAINABLE}
        return cls(config, backbone, params)

    # eager pieces ------------------------------------------------------------

    def encode(self, images: np.ndarray, source: str = "", dtype: str = "float32") -> MeanPrior:
        return encode_mean(images, self.part("encoder"), self.config.encoder, dtype=dtype, source=source)

    def film_for(self, images: np.ndarray, dtype: str = "float32") -> FiLMParams:
        return compute_film(self.encode(images, dtype=dtype), self.part("adapt"), self.config.backbone, dtype=dtype)

    # graphs ------------------------------------------------------------------

    def episode_graph(
        self,
        support_images: np.ndarray,
        support_labels: np.ndarray,
        target_images: np.ndarray,
        target_labels: Optional[np.ndarray] = None,
        way: Optional[int] = None,
        prior_images: Optional[np.ndarray] = None,
        film: Optional[FiLMParams] = None,
        dtype: str = "float32",
        train: bool = True,
        params: Optional[Dict[str, np.ndarray]] = None,
    ) -> Tuple[Graph, Node, Optional[Node]]:
        """Build logits (and loss when labels are given) for one episode.

        The FiLM prior comes from ``prior_images`` when given (AZS protocols),
        otherwise from the episode's own support; a precomputed ``film`` skips
        the encoder and adaptation network entirely. The classifier head is
        always built from the episode's own support.
        """
        params = self.params if params is None else params
        way = int(np.max(support_labels)) + 1 if way is None else way
        g = Graph(dtype, keep_ctx=train)
        leaf = g.param if train else (lambda name, v: g.const(v))
        w = {k: leaf(k, v) for k, v in sorted(params.items())}
        bb = {k: g.const(v) for k, v in self.backbone.params.items()}
        if film is not None:
            fnodes = film_nodes(g, film)
        else:
            src = support_images if prior_images is None else prior_images
            enc_w = {k[len("encoder/") :]: v for k, v in w.items() if k.startswith("encoder/")}
            prior = encoder_graph(g, g.input("prior_images", src), enc_w, self.config.encoder)
            ad_w = {k[len("adapt/") :]: v for k, v in w.items() if k.startswith("adapt/")}
            fnodes = film_graph(g, prior, ad_w, self.config.backbone)
        head_w = {k[len("head/") :]: v for k, v in w.items() if k.startswith("head/")}
        cfg = self.config.backbone
        s_emb = backbone_graph(g, g.input("support", support_images), bb, fnodes, cfg)
        t_emb = backbone_graph(g, g.input("target", target_images), bb, fnodes, cfg)
        W, b = head_graph(g, g.l2_normalize(s_emb), support_labels, way, head_w)
        logits = logits_graph(g, t_emb, W, b)
        loss = g.softmax_cross_entropy(logits, target_labels, name="loss") if target_labels is not None else None
        return g, logits, loss

    def episode_logits(self, episode: Episode, prior_images=None, film=None, dtype="float32") -> np.ndarray:
        _, logits, _ = self.episode_graph(
            episode.support_images, episode.support_labels, episode.target_images, way=episode.way,
            prior_images=prior_images, film=film, dtype=dtype, train=False,
        )
        return logits.value


def episode_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())
