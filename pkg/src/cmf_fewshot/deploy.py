"""Stripped inference models.

Under a fixed support the mean prior, and therefore every FiLM scale and
shift, is a constant. ``precompute`` evaluates them once and ``strip`` drops
the encoder and adaptation network, leaving backbone, FiLM constants and the
classifier generator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .adaptation import compute_film
from .backbone import BackboneWeights, FiLMParams
from .encoder import MeanPrior
from .episodes import Episode, FixedSupport
from .model import CNAPModel, ModelConfig, _digest, episode_accuracy
from .numerics import load_checkpoint, save_checkpoint
from .numerics.checkpoint import namespace, prefixed


class DeployError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StoredAdaptation:
    prior: MeanPrior
    film: FiLMParams
    source: str      # fixed-support descriptor
    model_hash: str  # fingerprint of the full model it was computed with

    def tensors(self) -> Dict[str, np.ndarray]:
        return {"prior": self.prior.values, **prefixed(self.film.tensors(), "film")}

    def equals(self, other: "StoredAdaptation") -> bool:
        return (
            self.source == other.source
            and self.model_hash == other.model_hash
            and self.prior.values.tobytes() == other.prior.values.tobytes()
            and self.film.equals(other.film)
        )


def precompute(model: CNAPModel, fixed: FixedSupport) -> StoredAdaptation:
    """Mean prior and FiLM parameters of ``fixed``, computed as the full pipeline would."""
    cfg = model.config.backbone
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if fixed.images.ndim != 4 or fixed.images.shape[1:] != expected:
        raise DeployError(f"fixed support images {fixed.images.shape[1:]} do not match the model input {expected}")
    if len(fixed.images) == 0:
        raise DeployError("fixed support is empty")
    prior = model.encode(fixed.images, source=fixed.descriptor())
    film = compute_film(prior, model.part("adapt"), cfg)
    return StoredAdaptation(prior, film, fixed.descriptor(), model.fingerprint())


class DeployModel:
    """Frozen backbone, classifier generator and stored FiLM constants.

    Holds no encoder or adaptation weights. ``source_hash`` is the
    fingerprint of the full model it was stripped from.
    """

    def __init__(self, config: ModelConfig, backbone: BackboneWeights, head: Dict[str, np.ndarray], stored: StoredAdaptation):
        self.config = config
        self.backbone = backbone
        self.head = dict(head)
        self.stored = stored
        self._core = CNAPModel(config, backbone, prefixed(self.head, "head"))

    @property
    def source_hash(self) -> str:
        return self.stored.model_hash

    def part(self, name: str) -> Dict[str, np.ndarray]:
        if name == "backbone":
            return dict(self.backbone.params)
        if name == "head":
            return dict(self.head)
        return {}

    def tensors(self) -> Dict[str, np.ndarray]:
        return prefixed(
            {**prefixed(self.backbone.params, "backbone"), **prefixed(self.head, "head"), **prefixed(self.stored.tensors(), "stored")},
            "deploy",
        )

    def fingerprint(self) -> str:
        return _digest(self.config.to_dict(), {**self.tensors(), "source": np.frombuffer(self.stored.source.encode(), np.uint8)})

    def __eq__(self, other) -> bool:
        return isinstance(other, DeployModel) and self.fingerprint() == other.fingerprint()

    def __hash__(self) -> int:
        return hash(self.fingerprint())

    def episode_logits(self, episode: Episode, dtype: str = "float32") -> np.ndarray:
        return self._core.episode_logits(episode, film=self.stored.film, dtype=dtype)

    def save(self, path) -> None:
        meta = {
            "kind": "deploy",
            "config": self.config.to_dict(),
            "source": self.stored.source,
            "model_hash": self.stored.model_hash,
            "prior_source": self.stored.prior.source,
        }
        save_checkpoint(path, self.tensors(), meta)

    @classmethod
    def load(cls, path) -> "DeployModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "deploy":
            raise DeployError(f"{path}: not a deploy checkpoint (kind={meta.get('kind')!r})")
        t = namespace(tensors, "deploy")
        config = ModelConfig.from_dict(meta["config"])
        backbone = BackboneWeights(config.backbone, namespace(t, "backbone"), frozen=True)
        st = namespace(t, "stored")
        stored = StoredAdaptation(
            MeanPrior(st["prior"], meta.get("prior_source", "")),
            FiLMParams.from_tensors(namespace(st, "film")),
            meta["source"],
            meta["model_hash"],
        )
        return cls(config, backbone, namespace(t, "head"), stored)


def strip(model, stored: StoredAdaptation) -> DeployModel:
    """Drop encoder and adaptation network; stripping a stripped model is a no-op."""
    if isinstance(model, DeployModel):
        if model.source_hash != stored.model_hash or not model.stored.equals(stored):
            raise DeployError("stored adaptation does not belong to this deploy model")
        return model
    if model.fingerprint() != stored.model_hash:
        raise DeployError(f"stored adaptation was computed with model {stored.model_hash}, not {model.fingerprint()}")
    stored.film.validate(model.config.backbone)
    return DeployModel(model.config, model.backbone, model.part("head"), stored)


@dataclass(frozen=True)
class Equivalence:
    max_diff: float
    argmax_agree: bool
    episodes: int
    tolerance: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.max_diff < self.tolerance and self.argmax_agree


def equivalence_check(full: CNAPModel, deployed: DeployModel, episodes: Sequence[Episode], fixed: FixedSupport, tolerance: float = 1e-6) -> Equivalence:
    """Max |logit difference| between the full pipeline under ``fixed`` and the stripped model."""
    worst, agree = 0.0, True
    for ep in episodes:
        a = full.episode_logits(ep, prior_images=fixed.images)
        b = deployed.episode_logits(ep)
        worst = max(worst, float(np.max(np.abs(a - b))))
        agree &= bool(np.array_equal(a.argmax(axis=1), b.argmax(axis=1)))
    return Equivalence(worst, agree, len(episodes), tolerance)


def deploy_accuracy(deployed: DeployModel, episodes: Sequence[Episode]) -> float:
    return float(np.mean([episode_accuracy(deployed.episode_logits(ep), ep.target_labels) for ep in episodes]))
