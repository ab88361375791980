"""Episodic meta-training of encoder, adaptation network and classifier head."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backbone import BackboneWeights
from .episodes import Dataset, Episode, sample_episode
from .model import CNAPModel, ModelConfig, episode_accuracy
from .numerics import Adam
from .numerics.gradcheck import numeric_gradient, relative_error

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    episodes_total: int = 5000
    lr: float = 0.0005
    batch_size: int = 16
    validate_every: int = 200
    validation_episodes: int = 50
    way: int = 5
    shot: int = 1
    query: int = 10
    seed: int = 0
    variant: str = "plain"

    def __post_init__(self):
        if self.episodes_total < 0:
            raise TrainingError("episodes_total must be >= 0")
        for name in ("batch_size", "validate_every", "validation_episodes", "way", "shot", "query"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive")
        if not self.lr > 0:
            raise TrainingError("lr must be > 0")


@dataclass
class RunLog:
    datasets: List[str]
    rows: List[Dict] = field(default_factory=list)  # one per (validation, dataset)
    train_losses: List[float] = field(default_factory=list)
    best_episode: Optional[int] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def validation_rows(self) -> List[Dict[str, float]]:
        """One ``{dataset: accuracy}`` mapping per validation, in order."""
        out: Dict[int, Dict[str, float]] = {}
        for r in self.rows:
            out.setdefault(r["episode"], {})[r["dataset"]] = r["accuracy"]
        return [out[k] for k in sorted(out)]

    def accuracy_sequence(self) -> List[Tuple[int, str, float]]:
        return [(r["episode"], r["dataset"], r["accuracy"]) for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "dataset", "accuracy", "loss"])
            for r in self.rows:
                w.writerow([r["episode"], r["dataset"], f"{r['accuracy']:.6f}", f"{r['loss']:.6f}"])


def episode_loss(model: CNAPModel, episode: Episode, dtype: str = "float32", params=None, prior_images=None):
    """Graph, logits node and cross-entropy node for one episode."""
    return model.episode_graph(
        episode.support_images,
        episode.support_labels,
        episode.target_images,
        episode.target_labels,
        way=episode.way,
        prior_images=prior_images,
        dtype=dtype,
        train=True,
        params=params,
    )


def check_episode_gradients(
    model: CNAPModel,
    episode: Episode,
    params=None,
    h: float = 1e-5,
    max_entries: int = 12,
    seed: int = 0,
    kink_tol: Optional[float] = 1e-6,
    skipped: Optional[Dict[str, int]] = None,
) -> Dict[str, float]:
    """Max relative error of the float64 episode-loss gradient per trainable tensor.

    Probed entries that straddle a ReLU or max-pool kink (see
    :func:`numeric_gradient`) are excluded; their count per tensor goes into
    ``skipped`` when given.
    """
    params = {k: np.asarray(v, np.float64) for k, v in (model.params if params is None else params).items()}
    g, _, loss = episode_loss(model, episode, dtype="float64", params=params)
    analytic = g.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name in sorted(params):
        kinks: List[int] = []
        numeric = numeric_gradient(
            lambda v: float(episode_loss(model, episode, "float64", v)[2].value), params, name, h=h, max_entries=max_entries, rng=rng, kink_tol=kink_tol, skipped=kinks
        )
        if skipped is not None:
            skipped[name] = len(kinks)
        idx = np.array(sorted(numeric), dtype=int)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], np.array([numeric[i] for i in idx]))
    return errors


def select_model(best: Mapping[str, float], candidate: Mapping[str, float]) -> bool:
    """True when ``candidate`` is strictly better on more than half the datasets."""
    if set(best) != set(candidate):
        raise TrainingError(f"validation rows cover different datasets: {sorted(best)} vs {sorted(candidate)}")
    wins = sum(candidate[k] > best[k] for k in best)
    return wins * 2 > len(best)


def validation_episodes(datasets: Sequence[Dataset], config: TrainConfig) -> Dict[str, List[Episode]]:
    return {
        d.id: [
            sample_episode(d, config.way, config.shot, config.query, seed=(config.seed, 7919, i), split="val")
            for i in range(config.validation_episodes)
        ]
        for d in datasets
    }


def validate(model: CNAPModel, episodes: Mapping[str, List[Episode]]) -> Dict[str, Tuple[float, float]]:
    """Mean accuracy and mean loss per dataset."""
    out = {}
    for name, eps in episodes.items():
        accs, losses = [], []
        for ep in eps:
            _, logits, loss = model.episode_graph(
                ep.support_images, ep.support_labels, ep.target_images, ep.target_labels, way=ep.way, train=False
            )
            accs.append(episode_accuracy(logits.value, ep.target_labels))
            losses.append(float(loss.value))
        out[name] = (float(np.mean(accs)), float(np.mean(losses)))
    return out


def train(config: TrainConfig, datasets: Sequence[Dataset], backbone: Optional[BackboneWeights], model_config: Optional[ModelConfig] = None, out_dir=None, progress: bool = False) -> Tuple[CNAPModel, RunLog]:
    """Meta-train and return the best model by the over-half-of-datasets rule.

    Each meta-update averages gradients over ``batch_size`` episodes; the
    domain of every episode is drawn uniformly. Validation runs after the
    meta-update that crosses each multiple of ``validate_every`` and after the
    last one.
    """
    if backbone is None:
        raise TrainingError("training needs a pretrained backbone")
    if not backbone.frozen:
        raise TrainingError("backbone must be frozen before meta-training")
    if not datasets:
        raise TrainingError("no datasets to train on")
    if model_config is None:
        from .encoder import EncoderConfig

        model_config = ModelConfig(backbone=backbone.config, encoder=EncoderConfig(variant=config.variant), seed=config.seed)
    if model_config.variant != config.variant:
        raise TrainingError(f"model variant {model_config.variant!r} != training variant {config.variant!r}")
    model = CNAPModel(model_config, backbone)
    log = RunLog([d.id for d in datasets])
    t_start = time.perf_counter()
    if config.episodes_total == 0:
        log.timings["train_s"] = 0.0
        return model, log

    val_eps = validation_episodes(datasets, config)
    rng = np.random.default_rng([config.seed, 17])
    params = dict(model.params)
    opt = Adam(params, lr=config.lr)
    best_params, best_row = dict(params), None
    done = 0
    t_val = 0.0
    next_val = config.validate_every
    while done < config.episodes_total:
        n = min(config.batch_size, config.episodes_total - done)
        acc_grads: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in params.items()}
        for j in range(n):
            ds = datasets[int(rng.integers(len(datasets)))]
            ep = sample_episode(ds, config.way, config.shot, config.query, seed=(config.seed, done + j), split="train")
            g, _, loss = episode_loss(model, ep, params=params)
            grads = g.backward(loss)
            log.train_losses.append(float(loss.value))
            for k in sorted(grads):
                acc_grads[k] += grads[k]
        params = opt.step(params, {k: v / n for k, v in acc_grads.items()})
        done += n
        if done >= next_val or done == config.episodes_total:
            while next_val <= done:
                next_val += config.validate_every
            t0 = time.perf_counter()
            current = model.with_params(params)
            res = validate(current, val_eps)
            t_val += time.perf_counter() - t0
            for name, (acc, loss) in res.items():
                log.rows.append({"episode": done, "dataset": name, "accuracy": acc, "loss": loss})
            row = {k: v[0] for k, v in res.items()}
            if best_row is None or select_model(best_row, row):
                best_row, best_params = row, dict(params)
                log.best_episode = done
                if out_dir is not None:
                    current.save(Path(out_dir) / "best.ckpt", {"episode": done})
            if progress:
                recent = float(np.mean(log.train_losses[-config.validate_every :]))
                logger.info("episode %d  loss %.4f  val %s", done, recent, {k: round(v, 3) for k, v in row.items()})
    log.timings["train_s"] = time.perf_counter() - t_start - t_val
    log.timings["validate_s"] = t_val
    return model.with_params(best_params), log
