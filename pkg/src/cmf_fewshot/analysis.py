"""Feature and prior analysis: PCA, Mahalanobis cluster statistics, prior
stability, per-task fluctuation, parameter counts and stage timings."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .adaptation import build_classifier, compute_film, predict
from .backbone import BackboneWeights, backbone_forward
from .episodes import Dataset, make_fixed_support, sample_episode
from .evaluation import EvalSettings, task_seed
from .model import episode_accuracy

logger = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


# PCA -------------------------------------------------------------------------


@dataclass(frozen=True)
class PCAFit:
    mean: np.ndarray        # [D]
    components: np.ndarray  # [k, D], orthonormal rows
    variances: np.ndarray   # [k], covariance eigenvalues (ddof=1)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, projected: np.ndarray) -> np.ndarray:
        return projected @ self.components + self.mean


def pca_fit(features: np.ndarray, out_dims: int) -> PCAFit:
    """Top principal directions of mean-centred data.

    Each component is sign-fixed so its largest-magnitude coordinate is
    positive (the first such coordinate on ties).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise AnalysisError(f"features must be 2-D, got shape {X.shape}")
    m, d = X.shape
    if not 1 <= out_dims < m or out_dims > d:
        raise AnalysisError(f"need 1 <= out_dims < M and out_dims <= D; got out_dims={out_dims}, M={m}, D={d}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (m - 1)
    if not np.trace(cov) > 0:
        raise AnalysisError("zero variance: all feature rows are identical")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dims]
    comps = vecs[:, order].T
    pivot = np.abs(comps).argmax(axis=1)
    comps *= np.sign(comps[np.arange(out_dims), pivot])[:, None]
    return PCAFit(mean, comps, np.maximum(vals[order], 0.0))


def pca_project(features: np.ndarray, out_dims: int) -> np.ndarray:
    return pca_fit(features, out_dims).transform(features)


# Mahalanobis cluster statistics ------------------------------------------------


@dataclass(frozen=True)
class ClusterStats:
    inner_class: float
    inter_class: float
    dims: int


def _pair_distances(Z: np.ndarray, precision: np.ndarray) -> np.ndarray:
    """Upper-triangle Mahalanobis distances between rows of ``Z``."""
    i, j = np.triu_indices(len(Z), k=1)
    diff = Z[i] - Z[j]
    return np.sqrt(np.maximum(np.einsum("nd,de,ne->n", diff, precision, diff), 0.0))


def pooled_precision(Z: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Inverse of the pooled covariance plus ``ridge * trace/dim`` on the diagonal."""
    d = Z.shape[1]
    cov = np.cov(Z, rowvar=False, ddof=1).reshape(d, d)
    eps = ridge * np.trace(cov) / d
    reg = cov + eps * np.eye(d)
    if not eps > 0 or np.linalg.cond(reg) > 1e12:
        raise AnalysisError("covariance is singular even after the ridge")
    return np.linalg.inv(reg)


def mahalanobis_stats(features: np.ndarray, labels: Sequence[int], pca_dims: int = 64) -> ClusterStats:
    """Mean same-class pair distance and mean centroid pair distance.

    Features are first reduced to ``min(pca_dims, M-1, D)`` principal
    components; the metric is the inverse pooled covariance of the reduced
    features.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise AnalysisError("features must be [M, D] with one label per row")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise AnalysisError("need at least 2 classes with at least 2 samples each")
    dims = min(pca_dims, len(X) - 1, X.shape[1])
    Z = pca_project(X, dims)
    P = pooled_precision(Z)
    inner = np.concatenate([_pair_distances(Z[y == c], P) for c in classes])
    centroids = np.stack([Z[y == c].mean(axis=0) for c in classes])
    inter = _pair_distances(centroids, P)
    return ClusterStats(float(inner.mean()), float(inter.mean()), dims)


def task_features(model, dataset: Dataset, settings: EvalSettings = EvalSettings()) -> Tuple[np.ndarray, np.ndarray]:
    """Target embeddings of ``settings.n_tasks`` episodes, each adapted to its own support.

    Labels are the dataset's class ids, so the same class seen in different
    tasks (under different FiLM parameters) counts as one cluster.
    """
    feats, labels = [], []
    for i in range(settings.n_tasks):
        ep = sample_episode(dataset, settings.way, settings.shot, settings.query, seed=task_seed(settings.seed, dataset.id, i), split=settings.split)
        film = model.film_for(ep.support_images)
        feats.append(backbone_forward(ep.target_images, model.backbone, film))
        labels.append(np.asarray(ep.class_ids)[ep.target_labels])
    return np.concatenate(feats), np.concatenate(labels)


# prior stability -----------------------------------------------------------------


@dataclass(frozen=True)
class StabilityStats:
    priors: np.ndarray  # [draws, D]
    dispersion: float   # norm of the per-coordinate standard deviation
    pairwise_mean: float
    relative_dispersion: float  # dispersion / norm of the mean prior
    source: str


def stability_from_priors(priors: np.ndarray, source: str = "") -> StabilityStats:
    P = np.asarray(priors, dtype=np.float64)
    if P.ndim != 2 or len(P) < 2:
        raise AnalysisError("stability needs at least 2 prior draws")
    disp = float(np.linalg.norm(P.std(axis=0)))
    i, j = np.triu_indices(len(P), k=1)
    pair = float(np.linalg.norm(P[i] - P[j], axis=1).mean())
    centre = float(np.linalg.norm(P.mean(axis=0)))
    return StabilityStats(P, disp, pair, disp / centre if centre > 0 else float("inf"), source)


def prior_stability(model, source: Union[Dataset, str], draws: int = 100, seed: int = 0, size: int = 10, split: str = "train", image_shape=None) -> StabilityStats:
    """Mean priors of ``draws`` independently sampled fixed supports.

    ``source`` is a dataset or the string ``"noise"`` for uniform random images.
    """
    if draws < 2:
        raise AnalysisError("stability needs at least 2 prior draws")
    priors = []
    for i in range(draws):
        s = seed * 1_000_003 + i
        if isinstance(source, Dataset):
            fixed = make_fixed_support("azs2", source, size=size, seed=s, split=split)
        elif source == "noise":
            shape = image_shape or (model.config.backbone.in_channels, model.config.backbone.image_size, model.config.backbone.image_size)
            fixed = make_fixed_support("random-matrix", size=size, seed=s, image_shape=shape)
        else:
            raise AnalysisError(f"source must be a Dataset or 'noise', got {source!r}")
        priors.append(model.encode(fixed.images).values)
    return stability_from_priors(np.stack(priors), source.id if isinstance(source, Dataset) else "noise")


# fluctuation across alternative supports -----------------------------------------------


@dataclass(frozen=True)
class FluctuationTable:
    dataset: str
    accuracies: np.ndarray  # [tasks, supports_per_task]

    @property
    def spreads(self) -> np.ndarray:
        return self.accuracies.max(axis=1) - self.accuracies.min(axis=1)

    @property
    def median_spread(self) -> float:
        return float(np.median(self.spreads))

    def rows(self) -> List[Dict]:
        return [
            {"dataset": self.dataset, "task": t, **{f"support{s}": float(a) for s, a in enumerate(row)}, "spread": float(sp)}
            for t, (row, sp) in enumerate(zip(self.accuracies, self.spreads))
        ]


def _alternative_support(dataset: Dataset, class_ids, shot: int, exclude: np.ndarray, rng, split: str) -> np.ndarray:
    pool = np.setdiff1d(dataset.indices(split), exclude)
    picks = []
    for c in class_ids:
        idx = pool[dataset.labels[pool] == c]
        if len(idx) < shot:
            raise AnalysisError(f"{dataset.id}: class {c} has too few images for an alternative support")
        picks.append(rng.choice(idx, size=shot, replace=False))
    return dataset.images[np.concatenate(picks)]


def fluctuation_table(model, dataset: Dataset, tasks: int = 10, supports_per_task: int = 4, seed: int = 0, settings: EvalSettings = EvalSettings()) -> FluctuationTable:
    """Accuracy of each task when only the FiLM prior's support changes.

    Alternative supports hold the task's classes but different images
    (never its targets). The classifier head always uses the task's own
    support.
    """
    if supports_per_task < 2:
        raise AnalysisError("supports_per_task must be >= 2")
    if tasks < 1:
        raise AnalysisError("tasks must be >= 1")
    out = np.zeros((tasks, supports_per_task))
    for t in range(tasks):
        ep = sample_episode(dataset, settings.way, settings.shot, settings.query, seed=task_seed(seed, dataset.id, t), split=settings.split)
        rng = np.random.default_rng([seed, t, 31])
        for s in range(supports_per_task):
            prior = _alternative_support(dataset, ep.class_ids, settings.shot, ep.target_index, rng, settings.split)
            logits = model.episode_logits(ep, prior_images=prior)
            out[t, s] = episode_accuracy(logits, ep.target_labels)
    return FluctuationTable(dataset.id, out)


# parameter and timing reports ---------------------------------------------------------


def _count(tensors: Dict[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in tensors.values()))


def param_report(model) -> Dict[str, float]:
    """Exact parameter counts per subnetwork and the strippable fraction."""
    if isinstance(model, BackboneWeights):
        counts = {"encoder": 0, "adaptation": 0, "backbone": model.count(), "head": 0}
    else:
        counts = {
            "encoder": _count(model.part("encoder")),
            "adaptation": _count(model.part("adapt")),
            "backbone": _count(model.part("backbone")),
            "head": _count(model.part("head")),
        }
    total = sum(counts.values())
    strippable = counts["encoder"] + counts["adaptation"]
    return {**counts, "total": total, "strippable": strippable, "strippable_fraction": strippable / total if total else 0.0}


def timing_report(model, datasets: Sequence[Dataset], n_tasks: int = 10, settings: EvalSettings = EvalSettings()) -> Dict[str, float]:
    """Wall-clock seconds per stage summed over ``n_tasks`` episodes per dataset.

    A full model adapts to each task's own support. A stripped model reuses
    its stored FiLM parameters, so its encoder and adaptation stages are
    exactly zero.
    """
    if n_tasks < 1:
        raise AnalysisError("n_tasks must be >= 1")
    stripped = getattr(model, "stored", None) is not None
    t = {"encoder": 0.0, "adaptation": 0.0, "backbone": 0.0, "head": 0.0}
    head_params = model.part("head")
    for d in datasets:
        for i in range(n_tasks):
            ep = sample_episode(d, settings.way, settings.shot, settings.query, seed=task_seed(settings.seed, d.id, i), split=settings.split)
            if stripped:
                film = model.stored.film
            else:
                t0 = time.perf_counter()
                prior = model.encode(ep.support_images)
                t1 = time.perf_counter()
                film = compute_film(prior, model.part("adapt"), model.config.backbone)
                t2 = time.perf_counter()
                t["encoder"] += t1 - t0
                t["adaptation"] += t2 - t1
            t0 = time.perf_counter()
            emb = backbone_forward(ep.support_images, model.backbone, film)
            t1 = time.perf_counter()
            head = build_classifier(emb, ep.support_labels, head_params, way=ep.way)
            t2 = time.perf_counter()
            predict(ep.target_images, model.backbone, film, head)
            t3 = time.perf_counter()
            t["backbone"] += t1 - t0
            t["head"] += t2 - t1
            t["backbone"] += t3 - t2
    t["total"] = sum(t.values())
    return t


# export ------------------------------------------------------------------------


def export_plot(points: np.ndarray, labels: Sequence, path) -> List[Path]:
    """Write ``<path>.csv`` always and ``<path>.svg`` for 2-D points."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] not in (2, 3):
        raise AnalysisError(f"points must be [N, 2] or [N, 3], got {P.shape}")
    if len(labels) != len(P):
        raise AnalysisError("one label per point required")
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    axes = ["x", "y", "z"][: P.shape[1]]
    written = [base.with_suffix(".csv")]
    try:
        with open(written[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", *axes])
            for lab, row in zip(labels, P):
                w.writerow([lab, *(repr(float(v)) for v in row)])
    except OSError as exc:
        raise AnalysisError(f"cannot write {written[0]}: {exc}") from exc
    if P.shape[1] == 3:
        logger.info("3-D points: wrote %s only, no SVG", written[0])
        return written
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cmf"
    fig, ax = plt.subplots(figsize=(4, 4))
    for lab in sorted(set(labels), key=str):
        sel = np.array([l == lab for l in labels])
        ax.scatter(P[sel, 0], P[sel, 1], s=10, label=str(lab))
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    if len(set(labels)) <= 12:
        ax.legend(fontsize=6)
    svg = base.with_suffix(".svg")
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    written.append(svg)
    return written
