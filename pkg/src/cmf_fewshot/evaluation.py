"""Evaluation protocols: one-shot, AZS-I, AZS-II, random-matrix and the source sweep.

All protocols score the same tasks for a given ``(seed, dataset)`` so their
accuracies are directly comparable. Under the AZS protocols only the FiLM
prior comes from the fixed support; the classifier head is always built from
the task's own support.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import FiLMParams
from .episodes import Dataset, FixedSupport, make_fixed_support, sample_episode
from .model import episode_accuracy

PROTOCOLS = ("oneshot", "azs1", "azs2", "azs2-sweep", "random-matrix")


@dataclass(frozen=True)
class EvalSettings:
    n_tasks: int = 100
    way: int = 5
    shot: int = 1
    query: int = 10
    seed: int = 0
    fixed_size: int = 10
    split: str = "test"


def task_seed(seed: int, dataset_id: str, index: int):
    return (seed, zlib.crc32(dataset_id.encode()), index)


def task_accuracies(model, dataset: Dataset, settings: EvalSettings, film: Optional[FiLMParams] = None) -> np.ndarray:
    """Per-task accuracy; ``film=None`` adapts each task to its own support."""
    accs = []
    for i in range(settings.n_tasks):
        ep = sample_episode(dataset, settings.way, settings.shot, settings.query, seed=task_seed(settings.seed, dataset.id, i), split=settings.split)
        accs.append(episode_accuracy(model.episode_logits(ep, film=film), ep.target_labels))
    return np.asarray(accs)


def summarize(accs: Sequence[float]) -> Dict[str, float]:
    """Mean and normal-approximation 95% half-width."""
    a = np.asarray(accs, dtype=np.float64)
    half = 1.96 * a.std(ddof=1) / np.sqrt(len(a)) if len(a) > 1 else 0.0
    return {"accuracy": float(a.mean()), "ci95": float(half), "tasks": int(len(a))}


def fixed_film(model, fixed: FixedSupport) -> FiLMParams:
    return model.film_for(fixed.images)


def run_protocol(model, datasets: Sequence[Dataset], protocol: str, settings: EvalSettings = EvalSettings(), source: Optional[str] = None) -> List[Dict]:
    """Rows ``{dataset, protocol, source, accuracy, ci95, tasks}``."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "azs2-sweep":
        return [
            dict(row, protocol="azs2-sweep")
            for src in datasets
            for row in run_protocol(model, datasets, "azs2", settings, src.id)
        ]
    rows = []
    if protocol == "oneshot":
        films = {d.id: (None, "own") for d in datasets}
    elif protocol == "azs1":
        fixed = make_fixed_support("azs1", datasets=datasets, size=settings.fixed_size, seed=settings.seed)
        films = {d.id: (fixed_film(model, fixed[d.id]), d.id) for d in datasets}
    elif protocol == "azs2":
        if source is None:
            raise ValueError("azs2 needs a source dataset")
        fixed = make_fixed_support("azs2", source, datasets=datasets, size=settings.fixed_size, seed=settings.seed)
        film = fixed_film(model, fixed)
        films = {d.id: (film, source) for d in datasets}
    else:
        fixed = make_fixed_support("random-matrix", datasets=datasets, size=settings.fixed_size, seed=settings.seed)
        film = fixed_film(model, fixed)
        films = {d.id: (film, "noise") for d in datasets}
    for d in datasets:
        film, src = films[d.id]
        accs = task_accuracies(model, d, settings, film)
        rows.append({"dataset": d.id, "protocol": protocol, "source": src, **summarize(accs)})
    return rows


def sweep_matrix(rows: List[Dict], datasets: Sequence[str]):
    """[source, test] accuracy matrix from ``azs2-sweep`` rows."""
    idx = {d: i for i, d in enumerate(datasets)}
    m = np.full((len(datasets), len(datasets)), np.nan)
    for r in rows:
        m[idx[r["source"]], idx[r["dataset"]]] = r["accuracy"]
    return m
