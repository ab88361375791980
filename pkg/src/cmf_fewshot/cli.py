"""``cmf-fewshot`` command line: pretrain, train, eval, analyze, precompute, report.

All commands of one configuration share a run directory (``--out`` or
``<output.root>/<config hash>``) holding ``backbone.ckpt``,
``model-<variant>.ckpt`` and ``deploy-<variant>.ckpt``. Each command writes
its CSVs to a subdirectory along with ``config.resolved.json``; wall-clock
timestamps go to ``metadata.json`` so the CSVs stay byte-reproducible.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import config as config_mod
from .analysis import (
    export_plot,
    fluctuation_table,
    mahalanobis_stats,
    param_report,
    pca_project,
    prior_stability,
    task_features,
    timing_report,
)
from .backbone import BackboneConfig, BackboneWeights, pretrain_backbone
from .config import ConfigError
from .deploy import DeployModel, equivalence_check, precompute, strip
from .encoder import EncoderConfig
from .episodes import desk_benchmark, load_dataset, make_fixed_support, sample_episode
from .evaluation import PROTOCOLS, EvalSettings, run_protocol, sweep_matrix, task_seed
from .model import CNAPModel, ModelConfig
from .numerics import CheckpointError, load_checkpoint, save_checkpoint
from .numerics.checkpoint import namespace
from .training import TrainConfig, train

logger = logging.getLogger("cmf_fewshot")

EXIT_ERROR = 1
EXIT_MISSING = 2
EXIT_SCHEMA = 3


class MissingArtifact(FileNotFoundError):
    pass


# plumbing -------------------------------------------------------------------


def _threads():
    n = os.environ.get("CMF_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _write_csv(path: Path, header: Sequence[str], rows: List[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return path


def _datasets(cfg):
    d = cfg["data"]
    if d["paths"]:
        return [load_dataset(p, format=d["format"], size=d["image_size"], seed=d["seed"]) for p in d["paths"]]
    return desk_benchmark(classes=d["classes"], per_class=d["per_class"], size=d["image_size"], seed=d["seed"], families=d["families"])


def _model_config(cfg) -> ModelConfig:
    e = cfg["encoder"]
    return ModelConfig(
        backbone=BackboneConfig(channels=tuple(cfg["backbone"]["channels"]), image_size=cfg["data"]["image_size"]),
        encoder=EncoderConfig(channels=tuple(e["channels"]), reduction=e["reduction"], variant=e["variant"], attention_gate=e["attention_gate"]),
        head_hidden=cfg["adaptation"]["head_hidden"],
        seed=cfg["seed"],
    )


def _eval_settings(cfg) -> EvalSettings:
    p = cfg["protocol"]
    return EvalSettings(n_tasks=p["n_tasks"], way=p["way"], shot=p["shot"], query=p["query"], seed=cfg["seed"], fixed_size=p["fixed_size"], split=p["split"])


def _load_backbone(run: Path) -> BackboneWeights:
    path = run / "backbone.ckpt"
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `pretrain` first")
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path}: not a backbone checkpoint")
    bb = meta["config"]
    return BackboneWeights(BackboneConfig(**{**bb, "channels": tuple(bb["channels"])}), namespace(tensors, "backbone"), frozen=True, train_accuracy=meta.get("train_accuracy", float("nan")))


def _load_model(run: Path, variant: str) -> CNAPModel:
    path = run / f"model-{variant}.ckpt"
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `train --variant {variant}` first")
    return CNAPModel.load(path)


class Run:
    def __init__(self, args, cfg):
        self.cfg = cfg
        self.dir = Path(args.out) if args.out else Path(cfg["output"]["root"]) / config_mod.run_hash(cfg)
        self.variant = cfg["encoder"]["variant"]
        self.started = time.time()

    def stage(self, name: str) -> Path:
        d = self.dir / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.resolved.json").write_text(config_mod.dumps(self.cfg))
        return d

    def finish(self, d: Path, command: str, **extra) -> None:
        meta = {"command": command, "started": self.started, "finished": time.time(), "run_hash": config_mod.run_hash(self.cfg), **extra}
        (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# commands --------------------------------------------------------------------


def cmd_pretrain(run: Run, args) -> None:
    cfg = run.cfg
    b = cfg["backbone"]
    datasets = _datasets(cfg)
    t0 = time.perf_counter()
    bb = pretrain_backbone(
        datasets,
        BackboneConfig(channels=tuple(b["channels"]), image_size=cfg["data"]["image_size"]),
        epochs=b["pretrain_epochs"],
        seed=cfg["seed"],
        lr=b["pretrain_lr"],
        batch_size=b["pretrain_batch_size"],
    )
    elapsed = time.perf_counter() - t0
    run.dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.dir / "backbone.ckpt", {f"backbone/{k}": v for k, v in bb.params.items()}, {"kind": "backbone", "config": asdict(bb.config), "train_accuracy": bb.train_accuracy})
    d = run.stage("pretrain")
    _write_csv(d / "metrics.csv", ["stage", "train_accuracy"], [["pretrain", float(bb.train_accuracy)]])
    _write_csv(d / "timing.csv", ["stage", "seconds"], [["pretrain_s", elapsed]])
    run.finish(d, "pretrain", seconds=elapsed)
    print(f"backbone: train accuracy {bb.train_accuracy:.3f} -> {run.dir / 'backbone.ckpt'}")


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    bb = _load_backbone(run.dir)
    t = cfg["training"]
    tc = TrainConfig(variant=run.variant, seed=cfg["seed"], **t)
    d = run.stage(f"train-{run.variant}")
    model, log = train(tc, _datasets(cfg), bb, _model_config(cfg), out_dir=d, progress=True)
    model.save(run.dir / f"model-{run.variant}.ckpt", {"best_episode": log.best_episode, "train_seconds": log.timings.get("train_s", 0.0)})
    log.write_csv(d / "metrics.csv")
    _write_csv(d / "timing.csv", ["stage", "seconds"], sorted(log.timings.items()))
    run.finish(d, "train", best_episode=log.best_episode)
    print(f"{run.variant}: best validation at episode {log.best_episode} -> {run.dir / f'model-{run.variant}.ckpt'}")


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    p = cfg["protocol"]
    model = _load_model(run.dir, run.variant)
    datasets = _datasets(cfg)
    ids = [x.id for x in datasets]
    if p["name"] == "azs2" and p["source"] is None:
        raise ConfigError("protocol.source", "azs2 needs a source dataset")
    if p["source"] is not None and p["source"] not in ids:
        raise ConfigError("protocol.source", f"unknown dataset {p['source']!r}; known: {ids}")
    rows = run_protocol(model, datasets, p["name"], _eval_settings(cfg), p["source"])
    tag = p["name"] + (f"-{p['source']}" if p["name"] == "azs2" else "")
    d = run.stage(f"eval-{run.variant}-{tag}")
    _write_csv(
        d / "metrics.csv",
        ["variant", "protocol", "source", "dataset", "accuracy", "ci95", "tasks"],
        [[run.variant, r["protocol"], r["source"], r["dataset"], r["accuracy"], r["ci95"], r["tasks"]] for r in rows],
    )
    if p["name"] == "azs2-sweep":
        m = sweep_matrix(rows, ids)
        _write_csv(d / "matrix.csv", ["source", *ids], [[s, *map(float, m[i])] for i, s in enumerate(ids)])
    run.finish(d, "eval")
    for r in rows:
        print(f"{r['protocol']:>12} {r['source']:>10} -> {r['dataset']:<10} {r['accuracy']:.3f} ± {r['ci95']:.3f}")


def cmd_analyze(run: Run, args) -> None:
    cfg = run.cfg
    p = cfg["protocol"]
    model = _load_model(run.dir, run.variant)
    datasets = _datasets(cfg)
    settings = _eval_settings(cfg)
    d = run.stage(f"analyze-{run.variant}")
    prior_rows, cluster_rows, fluct_rows = [], [], []
    for ds in datasets:
        st = prior_stability(model, ds, draws=p["draws"], seed=cfg["seed"], size=p["fixed_size"])
        prior_rows.append([ds.id, st.dispersion, st.pairwise_mean, st.relative_dispersion])
        feats, labels = task_features(model, ds, settings)
        cs = mahalanobis_stats(feats, labels)
        cluster_rows.append([ds.id, cs.inner_class, cs.inter_class, cs.dims])
        export_plot(pca_project(feats, 2), labels.tolist(), d / f"plot_{ds.id}")
        ft = fluctuation_table(model, ds, p["fluctuation_tasks"], p["supports_per_task"], seed=cfg["seed"], settings=settings)
        fluct_rows += [[ds.id, t, *map(float, row), float(sp)] for t, (row, sp) in enumerate(zip(ft.accuracies, ft.spreads))]
    noise = prior_stability(model, "noise", draws=p["draws"], seed=cfg["seed"], size=p["fixed_size"])
    prior_rows.append(["noise", noise.dispersion, noise.pairwise_mean, noise.relative_dispersion])
    _write_csv(d / "priors.csv", ["source", "dispersion", "pairwise_mean", "relative_dispersion"], prior_rows)
    _write_csv(d / "clusters.csv", ["dataset", "inner_class", "inter_class", "pca_dims"], cluster_rows)
    _write_csv(d / "fluctuation.csv", ["dataset", "task", *[f"support{i}" for i in range(p["supports_per_task"])], "spread"], fluct_rows)
    run.finish(d, "analyze")
    print(f"analysis written to {d}")


def _fixed_for(cfg, datasets):
    p = cfg["protocol"]
    if p["name"] == "random-matrix":
        return make_fixed_support("random-matrix", datasets=datasets, size=p["fixed_size"], seed=cfg["seed"])
    source = p["source"] or datasets[0].id
    return make_fixed_support("azs2", source, datasets=datasets, size=p["fixed_size"], seed=cfg["seed"])


def cmd_precompute(run: Run, args) -> None:
    cfg = run.cfg
    model = _load_model(run.dir, run.variant)
    datasets = _datasets(cfg)
    fixed = _fixed_for(cfg, datasets)
    stored = precompute(model, fixed)
    deployed = strip(model, stored)
    path = run.dir / f"deploy-{run.variant}.ckpt"
    deployed.save(path)
    settings = _eval_settings(cfg)
    eps = [
        sample_episode(ds, settings.way, settings.shot, settings.query, seed=task_seed(settings.seed, ds.id, i), split=settings.split)
        for ds in datasets
        for i in range(max(1, settings.n_tasks // len(datasets)))
    ]
    eq = equivalence_check(model, deployed, eps, fixed)
    d = run.stage(f"precompute-{run.variant}")
    _write_csv(d / "metrics.csv", ["source", "episodes", "max_logit_diff", "argmax_agree", "passed"], [[stored.source, eq.episodes, eq.max_diff, eq.argmax_agree, eq.passed]])
    run.finish(d, "precompute")
    print(f"deploy model -> {path}; max logit diff {eq.max_diff:.2e} over {eq.episodes} episodes")


def cmd_report(run: Run, args) -> None:
    cfg = run.cfg
    p = cfg["protocol"]
    model = _load_model(run.dir, run.variant)
    models = {"full": model}
    dpath = run.dir / f"deploy-{run.variant}.ckpt"
    if dpath.exists():
        models["stripped"] = DeployModel.load(dpath)
    datasets = _datasets(cfg)
    keys = ["encoder", "adaptation", "backbone", "head", "total", "strippable", "strippable_fraction"]
    prow, trow = [], []
    for name, m in models.items():
        r = param_report(m)
        prow.append([name, *[r[k] for k in keys]])
        t = timing_report(m, datasets, p["timing_tasks"], _eval_settings(cfg))
        trow.append([name, *[t[k] for k in ("encoder", "adaptation", "backbone", "head", "total")]])
    d = run.stage(f"report-{run.variant}")
    _write_csv(d / "params.csv", ["model", *keys], prow)
    _write_csv(d / "timing.csv", ["model", "encoder", "adaptation", "backbone", "head", "total"], trow)
    run.finish(d, "report")
    for row in prow:
        print(f"{row[0]:>8}: {row[5]} parameters, strippable fraction {row[7]:.3f}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "precompute": cmd_precompute,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmf-fewshot", description="Few-shot adaptation with canonical mean filtering.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. training.episodes_total=200")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="run directory (default: <output.root>/<config hash>)")
    ap.add_argument("--protocol", choices=PROTOCOLS)
    ap.add_argument("--source", help="fixed-support source dataset for azs2")
    ap.add_argument("--variant", choices=("plain", "cmf"))
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _error(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.protocol:
        overrides.append(f"protocol.name={json.dumps(args.protocol)}")
    if args.source:
        overrides.append(f"protocol.source={json.dumps(args.source)}")
    if args.variant:
        overrides.append(f"encoder.variant={json.dumps(args.variant)}")
    try:
        cfg = config_mod.resolve(config_mod.load(args.config) if args.config else None, overrides)
        run = Run(args, cfg)
        with _threads():
            COMMANDS[args.command](run, args)
    except ConfigError as exc:
        return _error("schema", str(exc), EXIT_SCHEMA, field=exc.field)
    except (MissingArtifact, FileNotFoundError) as exc:
        return _error("missing", str(exc), EXIT_MISSING)
    except (CheckpointError, ValueError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_ERROR)
    return 0


if __name__ == "__main__":
    sys.exit(main())
