"""Desk-scale trend experiment.

Pretrain the toy CNN on synthetic task 0, then learn each further task under
five regimes: classifier only, piggyback (with task BN), simple, full, and an
individually fine-tuned network.  Fine-tuned errors, doubled, serve as the
decathlon baseline errors.
"""
from __future__ import annotations

import logging
import time
from dataclasses import replace
from typing import Optional

import numpy as np

from .config import RunConfig
from .data import load_dataset, make_synthetic_suite
from .evaluate import DecathlonConfig, decathlon_score, error_rate, mask_density
from .plain import PlainNetwork
from .registry import BaselineParams, TaskNetwork, add_task, task_rng
from .train import train_task

log = logging.getLogger(__name__)

REGIMES = ("classifier", "piggyback", "simple", "full", "finetune")


def pretrain(cfg: RunConfig, train, test=None) -> BaselineParams:
    rng = np.random.default_rng([cfg.seed, 0])
    net = PlainNetwork.random(cfg.arch, train.classes, rng)
    train_task(net, train, cfg.pretrain_schedule, rng, eval_data=test)
    return net.to_baseline()


def train_regime(regime: str, theta: BaselineParams, name: str, train, test, cfg: RunConfig):
    """Train one task under one regime; return (network, task params or None)."""
    if regime in ("classifier", "finetune"):
        rng = task_rng(cfg.seed, name)
        net = PlainNetwork.from_baseline(theta, train.classes, rng, train_backbone=regime == "finetune")
        train_task(net, train, cfg.schedule, rng)
        return net, None
    omega = add_task(theta, name, train, replace(cfg, variant=regime))
    return TaskNetwork(theta, omega), omega


# desk-scale data: 4-class pretraining so the baseline features are narrow,
# 10-class new tasks with enough samples that the masked models do not overfit
DESK_SUITE = {"noise": 0.5, "train": 2000, "test": 1000, "pretrain": {"classes": 4}}


def default_config(seed: int = 0) -> RunConfig:
    """Desk schedule: the decay structure of the full-scale protocol with
    learning rates scaled up 10x for the much smaller number of steps."""
    from .train import Schedule

    return RunConfig(
        seed=seed,
        schedule=Schedule(epochs=20, decay_epoch=15, batch_size=32, adam_lr=1e-3, sgd_lr=1e-2),
        pretrain_schedule=Schedule(epochs=10, decay_epoch=8, batch_size=32, adam_lr=1e-3, sgd_lr=1e-2),
    )


def desk_config(seed: int = 0, n_tasks: int = 3) -> RunConfig:
    """The default config with the synthetic suite filled in as named tasks."""
    cfg = default_config(seed)
    suite = make_synthetic_suite(seed, n_tasks + 1, **DESK_SUITE)
    cfg.pretrain = suite[0]
    cfg.tasks = {spec.name: spec for spec in suite[1:]}
    return cfg


def run_trend_experiment(
    cfg: Optional[RunConfig] = None,
    n_tasks: int = 3,
    suite_overrides: Optional[dict] = None,
    regimes=REGIMES,
) -> dict:
    cfg = cfg or default_config()
    start = time.perf_counter()
    overrides = DESK_SUITE if suite_overrides is None else suite_overrides
    suite = make_synthetic_suite(cfg.seed, n_tasks + 1, **overrides)
    pre_train, pre_test = load_dataset(suite[0])
    theta = pretrain(cfg, pre_train, pre_test)
    digest = theta.digest()
    results = {
        "baseline": {"accuracy": 1.0 - error_rate(theta, pre_test), "digest": digest},
        "tasks": {},
        "regimes": list(regimes),
    }
    densities = {}
    for spec in suite[1:]:
        train, test = load_dataset(spec)
        row = {"transform": spec.transform}
        for regime in regimes:
            t0 = time.perf_counter()
            net, omega = train_regime(regime, theta, spec.name, train, test, cfg)
            row[regime] = 1.0 - error_rate(net, test)
            log.info("%s %-10s acc=%.4f (%.1fs)", spec.name, regime, row[regime], time.perf_counter() - t0)
            if regime == "full" and omega is not None:
                densities[spec.name] = mask_density(omega).to_dict()
        results["tasks"][spec.name] = row
    if theta.digest() != digest:
        raise RuntimeError("baseline changed during the experiment")

    results["mean_accuracy"] = {r: float(np.mean([row[r] for row in results["tasks"].values()])) for r in regimes}
    if "finetune" in regimes:
        n_test = suite[1].test
        emax = {name: max(2 * (1 - row["finetune"]), 1.0 / n_test) for name, row in results["tasks"].items()}
        dcfg = DecathlonConfig(emax)
        results["decathlon_emax"] = emax
        results["decathlon"] = {
            r: decathlon_score({name: 1 - row[r] for name, row in results["tasks"].items()}, dcfg)["total"]
            for r in regimes
        }
    results["densities"] = densities
    results["seconds"] = time.perf_counter() - start
    return results
