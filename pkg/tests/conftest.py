"""Shared fixtures: the full desk zoo and the 200-image report pool.

Training the 13-member zoo takes roughly 25 minutes on one core, so the
fitted models are cached under .cache/desk-zoo-seed0 at the repo root
and reloaded on later runs.  Delete that directory to force a rebuild.

The report pool is the evaluation split filtered down to images that
every zoo member classifies correctly, so success rates measure induced
misclassification rather than pre-existing model error.  The train
split is drawn before the evaluation split from one seeded stream, so
enlarging the evaluation draw never perturbs the zoo's training data.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pytest

from metagrad.data import filter_correct, make_synthetic
from metagrad.zoo import ModelZoo, build_zoo

REPO_ROOT = Path(__file__).resolve().parent.parent
ZOO_CACHE = REPO_ROOT / ".cache" / "desk-zoo-seed0"

TRAIN_COUNT = 6000
FLOOR_EVAL_COUNT = 300  # evaluation draw used for the accuracy floor
POOL_DRAW = 450         # evaluation draw filtered into the report pool
POOL_SIZE = 200         # images every report-style test consumes


@pytest.fixture(scope="session")
def desk_zoo() -> ModelZoo:
    if (ZOO_CACHE / "manifest.json").exists():
        return ModelZoo.load(ZOO_CACHE)
    logging.getLogger(__name__).warning(
        "no cached zoo at %s; training 13 models takes roughly 25 minutes",
        ZOO_CACHE,
    )
    train, evaluation = make_synthetic(
        seed=0, count=FLOOR_EVAL_COUNT, train_count=TRAIN_COUNT
    )
    zoo = build_zoo(
        train.images, train.labels, evaluation.images, evaluation.labels,
        seed=0,
    )
    ZOO_CACHE.mkdir(parents=True, exist_ok=True)
    zoo.save(ZOO_CACHE)
    return zoo


@pytest.fixture(scope="session")
def report_pool(desk_zoo):
    _, evaluation = make_synthetic(
        seed=0, count=POOL_DRAW, train_count=TRAIN_COUNT
    )
    pool = filter_correct(evaluation, desk_zoo, roles="all")
    assert pool.images.shape[0] >= POOL_SIZE, (
        f"consensus pool holds {pool.images.shape[0]} images, "
        f"need {POOL_SIZE}"
    )
    return pool.subset(np.arange(POOL_SIZE))
