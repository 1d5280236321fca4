"""Shared fixtures. The expensive session fixtures (five seeded stage-1
training runs on the default world) are built once and shared by the
acceptance criteria that need trained routers."""

import dataclasses

import pytest

from mixroute.env import EnvConfig, make_policy_pair
from mixroute.klst import (
    KlstTrainConfig,
    LabelingConfig,
    build_supervision_dataset,
    collect,
)
from mixroute.router import RouterConfig, RouterParams
from mixroute.klst import train_klst

N_SEEDS = 5


@pytest.fixture(scope="session")
def default_world():
    return EnvConfig()


@pytest.fixture(scope="session")
def default_pair(default_world):
    return make_policy_pair(default_world)


@dataclasses.dataclass
class TrainedSeed:
    seed: int
    params: object          # post-stage-1 RouterParams
    trajectories: list      # the 200-episode collection behind the dataset
    dataset: object
    best_balanced_accuracy: float


@pytest.fixture(scope="session")
def klst_models(default_world, default_pair):
    """Stage-1 routers trained at the published hyperparameters, 5 seeds."""
    router_config = RouterConfig()
    out = []
    for seed in range(N_SEEDS):
        trajectories, _ = collect(
            default_world, default_pair, 200,
            master_seed=seed, embed_dim=router_config.embed_dim,
        )
        dataset = build_supervision_dataset(trajectories, LabelingConfig(0.85))
        result = train_klst(
            dataset,
            RouterParams.initialize(router_config, seed=seed),
            KlstTrainConfig(epochs=5, batch_size=64, learning_rate=1e-4, seed=seed),
        )
        best = result.metrics[result.best_epoch - 1]
        out.append(TrainedSeed(
            seed=seed,
            params=result.params,
            trajectories=trajectories,
            dataset=dataset,
            best_balanced_accuracy=best.val_balanced_accuracy,
        ))
    return out
