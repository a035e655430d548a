"""共享的测试数据与配置。"""

import numpy as np
import pytest

from scripts.env_helper import ExperimentConfig
from scripts.param_algebra import LowRankUpdate, ParamSet, TaskVector

LAYER_SHAPES = (("W", (6, 5)), ("b", (6, 1)), ("proj", (4, 4)))


def random_param_set(rng: np.random.Generator, shapes=LAYER_SHAPES) -> ParamSet:
    return ParamSet(tuple((name, rng.standard_normal(shape)) for name, shape in shapes))


def random_task_vector(rng: np.random.Generator, base: ParamSet, rank: int = 2, skip=()) -> TaskVector:
    updates = []
    for name, (m, n) in base.fingerprint:
        if name in skip:
            continue
        r = min(rank, m, n)
        updates.append(LowRankUpdate(name, rng.standard_normal((m, r)), rng.standard_normal((r, n))))
    return TaskVector(tuple(updates), base.fingerprint)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def base(rng):
    return random_param_set(rng)


@pytest.fixture
def make_task_vector(rng, base):
    def factory(rank: int = 2, skip=()):
        return random_task_vector(rng, base, rank, skip)

    return factory


@pytest.fixture
def tiny_config(tmp_path):
    """三个源域（最后一个对抗）的小规模配置，几秒内跑完整流程。"""
    return ExperimentConfig(
        n_sources=3,
        dim=6,
        n_samples=80,
        target_sources=[0, 1],
        max_steps=300,
        n_init=3,
        n_iter=2,
        n_candidates=64,
        n_restarts=1,
        eval_batch_size=32,
        methods=["pim", "random_search", "averaging", "task_arithmetic", "ties", "base", "joint_train"],
        seeds=[0, 1],
        out_dir=str(tmp_path / "run"),
    )
