import numpy as np
import pytest

from fpdlab.masking import NoiseSchedule
from fpdlab.teacher import TeacherTrainConfig, train_teacher
from fpdlab.toyworld import World, WorldParams

ENUM_SEED = 7


@pytest.fixture(scope="session")
def enum_world() -> World:
    """The K=3, L=4 enumeration preset world used across the suite."""
    params = WorldParams(vocab=3, length=4, classes=4, rho=0.1)
    return World.build(params, seed=ENUM_SEED)


@pytest.fixture(scope="session")
def cosine_schedule() -> NoiseSchedule:
    return NoiseSchedule("cosine")


@pytest.fixture(scope="session")
def enum_teacher(enum_world, cosine_schedule):
    """A converged-enough teacher on the enumeration preset (shared; ~20 s)."""
    cfg = TeacherTrainConfig(steps=3000, batch=64, lr=3e-3, width=48, mlp_mult=3)
    net, history = train_teacher(enum_world, cosine_schedule, cfg, seed=ENUM_SEED)
    net._train_history = history
    return net


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
