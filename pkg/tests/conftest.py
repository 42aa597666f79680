import numpy as np
import pytest

from causal_probe.types import ACT, NUIS, SUP, MultiViewObservation, SemanticPartition


def block_partition(h=64, w=64):
    """ACT in the top-left quarter, SUP in the top-right, NUIS everywhere else."""
    labels = np.full((h, w), NUIS, dtype=np.uint8)
    labels[: h // 2, : w // 2] = ACT
    labels[: h // 2, w // 2 :] = SUP
    return SemanticPartition(labels=labels)


def textured_image(h=64, w=64, seed=0):
    rng = np.random.Generator(np.random.Philox(key=seed))
    return rng.random((h, w, 3)).astype(np.float32)


def single_view_obs(img, t=1, view="front"):
    return MultiViewObservation(views={view: img}, timestep=t)


@pytest.fixture
def partition():
    return block_partition()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=12345))
