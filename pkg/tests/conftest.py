import numpy as np
import pytest
import torch

import partocc as po
from partocc.field import FieldConfig
from partocc.training import TrainConfig, random_poses, train

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def cap2():
    return po.make_capsule_body(2, seed=7)


@pytest.fixture(scope="session")
def cap3():
    return po.make_capsule_body(3, seed=5)


@pytest.fixture(scope="session")
def cap8():
    return po.make_capsule_body(8, seed=11)


def tiny_body(weights, vertices=None, faces=None, parents=(-1, 0), regressor=None,
              shape_basis=None):
    """Hand-built minimal body for targeted unit tests."""
    weights = np.asarray(weights, dtype=np.float64)
    k, n = weights.shape
    if vertices is None:
        rng = np.random.default_rng(0)
        vertices = rng.normal(size=(n, 3))
    if faces is None:
        faces = np.asarray([[i, (i + 1) % n, (i + 2) % n] for i in range(n - 2)])
    if regressor is None:
        regressor = np.full((k, n), 1.0 / n)
    return po.ParametricBody(
        vertices=np.asarray(vertices, dtype=np.float64),
        faces=np.asarray(faces, dtype=np.int64),
        weights=weights,
        joint_regressor=np.asarray(regressor, dtype=np.float64),
        tree=po.KinematicTree(np.asarray(parents)),
        shape_basis=shape_basis,
    )


@pytest.fixture(scope="session")
def chain4():
    """Four-bone chain: the (0,3) pair is kinematically separate."""
    return po.make_capsule_body(4, seed=21, branching=False)


@pytest.fixture(scope="session")
def small_trained(chain4):
    """A modestly trained K=4 desk field, shared by resolve/metric tests."""
    poses = random_poses(4, 200, sigma=0.4, seed=400)
    cfg = TrainConfig(learning_rate=1e-3, batch_size_bodies=8, queries_per_body=768,
                      iterations=1800, cloud_points=256, checkpoint_every=10**6, seed=4)
    return train(chain4, poses, cfg, field_config=FieldConfig.desk(4))
