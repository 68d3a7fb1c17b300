import numpy as np
import pytest

from zernet import decomposition as D
from zernet import expmap as E
from zernet import mesh as M
from zernet import network as N

TOY_R0 = 0.3
TOY_K = 21


def octant_labels(v):
    v = np.asarray(v)
    return (v[:, 0] > 0).astype(np.int64) + 2 * (v[:, 1] > 0) + 4 * (v[:, 2] > 0)


def prepare_toy(mesh, r0=TOY_R0, k=TOY_K, seed=0, labels=True):
    samples = M.uniform_sample_surface(mesh, E.default_sample_count(mesh, r0), seed)
    graph = E.build_neighbor_graph(mesh, samples)
    patches, _ = E.compute_patches(mesh, graph, r0, 50, seed)
    op = D.decomposition_operator(patches, mesh.n_vertices, k)
    target = octant_labels(mesh.vertices) if labels else None
    return N.PreparedMesh(mesh.vertices.copy(), {(r0, k): op}, target)


@pytest.fixture(scope="session")
def sphere3():
    return M.icosphere(3)


@pytest.fixture(scope="session")
def toy_train(sphere3):
    return prepare_toy(sphere3, seed=0)


@pytest.fixture(scope="session")
def toy_test():
    R = M.rotation_from_axis_angle([1.0, 2.0, 3.0], 0.7)
    return prepare_toy(M.transform(M.icosphere(3), R), seed=1)


@pytest.fixture(scope="session")
def disk():
    return M.planar_disk(1.0, 18)
