from dataclasses import replace
import time

import numpy as np
import pytest

from zernet.errors import DomainError, PatchTooSparseError
from zernet.expmap import (
    INTERP_WIDTH,
    build_neighbor_graph,
    compute_patches,
    default_sample_count,
    densify_patch,
    geodesic_patch,
    patch_rows,
)
from zernet.mesh import TriMesh, icosphere, planar_disk, uniform_sample_surface

DISK_R0 = 0.2


@pytest.fixture(scope="module")
def disk_graph(disk):
    samples = uniform_sample_surface(disk, default_sample_count(disk, DISK_R0), 0)
    return build_neighbor_graph(disk, samples)


@pytest.fixture(scope="module")
def sphere_graph(sphere3):
    samples = uniform_sample_surface(sphere3, default_sample_count(sphere3, 0.3), 0)
    return build_neighbor_graph(sphere3, samples)


def planar_oracle(graph, patch):
    """Euclidean polar coordinates of the raw patch nodes in the patch frame."""
    raw = patch.node >= 0
    d = graph.positions[patch.node[raw]] - graph.positions[patch.center]
    r = np.linalg.norm(d, axis=1)
    theta = np.arctan2(d @ patch.frame.e2, d @ patch.frame.e1) % (2 * np.pi)
    return raw, r, theta


def sphere_oracle(graph, patch):
    """Analytic log map on the unit sphere."""
    raw = patch.node >= 0
    c = graph.positions[patch.center] / np.linalg.norm(graph.positions[patch.center])
    x = graph.positions[patch.node[raw]]
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    r = np.arccos(np.clip(x @ c, -1.0, 1.0))
    t = x - (x @ c)[:, None] * c
    theta = np.arctan2(t @ patch.frame.e2, t @ patch.frame.e1) % (2 * np.pi)
    return raw, r, theta


def angle_diff(a, b):
    return np.abs((a - b + np.pi) % (2 * np.pi) - np.pi)


def interior(mesh, r0):
    return np.nonzero(np.linalg.norm(mesh.vertices[:, :2], axis=1) <= 1.0 - r0)[0]


class TestNeighborGraph:
    def test_no_samples_is_edge_graph(self):
        m = icosphere(1)
        g = build_neighbor_graph(m)
        assert g.n_nodes == m.n_vertices
        assert g.matrix.nnz == 2 * len(m.edges)

    def test_dominates_euclidean(self, disk, disk_graph):
        src = np.arange(0, disk.n_vertices, 41)
        D = disk_graph.distances(src)
        eu = np.linalg.norm(disk_graph.positions[src][:, None] - disk_graph.positions[None], axis=2)
        assert (D >= eu - 1e-12).all()

    def test_dense_sampling_close_to_euclidean(self, disk):
        samples = uniform_sample_surface(disk, 20000, 0)
        g = build_neighbor_graph(disk, samples, reach="vertex")
        src = np.arange(0, disk.n_vertices, 37)
        D = g.distances(src, limit=2 * DISK_R0)
        eu = np.linalg.norm(g.positions[src][:, None] - g.positions[None], axis=2)
        near = (eu <= DISK_R0) & (eu > 0)
        assert (D[near] / eu[near]).max() < 1.05

    def test_symmetric_and_triangle_inequality(self, disk_graph):
        nodes = np.arange(0, disk_graph.n_nodes, 97)
        D = disk_graph.distances(nodes)[:, nodes]
        np.testing.assert_allclose(D, D.T, rtol=1e-12)
        assert (D[:, None, :] <= D[:, :, None] + D[None, :, :] + 1e-12).all()

    def test_connected_on_manifold(self, sphere_graph):
        assert np.isfinite(sphere_graph.distances([0])).all()

    def test_bad_reach(self, sphere3):
        with pytest.raises(DomainError):
            build_neighbor_graph(sphere3, reach="face")

    def test_interpolation_records(self, sphere3, sphere_graph):
        g = sphere_graph
        pos = np.einsum("nc,ncx->nx", g.interp_w, sphere3.vertices[g.interp_idx])
        np.testing.assert_allclose(pos, g.positions, atol=1e-14)


class TestPlanarDisk:
    def test_polar_coordinates(self, disk, disk_graph):
        worst_r, worst_t = 0.0, 0.0
        for v in interior(disk, DISK_R0)[::5]:
            p = geodesic_patch(disk, disk_graph, int(v), DISK_R0)
            raw, r, theta = planar_oracle(disk_graph, p)
            worst_r = max(worst_r, np.abs(p.r[raw] - r).max() / DISK_R0)
            ok = r > 1e-9
            worst_t = max(worst_t, np.degrees(angle_diff(p.theta[raw][ok], theta[ok])).max())
        assert worst_r < 0.05
        assert worst_t < 5.0

    def test_graph_method_is_rougher(self, disk, disk_graph):
        # literal method: graph distance for r, first-step direction for theta
        v = int(interior(disk, DISK_R0)[10])
        exact = geodesic_patch(disk, disk_graph, v, DISK_R0)
        rough = geodesic_patch(disk, disk_graph, v, DISK_R0, method="graph")
        raw, r, _ = planar_oracle(disk_graph, rough)
        assert (rough.r[raw] >= r - 1e-12).all()
        raw_e, r_e, _ = planar_oracle(disk_graph, exact)
        assert np.abs(exact.r[raw_e] - r_e).max() <= np.abs(rough.r[raw] - r).max()

    def test_center_present(self, disk, disk_graph):
        p = geodesic_patch(disk, disk_graph, 0, DISK_R0)
        at = np.nonzero(p.node == 0)[0]
        assert len(at) == 1 and p.r[at[0]] == 0.0 and p.theta[at[0]] == 0.0
        assert (p.r[p.node != 0] > 0).all()

    def test_radius_bound_and_range(self, disk, disk_graph):
        p = geodesic_patch(disk, disk_graph, 5, DISK_R0, min_samples=120)
        assert (p.r >= 0).all() and (p.r <= DISK_R0).all()
        assert (p.theta >= 0).all() and (p.theta < 2 * np.pi).all()

    def test_large_radius_takes_everything(self):
        m = planar_disk(1.0, 3)
        g = build_neighbor_graph(m, uniform_sample_surface(m, 200, 0))
        p = geodesic_patch(m, g, 0, 10.0)
        assert len(p) == g.n_nodes

    def test_all_quadrants(self, disk, disk_graph):
        p = geodesic_patch(disk, disk_graph, 0, DISK_R0)
        quadrant = (p.theta[p.r > 0] // (np.pi / 2)).astype(int)
        assert set(quadrant.tolist()) == {0, 1, 2, 3}

    def test_thousand_patches_runtime(self, disk, disk_graph):
        t0 = time.perf_counter()
        patches, failed = compute_patches(disk, disk_graph, DISK_R0, 0, vertices=range(1000))
        assert time.perf_counter() - t0 < 30.0
        assert not failed and len(patches) == 1000


class TestSphere:
    def test_log_map_accuracy(self, sphere3, sphere_graph):
        worst_r, worst_t = 0.0, 0.0
        for v in range(0, sphere3.n_vertices, 9):
            p = geodesic_patch(sphere3, sphere_graph, v, 0.3)
            raw, r, theta = sphere_oracle(sphere_graph, p)
            ok = r > 1e-3
            worst_r = max(worst_r, np.abs(p.r[raw] - r).max() / 0.3)
            worst_t = max(worst_t, np.degrees(angle_diff(p.theta[raw][ok], theta[ok])).max())
        # measured: 0.4% and 0.33 degrees
        assert worst_r < 0.02
        assert worst_t < 2.0

    def test_neighbor_counts_uniform(self, sphere3):
        # Poisson spread at 80 samples per patch is ~11%, so 642 patches reach
        # 3 sigma; at 200 per patch the 30% band is over 4 sigma
        samples = uniform_sample_surface(sphere3, default_sample_count(sphere3, 0.3, 200), 0)
        graph = build_neighbor_graph(sphere3, samples)
        patches, _ = compute_patches(sphere3, graph, 0.3, 0)
        counts = np.array([p.n_raw for p in patches])
        med = np.median(counts)
        assert (np.abs(counts - med) <= 0.3 * med).all()


class TestSparsePatches:
    def test_too_sparse_names_vertex(self):
        m = icosphere(0)
        g = build_neighbor_graph(m)
        with pytest.raises(PatchTooSparseError, match="vertex 3"):
            geodesic_patch(m, g, 3, 0.1)

    def test_compute_patches_collects_failures(self):
        m = icosphere(0)
        g = build_neighbor_graph(m)
        with pytest.warns(UserWarning, match="sparse"):
            patches, failed = compute_patches(m, g, 0.1, 0)
        assert all(p is None for p in patches)
        assert sorted(failed) == list(range(m.n_vertices))

    def test_bad_arguments(self, sphere3, sphere_graph):
        with pytest.raises(DomainError):
            geodesic_patch(sphere3, sphere_graph, -1, 0.3)
        with pytest.raises(DomainError):
            geodesic_patch(sphere3, sphere_graph, 0, 0.0)
        with pytest.raises(DomainError):
            geodesic_patch(sphere3, sphere_graph, 0, 0.3, method="heat")


class TestDensify:
    @pytest.fixture
    def small_patch(self, disk, disk_graph):
        p = geodesic_patch(disk, disk_graph, 0, 0.08)
        assert 3 <= len(p) < 50
        return p

    def test_count_contract(self, small_patch):
        n = len(small_patch)
        out = densify_patch(small_patch, 50, seed=1)
        assert len(out) == 50
        assert out.n_raw == n
        assert (out.node[n:] == -1).all()

    def test_already_large_unchanged(self, small_patch):
        assert densify_patch(small_patch, len(small_patch), seed=0) is small_patch

    def test_deterministic(self, small_patch):
        a, b = densify_patch(small_patch, 60, 4), densify_patch(small_patch, 60, 4)
        np.testing.assert_array_equal(a.r, b.r)
        np.testing.assert_array_equal(a.interp_w, b.interp_w)

    def test_equal_values_blend_to_same(self, small_patch):
        p = replace(small_patch, values=np.full((len(small_patch), 2), 3.25))
        out = densify_patch(p, 50, seed=2)
        np.testing.assert_allclose(out.values, 3.25, rtol=1e-15)

    def test_blend_is_convex_in_disk_and_field(self, disk, small_patch):
        out = densify_patch(small_patch, 50, seed=3)
        assert (out.r <= out.r0).all()
        np.testing.assert_allclose(out.interp_w.sum(1), 1.0, atol=1e-12)
        # on the flat disk the xy field is linear, so blended weights reproduce blended points
        xy = out.field_values(disk.fields["xy"]) - disk.vertices[out.center, :2]
        local = np.stack([xy @ out.frame.e1[:2], xy @ out.frame.e2[:2]], 1)
        np.testing.assert_allclose(local, out.cartesian(), atol=1e-12)

    def test_needs_two_samples(self, small_patch):
        one = replace(small_patch, node=small_patch.node[:1], r=small_patch.r[:1],
                      theta=small_patch.theta[:1], interp_idx=small_patch.interp_idx[:1],
                      interp_w=small_patch.interp_w[:1])
        with pytest.raises(DomainError):
            densify_patch(one, 10)

    def test_min_samples_in_builder(self, disk, disk_graph):
        p = geodesic_patch(disk, disk_graph, 0, 0.08, min_samples=50, seed=9)
        assert len(p) == 50


class TestPatchRecords:
    def test_interpolation_matrix_matches(self, sphere3, sphere_graph):
        p = geodesic_patch(sphere3, sphere_graph, 7, 0.3, min_samples=150)
        f = np.random.default_rng(0).normal(size=(sphere3.n_vertices, 2))
        np.testing.assert_allclose(p.interpolation_matrix(sphere3.n_vertices) @ f, p.field_values(f),
                                   atol=1e-14)
        assert p.interp_idx.shape == (len(p), INTERP_WIDTH)

    def test_rows(self, disk, disk_graph):
        p = geodesic_patch(disk, disk_graph, 3, DISK_R0)
        rows = patch_rows(p)
        assert len(rows) == len(p)
        assert rows[0][0] == 3

    def test_default_sample_count(self):
        m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert default_sample_count(m, 1.0, per_patch=80) == int(np.ceil(80 * 0.5 / np.pi))
