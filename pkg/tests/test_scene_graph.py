"""Superpixel bookkeeping, K-NN graph, and boundary adjacency."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrecon.errors import GraphDisconnectedError, InputError
from dynrecon.scene_graph import (
    SceneGraph,
    assert_connected,
    boundary_adjacency,
    build_knn_graph,
    build_superpixels,
)


def _random_image(rng, h, w):
    return rng.uniform(0.0, 1.0, size=(h, w, 3))


def _contiguous_random_labels(rng, h, w, n):
    """Random label map with ids relabeled contiguous from 0."""
    labels = rng.integers(0, n, size=(h, w))
    _, labels = np.unique(labels, return_inverse=True)
    return labels.reshape(h, w)


class TestBuildSuperpixels:
    def test_single_superpixel_2x2(self):
        labels = np.zeros((2, 2), dtype=int)
        image = np.full((2, 2, 3), 0.5)
        sps = build_superpixels(labels, image)
        assert len(sps) == 1
        sp = sps[0]
        assert sp.size == 4
        assert sp.boundary_pixels.shape[0] == 4
        # Anchor must be a member pixel.
        assert any(np.array_equal(sp.anchor_pixel, p) for p in sp.pixels)
        np.testing.assert_allclose(sp.mean_color, [0.5, 0.5, 0.5])

    def test_vertical_split_boundaries(self):
        labels = np.zeros((4, 6), dtype=int)
        labels[:, 3:] = 1
        image = np.zeros((4, 6, 3))
        sps = build_superpixels(labels, image)
        assert len(sps) == 2
        # Column 2 pixels border superpixel 1, so they are frontier
        # pixels; columns 0 is frontier too (image border).
        b0 = set(map(tuple, sps[0].boundary_pixels))
        assert {(2, v) for v in range(4)} <= b0
        assert {(0, v) for v in range(4)} <= b0

    def test_interior_pixels_not_boundary(self):
        labels = np.zeros((5, 5), dtype=int)
        image = np.zeros((5, 5, 3))
        sp = build_superpixels(labels, image)[0]
        b = set(map(tuple, sp.boundary_pixels))
        assert (2, 2) not in b
        assert len(b) == 16  # perimeter of a 5x5 block

    def test_non_contiguous_ids_rejected(self):
        labels = np.zeros((3, 3), dtype=int)
        labels[0, 0] = 2  # id 1 missing
        with pytest.raises(InputError):
            build_superpixels(labels, np.zeros((3, 3, 3)))

    def test_anchor_snaps_to_member_pixel(self):
        # L-shaped region whose centroid falls outside the region.
        labels = np.ones((4, 4), dtype=int)
        labels[0, :] = 0
        labels[:, 0] = 0
        sps = build_superpixels(labels, np.zeros((4, 4, 3)))
        for sp in sps:
            assert any(np.array_equal(sp.anchor_pixel, p) for p in sp.pixels)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_partition_and_frontier_invariants(self, seed):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(2, 12)), int(rng.integers(2, 12))
        labels = _contiguous_random_labels(rng, h, w, int(rng.integers(1, 6)))
        sps = build_superpixels(labels, _random_image(rng, h, w))
        seen = np.zeros((h, w), dtype=int)
        for sp in sps:
            for u, v in sp.pixels:
                seen[v, u] += 1
                assert labels[v, u] == sp.id
            member = set(map(tuple, sp.pixels))
            assert set(map(tuple, sp.boundary_pixels)) <= member
        assert np.all(seen == 1)


class TestKnnGraph:
    def test_collinear_chain_with_ties_to_lower_id(self):
        anchors = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        edges = build_knn_graph(anchors, 1)
        got = {tuple(e) for e in edges}
        # Midpoints tie between both sides and must pick the lower id.
        assert got == {(0, 1), (1, 0), (2, 1), (3, 2)}

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            n = int(rng.integers(3, 30))
            k = int(rng.integers(1, n - 1)) if n > 2 else 1
            anchors = rng.normal(size=(n, 3))
            edges = build_knn_graph(anchors, k)
            got = {tuple(e) for e in edges}
            # Independent O(n^2) oracle with explicit tie-breaking.
            expect = set()
            for i in range(n):
                cand = sorted(
                    ((np.sum((anchors[i] - anchors[j]) ** 2), j)
                     for j in range(n) if j != i))
                for _, j in cand[:k]:
                    expect.add((i, j))
            assert got == expect

    def test_edge_count_and_direction(self):
        rng = np.random.default_rng(43)
        anchors = rng.normal(size=(10, 3))
        edges = build_knn_graph(anchors, 3)
        assert edges.shape == (30, 2)
        counts = np.bincount(edges[:, 0], minlength=10)
        assert np.all(counts == 3)

    def test_invalid_k_rejected(self):
        anchors = np.zeros((5, 3))
        with pytest.raises(InputError):
            build_knn_graph(anchors, 0)
        with pytest.raises(InputError):
            build_knn_graph(anchors, 5)

    def test_single_node_graph(self):
        edges = build_knn_graph(np.zeros((1, 3)), 1)
        assert edges.shape == (0, 2)
        assert_connected(1, edges)

    def test_disconnected_components_detected(self):
        # Two tight clusters far apart, K=1 keeps them separate.
        anchors = np.array([[0.0, 0, 0], [0.1, 0, 0],
                            [100.0, 0, 0], [100.1, 0, 0]])
        edges = build_knn_graph(anchors, 1)
        with pytest.raises(GraphDisconnectedError):
            assert_connected(4, edges)


class TestBoundaryAdjacency:
    def test_vertical_split_pairs(self):
        labels = np.zeros((3, 4), dtype=int)
        labels[:, 2:] = 1
        sps = build_superpixels(labels, np.zeros((3, 4, 3)))
        pairs = boundary_adjacency(sps, labels)
        asset = {tuple(r) for r in pairs}
        expect = set()
        for v in range(3):
            expect.add((0, 1, v, 1, 2, v))
            expect.add((1, 2, v, 0, 1, v))
        assert asset == expect

    def test_symmetric_closure(self):
        rng = np.random.default_rng(47)
        labels = _contiguous_random_labels(rng, 8, 8, 4)
        sps = build_superpixels(labels, _random_image(rng, 8, 8))
        pairs = boundary_adjacency(sps, labels)
        got = {tuple(r) for r in pairs}
        for (i, up, vp, k, uq, vq) in got:
            assert (k, uq, vq, i, up, vp) in got
            assert abs(up - uq) + abs(vp - vq) == 1  # 4-connected only
            assert i != k

    def test_no_pairs_for_single_superpixel(self):
        labels = np.zeros((4, 4), dtype=int)
        sps = build_superpixels(labels, np.zeros((4, 4, 3)))
        assert boundary_adjacency(sps, labels).shape == (0, 6)

    def test_labels_rebuilt_when_not_given(self):
        labels = np.zeros((3, 4), dtype=int)
        labels[:, 2:] = 1
        sps = build_superpixels(labels, np.zeros((3, 4, 3)))
        pairs_a = boundary_adjacency(sps, labels)
        pairs_b = boundary_adjacency(sps)
        assert {tuple(r) for r in pairs_a} == {tuple(r) for r in pairs_b}


class TestSceneGraph:
    def test_build_assembles_consistent_views(self):
        rng = np.random.default_rng(53)
        labels = _contiguous_random_labels(rng, 10, 10, 5)
        n = labels.max() + 1
        image = _random_image(rng, 10, 10)
        sps = build_superpixels(labels, image)
        anchors = rng.normal(size=(n, 3)) + [0, 0, 5.0]
        graph = SceneGraph.build(sps, labels, image, anchors, k=2)
        assert graph.n == n
        assert graph.width == 10 and graph.height == 10
        assert graph.image_diag == pytest.approx(np.hypot(10, 10))
        assert graph.pair_color_dist.shape[0] == graph.boundary_pairs.shape[0]
        # Color distances match a direct lookup.
        for row, cd in zip(graph.boundary_pairs[:10],
                           graph.pair_color_dist[:10]):
            i, up, vp, k, uq, vq = row
            expect = np.linalg.norm(image[vp, up] - image[vq, uq])
            assert cd == pytest.approx(expect, abs=1e-12)

    def test_build_rejects_disconnected(self):
        labels = np.zeros((2, 4), dtype=int)
        labels[:, 1] = 1
        labels[:, 2] = 2
        labels[:, 3] = 3
        image = np.zeros((2, 4, 3))
        sps = build_superpixels(labels, image)
        anchors = np.array([[0.0, 0, 1], [0.1, 0, 1],
                            [50.0, 0, 1], [50.1, 0, 1]])
        with pytest.raises(GraphDisconnectedError):
            SceneGraph.build(sps, labels, image, anchors, k=1)
