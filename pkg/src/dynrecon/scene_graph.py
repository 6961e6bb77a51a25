"""Superpixel bookkeeping and the two relation sets the energy uses.

Two different neighborhood structures coexist: a directed K-nearest
graph over 3D patch anchors (rigidity term) and pixel-level 4-connected
adjacencies across superpixel boundaries (continuity term).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GraphDisconnectedError, InputError


@dataclass(frozen=True, eq=False)
class Superpixel:
    """One segment: member pixels, frontier pixels, anchor, mean color.

    ``pixels`` and ``boundary_pixels`` are (P, 2) / (B, 2) integer (u, v)
    arrays in scan order; ``anchor_pixel`` is the member pixel nearest
    the centroid (ties broken in scan order).
    """

    id: int
    pixels: np.ndarray
    boundary_pixels: np.ndarray
    anchor_pixel: np.ndarray
    mean_color: np.ndarray

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


def build_superpixels(labels: np.ndarray, image: np.ndarray) -> list[Superpixel]:
    """Bundle a label map and color image into Superpixel records.

    ``labels`` must cover every pixel with contiguous ids 0..n-1.
    A pixel is a boundary pixel when any of its 4-neighbors is outside
    the image or carries a different label.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InputError("label map must be 2D")
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != labels.shape or image.shape[2:] != (3,):
        raise InputError("image must be (H, W, 3) matching the label map")
    h, w = labels.shape
    ids = np.unique(labels)
    n = int(ids[-1]) + 1 if ids.size else 0
    if ids[0] != 0 or ids.size != n:
        raise InputError("superpixel ids must be contiguous from 0")

    # Frontier detection against a -1 border.
    padded = np.full((h + 2, w + 2), -1, dtype=np.int64)
    padded[1:-1, 1:-1] = labels
    core = padded[1:-1, 1:-1]
    frontier = ((core != padded[:-2, 1:-1]) | (core != padded[2:, 1:-1])
                | (core != padded[1:-1, :-2]) | (core != padded[1:-1, 2:]))

    vv, uu = np.mgrid[0:h, 0:w]
    flat_labels = labels.ravel()
    order = np.argsort(flat_labels, kind="stable")
    starts = np.searchsorted(flat_labels[order], np.arange(n + 1))

    out = []
    u_flat, v_flat = uu.ravel(), vv.ravel()
    f_flat = frontier.ravel()
    colors = image.reshape(-1, 3)
    for i in range(n):
        idx = order[starts[i]:starts[i + 1]]
        if idx.size == 0:
            raise InputError(f"superpixel id {i} has no pixels")
        idx = np.sort(idx)  # scan order
        u, v = u_flat[idx], v_flat[idx]
        pix = np.column_stack([u, v]).astype(np.int32)
        bmask = f_flat[idx]
        centroid = np.array([u.mean(), v.mean()])
        d2 = (u - centroid[0]) ** 2 + (v - centroid[1]) ** 2
        best = np.lexsort((u, v, d2))[0]
        out.append(Superpixel(
            id=i,
            pixels=pix,
            boundary_pixels=pix[bmask],
            anchor_pixel=pix[best].astype(float),
            mean_color=colors[idx].mean(axis=0),
        ))
    return out


def build_knn_graph(anchors3d: np.ndarray, k: int) -> np.ndarray:
    """Directed K-nearest edges (E, 2) over 3D anchors.

    Distance ties are broken toward the lower index.  The relation is
    not symmetrized.
    """
    anchors = np.asarray(anchors3d, dtype=float)
    n = anchors.shape[0]
    if n == 1:
        return np.zeros((0, 2), dtype=np.int32)
    if not 1 <= k <= n - 1:
        raise InputError(f"k must be in [1, {n - 1}], got {k}")
    d2 = np.sum((anchors[:, None, :] - anchors[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return np.column_stack([src, nbrs.ravel()]).astype(np.int32)


def assert_connected(n_nodes: int, edges: np.ndarray) -> None:
    """BFS connectivity over the undirected closure of directed edges."""
    if n_nodes <= 1:
        return
    adj = [[] for _ in range(n_nodes)]
    for i, k in np.asarray(edges):
        adj[int(i)].append(int(k))
        adj[int(k)].append(int(i))
    seen = np.zeros(n_nodes, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        node = stack.pop()
        for nxt in adj[node]:
            if not seen[nxt]:
                seen[nxt] = True
                stack.append(nxt)
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise GraphDisconnectedError(
            f"anchor graph is disconnected (node {missing} unreachable)")


def boundary_adjacency(superpixels: list[Superpixel],
                       labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Pixel-level 4-connected adjacencies across superpixel borders.

    Returns an (M, 6) int array of rows (i, u_p, v_p, k, u_q, v_q); the
    set is symmetric (each unordered adjacency appears in both
    orientations).  ``labels`` is rebuilt from the superpixels when not
    supplied.
    """
    if labels is None:
        w = 1 + max(int(sp.pixels[:, 0].max()) for sp in superpixels)
        h = 1 + max(int(sp.pixels[:, 1].max()) for sp in superpixels)
        labels = np.full((h, w), -1, dtype=np.int64)
        for sp in superpixels:
            labels[sp.pixels[:, 1], sp.pixels[:, 0]] = sp.id
    labels = np.asarray(labels)
    h, w = labels.shape

    rows = []
    # Horizontal and vertical label changes; emit both orientations.
    lh, rh = labels[:, :-1], labels[:, 1:]
    vmask, umask = np.nonzero(lh != rh)
    for v, u in zip(vmask, umask):
        i, k = int(labels[v, u]), int(labels[v, u + 1])
        rows.append((i, u, v, k, u + 1, v))
        rows.append((k, u + 1, v, i, u, v))
    th, bh = labels[:-1, :], labels[1:, :]
    vmask, umask = np.nonzero(th != bh)
    for v, u in zip(vmask, umask):
        i, k = int(labels[v, u]), int(labels[v + 1, u])
        rows.append((i, u, v, k, u, v + 1))
        rows.append((k, u, v + 1, i, u, v))
    if not rows:
        return np.zeros((0, 6), dtype=np.int32)
    return np.asarray(rows, dtype=np.int32)


@dataclass(frozen=True, eq=False)
class SceneGraph:
    """Superpixels plus the relations and per-pair data the energy needs."""

    superpixels: list[Superpixel]
    knn_edges: np.ndarray
    boundary_pairs: np.ndarray
    pair_color_dist: np.ndarray
    anchors3d: np.ndarray
    width: int
    height: int

    @property
    def n(self) -> int:
        return len(self.superpixels)

    @property
    def image_diag(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def anchor_pixels(self) -> np.ndarray:
        return np.array([sp.anchor_pixel for sp in self.superpixels])

    @classmethod
    def build(cls, superpixels: list[Superpixel], labels: np.ndarray,
              image: np.ndarray, anchors3d: np.ndarray, k: int) -> "SceneGraph":
        """Assemble relations and validate K-NN connectivity."""
        edges = build_knn_graph(anchors3d, k)
        assert_connected(len(superpixels), edges)
        pairs = boundary_adjacency(superpixels, labels)
        image = np.asarray(image, dtype=float)
        cp = image[pairs[:, 2], pairs[:, 1]] - image[pairs[:, 5], pairs[:, 4]]
        color_dist = np.linalg.norm(cp, axis=1) if pairs.size else np.zeros(0)
        h, w = np.asarray(labels).shape
        return cls(superpixels=superpixels, knn_edges=edges,
                   boundary_pairs=pairs, pair_color_dist=color_dist,
                   anchors3d=np.asarray(anchors3d, dtype=float),
                   width=w, height=h)
