"""The three-term objective over per-patch scales, planes and motions.

Terms (all pure functions of an immutable SceneState):

* e_arap: over directed k-NN anchor edges, motion-matrix smoothness
  plus preservation of anchor-to-anchor distances before/after motion.
* e_proj: per patch, mean pixel transfer error of its motion-induced
  homography against the observed flow targets.
* e_cont: over 4-connected boundary pixel pairs, the 3D gap between
  the two patches' planes evaluated at the shared boundary pixel, in
  both frames; the next-frame gap is truncated at sigma to let true
  depth edges survive.

Participation rules: unreliable patches contribute to nothing; patches
without a determined normal (static or placeholder) additionally skip
the distance-preservation term and e_cont, because their plane carries
no evidence.  Their scales are pinned only by the simplex constraint.

Anchor-distance weights use pixel distances normalized by the image
diagonal, otherwise beta = 3 would zero every weight at image scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (
    Intrinsics,
    RigidMotion,
    apply_homography,
    homography_from_motion_plane,
    pixel_rays,
)
from .ingest import FlowField
from .local_sfm import PlanarPatch
from .scene_graph import SceneGraph, Superpixel

RAY_DOT_FLOOR = 1e-12  # |n.ray| clamp when a plane runs along a ray


@dataclass(frozen=True)
class EnergyParams:
    """Weights and constants of the combined objective."""

    beta: float = 3.0
    sigma: float = 15.0
    alpha1: float = 1.0
    # alpha2 = 0.1 leaves boundary stitching too weak to pull perturbed
    # normals back on the oracle scenes; 0.5 passes with margin
    alpha2: float = 0.5
    knn: int = 15
    # 1.0 keeps the motion-matrix Frobenius norm as written (rotation
    # entries and metric translation mixed); other values rescale the
    # translation block only.
    arap_unit_balance: float = 1.0

    def __post_init__(self):
        if self.beta <= 0 or self.sigma <= 0:
            raise ValueError("beta and sigma must be positive")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("alpha weights must be non-negative")
        if self.knn < 1:
            raise ValueError("knn must be at least 1")


def weight_arap(sp_i: Superpixel, sp_k: Superpixel, beta: float,
                image_diag: float) -> float:
    """exp(-beta * anchor pixel distance / image diagonal), in (0, 1]."""
    dist = float(np.linalg.norm(sp_i.anchor_pixel - sp_k.anchor_pixel))
    return float(np.exp(-beta * dist / image_diag))


@dataclass(eq=False)
class SceneState:
    """A full assignment: graph, flow, per-patch geometry and scales.

    lam holds the per-patch scale; patch.motion stays at unit gauge and
    is only combined with lam inside the energy evaluation.
    """

    graph: SceneGraph
    intr: Intrinsics
    flow: FlowField
    patches: list[PlanarPatch]
    lam: np.ndarray
    _flow_pairs: Optional[list] = field(default=None, repr=False)
    _boundary_rays: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def build(cls, graph: SceneGraph, intr: Intrinsics, flow: FlowField,
              patches: list[PlanarPatch],
              lam: Optional[np.ndarray] = None) -> "SceneState":
        n = graph.n
        if len(patches) != n:
            raise ValueError("one patch per superpixel required")
        if lam is None:
            lam = np.full(n, 1.0 / n)
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (n,) or np.any(lam <= 0):
            raise ValueError("lam must be positive, one entry per patch")
        return cls(graph=graph, intr=intr, flow=flow, patches=list(patches),
                   lam=lam)

    def with_scales(self, lam: np.ndarray) -> "SceneState":
        state = replace(self, lam=np.asarray(lam, dtype=float))
        state._flow_pairs = self._flow_pairs
        state._boundary_rays = self._boundary_rays
        return state

    def with_patch(self, index: int, patch: PlanarPatch) -> "SceneState":
        patches = list(self.patches)
        patches[index] = patch
        state = replace(self, patches=patches)
        state._flow_pairs = self._flow_pairs
        state._boundary_rays = self._boundary_rays
        return state

    # geometry-independent caches, shared across with_* copies
    def flow_pairs(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Valid (source px, flow target px) arrays for superpixel i."""
        if self._flow_pairs is None:
            pairs = []
            for sp in self.graph.superpixels:
                px = sp.pixels.astype(float)
                uv = self.flow.uv[sp.pixels[:, 1], sp.pixels[:, 0]]
                ok = np.isfinite(uv).all(axis=1)
                pairs.append((px[ok], px[ok] + uv[ok]))
            self._flow_pairs = pairs
        return self._flow_pairs[i]

    def boundary_rays(self) -> np.ndarray:
        """Camera rays of each boundary row's own pixel (row pixel p)."""
        if self._boundary_rays is None:
            rows = self.graph.boundary_pairs
            px = rows[:, 1:3].astype(float)
            self._boundary_rays = pixel_rays(self.intr, px)
        return self._boundary_rays

    # derived per-patch arrays at current scales
    def scaled_translations(self) -> np.ndarray:
        t_unit = np.array([p.motion.translation for p in self.patches])
        return self.lam[:, None] * t_unit

    def rotations(self) -> np.ndarray:
        return np.array([p.motion.rotation for p in self.patches])

    def reliable_mask(self) -> np.ndarray:
        return np.array([p.reliable for p in self.patches])

    def planeful_mask(self) -> np.ndarray:
        """Patches whose plane orientation is actual evidence."""
        return np.array([p.reliable and p.normal_determined
                         for p in self.patches])

    def scaleful_mask(self) -> np.ndarray:
        """Patches whose own scale is observable (translation present)."""
        return np.array([p.reliable and p.normal_determined
                         and not p.static for p in self.patches])


def arap_edge_weights(graph: SceneGraph, beta: float) -> np.ndarray:
    """Per k-NN edge exp(-beta * anchor distance / diagonal)."""
    edges = graph.knn_edges
    a = graph.anchor_pixels
    dist = np.linalg.norm(a[edges[:, 0]] - a[edges[:, 1]], axis=1)
    return np.exp(-beta * dist / graph.image_diag)


def e_arap(state: SceneState, params: EnergyParams) -> float:
    edges = state.graph.knn_edges
    if len(edges) == 0:
        return 0.0
    w = arap_edge_weights(state.graph, params.beta)
    i, k = edges[:, 0], edges[:, 1]

    rot = state.rotations()
    trans = state.scaled_translations()
    reliable = state.reliable_mask()
    scaleful = state.scaleful_mask()

    rot_gap = rot[i] - rot[k]
    t_gap = trans[i] - trans[k]
    bal = params.arap_unit_balance
    frob = np.sqrt((rot_gap ** 2).sum(axis=(1, 2))
                   + bal * bal * (t_gap ** 2).sum(axis=1))
    term1 = w * frob * (reliable[i] & reliable[k])

    anchors_unit = np.array([p.anchor3d for p in state.patches])
    x = state.lam[:, None] * anchors_unit
    x_next = np.einsum("nab,nb->na", rot, x) + trans
    d_ref = np.linalg.norm(x[i] - x[k], axis=1)
    d_next = np.linalg.norm(x_next[i] - x_next[k], axis=1)
    term2 = w * np.abs(d_ref - d_next) * (scaleful[i] & scaleful[k])

    return float(np.sum(term1) + np.sum(term2))


def patch_proj_error(state: SceneState, i: int) -> float:
    """Mean transfer error (px) of patch i's homography vs the flow."""
    src, dst = state.flow_pairs(i)
    if len(src) == 0:
        return 0.0
    patch = state.patches[i]
    # lam cancels between t and d, but evaluate at the scaled gauge so
    # the invariance is exercised rather than assumed
    if patch.static:
        scaled_motion = patch.motion
    else:
        scaled_motion = RigidMotion(patch.motion.rotation, patch.motion.t_dir,
                                    patch.motion.scale * state.lam[i])
    hmat = homography_from_motion_plane(
        state.intr, scaled_motion, patch.plane.scaled(state.lam[i]))
    err = np.linalg.norm(apply_homography(hmat, src) - dst, axis=1)
    return float(err.mean())


def e_proj(state: SceneState, params: EnergyParams) -> float:
    del params  # w3 = 1; the term has no tunable of its own
    total = 0.0
    for i, patch in enumerate(state.patches):
        if not patch.reliable:
            continue
        total += patch_proj_error(state, i)
    return float(total)


def _boundary_points(state: SceneState, rows: np.ndarray, rays: np.ndarray,
                     side: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backproject each row's pixel p onto the `side` patch's scaled plane.

    Returns both-frame points; the ray denominator is clamped away from
    zero so edge-on planes produce a large but finite gap.
    """
    normals = np.array([p.plane.normal for p in state.patches])
    depths = np.array([p.plane.depth for p in state.patches])
    rot = state.rotations()
    trans = state.scaled_translations()

    n_row = normals[side]
    d_row = depths[side] * state.lam[side]
    den = np.einsum("md,md->m", n_row, rays)
    den = np.where(np.abs(den) < RAY_DOT_FLOOR, -RAY_DOT_FLOOR, den)
    s = -d_row / den
    pts = s[:, None] * rays
    pts_next = np.einsum("mab,mb->ma", rot[side], pts) + trans[side]
    return pts, pts_next


def e_cont(state: SceneState, params: EnergyParams) -> float:
    rows = state.graph.boundary_pairs
    if len(rows) == 0:
        return 0.0
    planeful = state.planeful_mask()
    side_i, side_k = rows[:, 0], rows[:, 3]
    active = planeful[side_i] & planeful[side_k]
    if not active.any():
        return 0.0
    rows = rows[active]
    rays = state.boundary_rays()[active]
    side_i, side_k = rows[:, 0], rows[:, 3]

    x_i, x_i_next = _boundary_points(state, rows, rays, side_i)
    x_k, x_k_next = _boundary_points(state, rows, rays, side_k)
    gap_ref = np.linalg.norm(x_i - x_k, axis=1)
    gap_next = np.minimum(np.linalg.norm(x_i_next - x_k_next, axis=1),
                          params.sigma)
    w4 = np.exp(-params.beta * state.graph.pair_color_dist[active])
    return float(np.sum(w4 * (gap_ref + gap_next)))


def e_total(state: SceneState, params: EnergyParams) -> float:
    return (e_arap(state, params)
            + params.alpha1 * e_proj(state, params)
            + params.alpha2 * e_cont(state, params))
