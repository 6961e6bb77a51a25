"""Shared helpers for the test suite: random visible scenes and samplers."""

from __future__ import annotations

import numpy as np

from dynrecon.geometry import (
    Intrinsics,
    Plane,
    RigidMotion,
    rotation_from_axis_angle,
)

DEFAULT_INTR = Intrinsics(fx=160.0, fy=160.0, cx=96.0, cy=72.0)


def random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    angle = rng.uniform(0.0, max_angle)
    return rotation_from_axis_angle(angle * random_unit(rng))


def random_visible_plane(rng: np.random.Generator) -> Plane:
    """A plane facing the camera (normal tilted at most ~60 deg off -Z)."""
    n = np.array([rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), -1.0])
    return Plane(n, rng.uniform(1.0, 5.0))


def grid_pixels(intr: Intrinsics, half_extent: float = 40.0, step: int = 5
                ) -> np.ndarray:
    """Small pixel grid centred on the principal point."""
    u = np.arange(intr.cx - half_extent, intr.cx + half_extent + 1, step)
    v = np.arange(intr.cy - half_extent, intr.cy + half_extent + 1, step)
    uu, vv = np.meshgrid(u, v)
    return np.column_stack([uu.ravel(), vv.ravel()]).astype(float)


def random_visible_setup(rng: np.random.Generator,
                         intr: Intrinsics = DEFAULT_INTR,
                         max_rot: float = 0.35,
                         max_trans: float = 0.8):
    """Random (motion, plane) pair visible in both frames on a pixel grid.

    Rejection-samples until every grid pixel backprojects in front of the
    camera and stays in front after the motion.
    """
    from dynrecon.geometry import backproject

    pixels = grid_pixels(intr)
    while True:
        plane = random_visible_plane(rng)
        rot = random_rotation(rng, max_rot)
        t = rng.uniform(-max_trans, max_trans, size=3)
        if np.linalg.norm(t) < 1e-3:
            continue
        motion = RigidMotion.from_rt(rot, t)
        try:
            x = backproject(intr, pixels, plane)
        except Exception:
            continue
        x2 = motion.apply(x)
        if np.all(x2[:, 2] > 0.1):
            return motion, plane, pixels


def voronoi_labels(rng: np.random.Generator, h: int, w: int, n: int
                   ) -> np.ndarray:
    """Connected random partition: nearest of n distinct seed pixels."""
    import numpy as _np

    flat = rng.choice(h * w, size=n, replace=False)
    seeds = _np.column_stack([flat % w, flat // w]).astype(float)
    vv, uu = _np.mgrid[0:h, 0:w]
    d2 = (uu[..., None] - seeds[:, 0]) ** 2 + (vv[..., None] - seeds[:, 1]) ** 2
    labels = _np.argmin(d2, axis=2).astype(_np.int32)
    # relabel to contiguous scan-order ids; drop empty cells if any seed
    # lost every pixel to ties
    _, inv = _np.unique(labels, return_inverse=True)
    order = _np.zeros(inv.max() + 1, dtype=_np.int32)
    seen: dict[int, int] = {}
    flat_inv = inv.ravel()
    for value in flat_inv:
        if value not in seen:
            seen[value] = len(seen)
    for value, rank in seen.items():
        order[value] = rank
    return order[inv].reshape(h, w).astype(_np.int32)


def random_scene_state(seed: int, n_max: int = 10, h: int = 24, w: int = 32):
    """A small random SceneState plus params, for oracle cross-checks.

    Mixes reliable, static, and unreliable patches; the flow is rendered
    from each patch's ground-truth homography with mild noise and a few
    NaN holes.
    """
    import numpy as _np

    from dynrecon.energy import EnergyParams, SceneState
    from dynrecon.geometry import (
        Plane,
        RigidMotion,
        apply_homography,
        backproject,
        homography_from_motion_plane,
    )
    from dynrecon.ingest import FlowField
    from dynrecon.local_sfm import PlanarPatch, placeholder_patch
    from dynrecon.scene_graph import SceneGraph, build_superpixels

    rng = _np.random.default_rng(seed)
    intr = Intrinsics(fx=float(w), fy=float(w), cx=w / 2.0, cy=h / 2.0)
    n = int(rng.integers(2, n_max + 1))
    labels = voronoi_labels(rng, h, w, n)
    n = int(labels.max()) + 1
    image = rng.uniform(0.0, 1.0, size=(h, w, 3))
    sps = build_superpixels(labels, image)

    corner_px = _np.array([[0.0, 0.0], [w - 1.0, 0.0],
                           [0.0, h - 1.0], [w - 1.0, h - 1.0]])

    def sample_plane() -> Plane:
        while True:
            plane = random_visible_plane(rng)
            try:
                backproject(intr, corner_px, plane)
            except Exception:
                continue
            return plane

    patches = []
    for sp in sps:
        kind = rng.uniform()
        if kind < 0.15:
            patches.append(placeholder_patch(sp, intr))
            continue
        plane = sample_plane()
        rot = random_rotation(rng, 0.15)
        if kind < 0.30:
            motion = RigidMotion(rot, np.zeros(3), 1.0)
            plane = Plane(np.array([0.0, 0.0, -1.0]), 1.0)
            anchor3d = backproject(intr, sp.anchor_pixel[None, :], plane)[0]
            boundary3d = backproject(intr, sp.boundary_pixels.astype(float),
                                     plane)
            patches.append(PlanarPatch(
                sp_id=sp.id, plane=plane, motion=motion, anchor3d=anchor3d,
                boundary3d=boundary3d, residual=0.0, reliable=True,
                normal_determined=False))
            continue
        t = rng.uniform(-0.4, 0.4, size=3)
        while _np.linalg.norm(t) < 1e-2:
            t = rng.uniform(-0.4, 0.4, size=3)
        t /= _np.linalg.norm(t)
        motion = RigidMotion(rot, t, 1.0)
        anchor3d = backproject(intr, sp.anchor_pixel[None, :], plane)[0]
        boundary3d = backproject(intr, sp.boundary_pixels.astype(float),
                                 plane)
        patches.append(PlanarPatch(
            sp_id=sp.id, plane=plane, motion=motion, anchor3d=anchor3d,
            boundary3d=boundary3d, residual=0.0))

    lam = rng.uniform(0.5, 1.5, size=n)
    lam /= lam.sum()

    uv = _np.zeros((h, w, 2), dtype=_np.float32)
    for i, (sp, patch) in enumerate(zip(sps, patches)):
        hmat = homography_from_motion_plane(
            intr, RigidMotion(patch.motion.rotation, patch.motion.t_dir,
                              patch.motion.scale * lam[i]) if not patch.static
            else patch.motion,
            patch.plane.scaled(lam[i]))
        px = sp.pixels.astype(float)
        uv[sp.pixels[:, 1], sp.pixels[:, 0]] = (
            apply_homography(hmat, px) - px
            + rng.normal(scale=0.2, size=(len(px), 2)))
    holes = rng.uniform(size=(h, w)) < 0.03
    uv[holes] = _np.nan

    anchors3d = _np.array([p.anchor3d for p in patches])
    graph = SceneGraph.build(sps, labels, image, anchors3d,
                             k=min(3, n - 1))
    state = SceneState.build(graph, intr, FlowField(uv), patches, lam)
    params = EnergyParams(alpha1=float(rng.uniform(0.2, 2.0)),
                          alpha2=float(rng.uniform(0.2, 2.0)))
    return state, params
