"""Synthetic piecewise-planar scenes with exact ground truth.

A scene is a set of textured planes, each covering a polygonal image
region in the reference frame and moving with one of a small set of
rigid motions.  Rendering produces exact depth for both frames, exact
forward flow, per-pixel plane labels, an occlusion mask, and a texture
pair that is consistent across the two frames (the texture lives on
the plane surfaces).

The flow is computed by the direct point path
backproject -> move -> project, pixel by pixel, deliberately not via
the induced homography, so the two code paths can be checked against
each other in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import SceneSpecError
from .geometry import (
    Intrinsics,
    Plane,
    RigidMotion,
    pixel_rays,
    project,
    rotation_from_axis_angle,
)
from .ingest import FlowField


@dataclass(frozen=True, eq=False)
class PlaneSpec:
    """One textured plane: geometry, image region, paint, motion index."""

    plane: Plane
    region: np.ndarray  # (V, 2) polygon in reference pixel coords
    color: np.ndarray  # base RGB in [0, 1]
    motion_index: int
    texture_amplitude: float = 0.08
    texture_scale: float = 0.15


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Scene description; see docs/scene_spec_schema.json for the format."""

    width: int
    height: int
    intrinsics: Intrinsics
    planes: list[PlaneSpec]
    motions: list[RigidMotion]
    # NaN out flow wherever the target is unobservable in the next
    # frame, either occluded by another plane or off the image
    mask_occluded_flow: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        return _parse_spec(doc)

    @classmethod
    def from_json(cls, path: str) -> "SceneSpec":
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SceneSpecError("/", f"not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SceneSpecError("/", "top level must be an object")
        return cls.from_dict(doc)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Everything render() knows about a scene, per pixel and per plane."""

    spec: SceneSpec
    labels: np.ndarray  # (H, W) int32 plane index per reference pixel
    depth_ref: np.ndarray  # (H, W) float64
    depth_next: np.ndarray  # (H, W) float64, NaN where nothing projects
    labels_next: np.ndarray  # (H, W) int32, -1 where nothing projects
    flow: FlowField  # forward flow quantized to float32, NaN where masked
    flow_exact: np.ndarray  # (H, W, 2) float64 before quantization/masking
    occlusion: np.ndarray  # (H, W) bool, target hidden behind another plane
    image_ref: np.ndarray  # (H, W, 3) float64 in [0, 1]
    image_next: np.ndarray


def _want(doc: dict, key: str, pointer: str):
    if key not in doc:
        raise SceneSpecError(f"{pointer}/{key}", "missing")
    return doc[key]


def _vec(value, length: int, pointer: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (length,) or not np.all(np.isfinite(arr)):
        raise SceneSpecError(pointer, f"must be {length} finite numbers")
    return arr


def _parse_spec(doc: dict) -> SceneSpec:
    width = _want(doc, "width", "")
    height = _want(doc, "height", "")
    if not (isinstance(width, int) and width > 0):
        raise SceneSpecError("/width", "must be a positive integer")
    if not (isinstance(height, int) and height > 0):
        raise SceneSpecError("/height", "must be a positive integer")

    intr_doc = _want(doc, "intrinsics", "")
    try:
        intr = Intrinsics.from_dict(intr_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneSpecError("/intrinsics", str(exc)) from exc

    motions_doc = _want(doc, "motions", "")
    if not isinstance(motions_doc, list) or not motions_doc:
        raise SceneSpecError("/motions", "must be a non-empty array")
    motions = []
    for i, m in enumerate(motions_doc):
        ptr = f"/motions/{i}"
        axis_angle = _vec(_want(m, "axis_angle", ptr), 3, f"{ptr}/axis_angle")
        translation = _vec(_want(m, "translation", ptr), 3,
                           f"{ptr}/translation")
        motions.append(RigidMotion.from_rt(
            rotation_from_axis_angle(axis_angle), translation))

    planes_doc = _want(doc, "planes", "")
    if not isinstance(planes_doc, list) or not planes_doc:
        raise SceneSpecError("/planes", "must be a non-empty array")
    planes = []
    for i, p in enumerate(planes_doc):
        ptr = f"/planes/{i}"
        normal = _vec(_want(p, "normal", ptr), 3, f"{ptr}/normal")
        depth = _want(p, "depth", ptr)
        try:
            plane = Plane(normal, float(depth))
        except (TypeError, ValueError) as exc:
            raise SceneSpecError(ptr, str(exc)) from exc
        region = np.asarray(_want(p, "region", ptr), dtype=float)
        if region.ndim != 2 or region.shape[0] < 3 or region.shape[1] != 2:
            raise SceneSpecError(f"{ptr}/region",
                                 "must be a polygon with >= 3 vertices")
        color = _vec(_want(p, "color", ptr), 3, f"{ptr}/color")
        if color.min() < 0 or color.max() > 1:
            raise SceneSpecError(f"{ptr}/color", "components must be in [0,1]")
        motion_index = _want(p, "motion", ptr)
        if not isinstance(motion_index, int) or not (
                0 <= motion_index < len(motions)):
            raise SceneSpecError(f"{ptr}/motion",
                                 f"must index motions[0..{len(motions) - 1}]")
        amp = float(p.get("texture_amplitude", 0.08))
        if not 0 <= amp <= 0.5:
            raise SceneSpecError(f"{ptr}/texture_amplitude",
                                 "must be in [0, 0.5]")
        scale = float(p.get("texture_scale", 0.15))
        if scale <= 0:
            raise SceneSpecError(f"{ptr}/texture_scale", "must be positive")
        planes.append(PlaneSpec(plane=plane, region=region, color=color,
                                motion_index=motion_index,
                                texture_amplitude=amp, texture_scale=scale))

    masked = doc.get("mask_occluded_flow", False)
    if not isinstance(masked, bool):
        raise SceneSpecError("/mask_occluded_flow", "must be a boolean")
    return SceneSpec(width=width, height=height, intrinsics=intr,
                     planes=planes, motions=motions,
                     mask_occluded_flow=masked)


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd containment test for points (N, 2) in polygon (V, 2)."""
    px, py = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    v = len(poly)
    for a in range(v):
        x1, y1 = poly[a]
        x2, y2 = poly[(a + 1) % v]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xs)
    return inside


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    h = (ix.astype(np.uint64) * np.uint64(374761393)
         + iy.astype(np.uint64) * np.uint64(668265263))
    h ^= np.uint64(seed & 0xFFFFFFFF) * np.uint64(2246822519)
    h = (h ^ (h >> np.uint64(13))) * np.uint64(1274126177)
    h ^= h >> np.uint64(16)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0x1000000)


def _value_noise(uv: np.ndarray, seed: int) -> np.ndarray:
    """Two-octave smoothed value noise in [0, 1] for points (N, 2)."""
    total = np.zeros(len(uv))
    amp, freq = 2.0 / 3.0, 1.0
    for octave in range(2):
        p = uv * freq
        i0 = np.floor(p).astype(np.int64)
        f = p - i0
        t = f * f * (3.0 - 2.0 * f)
        ix, iy = i0[:, 0], i0[:, 1]
        n00 = _hash01(ix, iy, seed + octave)
        n10 = _hash01(ix + 1, iy, seed + octave)
        n01 = _hash01(ix, iy + 1, seed + octave)
        n11 = _hash01(ix + 1, iy + 1, seed + octave)
        nx0 = n00 + t[:, 0] * (n10 - n00)
        nx1 = n01 + t[:, 0] * (n11 - n01)
        total += amp * (nx0 + t[:, 1] * (nx1 - nx0))
        amp *= 0.5
        freq *= 2.0
    return total


def _surface_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal in-plane axes."""
    ref = np.array([0.0, 1.0, 0.0])
    if abs(normal @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(normal, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2


def _paint(points: np.ndarray, ps: PlaneSpec, plane_idx: int, seed: int
           ) -> np.ndarray:
    """Surface-attached texture: identical for the same 3D point."""
    e1, e2 = _surface_basis(ps.plane.normal)
    uv = np.column_stack([points @ e1, points @ e2]) / ps.texture_scale
    noise = _value_noise(uv, seed * 1000003 + plane_idx)
    shade = 2.0 * (noise - 0.5) * ps.texture_amplitude
    return np.clip(ps.color[None, :] + shade[:, None], 0.0, 1.0)


def _moved_plane(plane: Plane, motion: RigidMotion, pointer: str) -> Plane:
    """The plane's location in the next frame's camera coordinates."""
    n2 = motion.rotation @ plane.normal
    d2 = plane.depth - float(n2 @ motion.translation)
    if d2 <= 0:
        raise SceneSpecError(pointer, "plane crosses the camera after moving")
    return Plane(n2, d2)


def render(spec: SceneSpec, seed: int = 0) -> GroundTruth:
    """Rasterize a scene into exact per-pixel ground truth.

    Raises SceneSpecError when regions do not cover the image, when a
    plane is not fully visible in either frame, or when a region is
    assigned depth behind the camera.
    """
    h, w, intr = spec.height, spec.width, spec.intrinsics
    vv, uu = np.mgrid[0:h, 0:w]
    pix = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    npx = h * w

    labels = np.full(npx, -1, dtype=np.int32)
    for i, ps in enumerate(spec.planes):
        unassigned = labels < 0
        if not unassigned.any():
            break
        hit = points_in_polygon(pix[unassigned], ps.region)
        idx = np.flatnonzero(unassigned)[hit]
        labels[idx] = i
    if (labels < 0).any():
        miss = int(np.flatnonzero(labels < 0)[0])
        raise SceneSpecError(
            "/planes", "regions do not cover pixel "
            f"(u={miss % w}, v={miss // w})")
    for i in range(len(spec.planes)):
        if not (labels == i).any():
            raise SceneSpecError(f"/planes/{i}/region",
                                 "covers no pixel after priority rasterization")

    rays = pixel_rays(intr, pix)
    normals = np.array([ps.plane.normal for ps in spec.planes])
    depths = np.array([ps.plane.depth for ps in spec.planes])
    denom = rays @ normals.T  # (npx, nplanes)
    per_pixel_denom = denom[np.arange(npx), labels]
    if np.any(per_pixel_denom >= -1e-12):
        bad = int(np.flatnonzero(per_pixel_denom >= -1e-12)[0])
        raise SceneSpecError(
            f"/planes/{int(labels[bad])}",
            "not visible at every pixel of its region in the reference frame")
    s = -depths[labels] / per_pixel_denom
    points = s[:, None] * rays
    depth_ref = points[:, 2].reshape(h, w)

    # Per-pixel rigid motion and exact forward flow.
    points_next = np.empty_like(points)
    for i, ps in enumerate(spec.planes):
        m = spec.motions[ps.motion_index]
        sel = labels == i
        points_next[sel] = points[sel] @ m.rotation.T + m.translation
    if np.any(points_next[:, 2] <= 0):
        bad = int(np.flatnonzero(points_next[:, 2] <= 0)[0])
        raise SceneSpecError(
            f"/planes/{int(labels[bad])}",
            "moves behind the camera in the next frame")
    pix_next = project(intr, points_next)
    flow_exact = (pix_next - pix).reshape(h, w, 2)
    flow_uv = flow_exact.astype(np.float32)

    # Next-frame coverage: every plane's region maps through its exact
    # point transfer; nearest plane wins by depth.
    moved = [
        _moved_plane(ps.plane, spec.motions[ps.motion_index], f"/planes/{i}")
        for i, ps in enumerate(spec.planes)]
    regions_next = []
    for i, ps in enumerate(spec.planes):
        vert_rays = pixel_rays(intr, ps.region)
        vden = vert_rays @ ps.plane.normal
        if np.any(vden >= -1e-12):
            raise SceneSpecError(f"/planes/{i}/region",
                                 "polygon vertex ray misses the plane")
        vpts = (-ps.plane.depth / vden)[:, None] * vert_rays
        m = spec.motions[ps.motion_index]
        vnext = vpts @ m.rotation.T + m.translation
        if np.any(vnext[:, 2] <= 0):
            raise SceneSpecError(f"/planes/{i}/region",
                                 "polygon moves behind the camera")
        regions_next.append(project(intr, vnext))

    depth_next = np.full(npx, np.nan)
    labels_next = np.full(npx, -1, dtype=np.int32)
    for i in range(len(spec.planes)):
        inside = points_in_polygon(pix, regions_next[i])
        den2 = rays @ moved[i].normal
        front = den2 < -1e-12  # plane faces the camera along this ray
        z2 = np.where(front, -moved[i].depth / np.where(front, den2, -1.0),
                      np.inf)
        z2 = np.where(inside, z2, np.inf)
        better = z2 < np.where(np.isnan(depth_next), np.inf, depth_next)
        depth_next[better] = z2[better]
        labels_next[better] = i
    depth_next[np.isinf(depth_next)] = np.nan

    # Occlusion: the moved point sits strictly behind another plane
    # along the next-frame ray through its landing pixel.
    rays_next = pixel_rays(intr, pix_next)
    occluded = np.zeros(npx, dtype=bool)
    for i in range(len(spec.planes)):
        inside = points_in_polygon(pix_next, regions_next[i])
        den2 = rays_next @ moved[i].normal
        front = den2 < -1e-12
        z_i = np.where(front, -moved[i].depth / np.where(front, den2, -1.0),
                       np.inf)
        z_i = np.where(inside, z_i, np.inf)
        occluded |= z_i < points_next[:, 2] - 1e-9
    occlusion = occluded.reshape(h, w)

    # Texture both frames from the shared surface-attached noise.
    image_ref = np.zeros((npx, 3))
    for i, ps in enumerate(spec.planes):
        sel = labels == i
        image_ref[sel] = _paint(points[sel], ps, i, seed)
    image_next = np.zeros((npx, 3))
    covered = labels_next >= 0
    for i, ps in enumerate(spec.planes):
        sel = covered & (labels_next == i)
        if not sel.any():
            continue
        pts2 = rays[sel] * depth_next[sel][:, None]
        m = spec.motions[ps.motion_index]
        back = (pts2 - m.translation) @ m.rotation
        image_next[sel] = _paint(back, ps, i, seed)

    flow = flow_uv.copy()
    if spec.mask_occluded_flow:
        # a flow method cannot measure a target that is hidden or has
        # left the frame; both count as unobservable
        off = ((pix_next[:, 0] < -0.5) | (pix_next[:, 0] > w - 0.5)
               | (pix_next[:, 1] < -0.5) | (pix_next[:, 1] > h - 0.5))
        flow[occlusion | off.reshape(h, w)] = np.nan

    return GroundTruth(
        spec=spec,
        labels=labels.reshape(h, w),
        depth_ref=depth_ref,
        depth_next=depth_next.reshape(h, w),
        labels_next=labels_next.reshape(h, w),
        flow=FlowField(flow),
        flow_exact=flow_exact,
        occlusion=occlusion,
        image_ref=image_ref.reshape(h, w, 3),
        image_next=image_next.reshape(h, w, 3),
    )


def perturb(flow: FlowField, sigma_px: float, seed: int = 0) -> FlowField:
    """Add iid Gaussian noise (std sigma_px per component) to valid flow."""
    if sigma_px < 0:
        raise ValueError("sigma_px must be non-negative")
    rng = np.random.default_rng(seed)
    noisy = flow.uv.astype(np.float64)
    noise = rng.normal(scale=sigma_px, size=noisy.shape) if sigma_px > 0 else 0
    return FlowField((noisy + noise).astype(np.float32))


def subdivide_labels(labels: np.ndarray, n_target: int) -> np.ndarray:
    """Split a label map into about n_target grid-aligned superpixels.

    Each output segment is the 4-connected intersection of one input
    label with one square grid cell, so segments never straddle an
    input boundary: this is how oracle scenes get realistic segment
    counts while keeping every segment on a single plane.  Ids come out
    contiguous from 0 in scan order of first occurrence.
    """
    from scipy import ndimage

    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2D")
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    h, w = labels.shape
    cell = max(1, int(round(np.sqrt(h * w / n_target))))
    vv, uu = np.mgrid[0:h, 0:w]
    n_cells_x = w // cell + 1
    cells = (vv // cell) * n_cells_x + uu // cell
    combo = cells.astype(np.int64) * (int(labels.max()) + 1) + labels

    out = np.full((h, w), -1, dtype=np.int32)
    next_id = 0
    order = np.argsort(combo.ravel(), kind="stable")
    seen_first = np.full(combo.max() + 1, -1, dtype=np.int64)
    flat = combo.ravel()
    for pos in order:
        if seen_first[flat[pos]] < 0:
            seen_first[flat[pos]] = pos
    for val in sorted(np.unique(flat), key=lambda v: seen_first[v]):
        comp, n_comp = ndimage.label(combo == val)
        for c in range(1, n_comp + 1):
            out[comp == c] = next_id
            next_id += 1
    return out
