"""Camera model, rigid motions, planes, and plane-induced homographies.

Conventions used throughout the package:

* Camera frame: right handed, Z forward, X right, Y down.  Pixel
  coordinates are (u, v) = (column, row) and may be fractional.
* A plane is the set ``{X : n.X + d = 0}`` with unit normal ``n`` and
  ``d > 0``; a visible fronto-parallel plane at depth ``z`` has
  ``n = (0, 0, -1)`` and ``d = z``.
* A rigid motion maps reference-frame points to next-frame points,
  ``X' = R X + scale * t_dir`` with ``t_dir`` a unit vector (or zero
  for a translation-free motion).
* The pixel homography induced by (R, t, plane) is
  ``K (R - t n^T / d) K^{-1}``.  Homographies are compared after gauge
  normalization: Frobenius norm sqrt(3) and sign fixed by the dominant
  trace, so that the identity is a fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CheiralityError, DegenerateGeometryError

# Relative singular-value spread below which a calibrated homography is
# treated as a pure rotation.
PURE_ROTATION_SPREAD = 1e-6

_ORTHO_TOL = 1e-9


def _as_matrix(a, shape, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(w) @ v == cross(w, v)."""
    w = _as_matrix(w, (3,), "w")
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def rotation_from_axis_angle(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula; the vector's norm is the rotation angle."""
    w = _as_matrix(axis_angle, (3,), "axis_angle")
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotation_geodesic(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle in radians between two rotations."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def reorthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def check_rotation(r: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    r = _as_matrix(r, (3, 3), "rotation")
    if np.linalg.norm(r.T @ r - np.eye(3)) > tol or np.linalg.det(r) < 0:
        raise ValueError("not a rotation: R^T R != I or det < 0")
    return r


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics (square pixels not assumed, no skew)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def inverse(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]),
                   cx=float(d["cx"]), cy=float(d["cy"]))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane n.X + d = 0 with unit normal and positive d.

    The normal is renormalized on construction; a visible plane has
    n . ray < 0 for every ray that meets it in front of the camera.
    """

    normal: np.ndarray
    depth: float

    def __post_init__(self):
        n = _as_matrix(self.normal, (3,), "normal")
        norm = float(np.linalg.norm(n))
        if norm < 1e-12:
            raise ValueError("plane normal must be nonzero")
        n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "depth", float(self.depth))
        if not self.depth > 0:
            raise ValueError("plane depth d must be positive")

    def scaled(self, c: float) -> "Plane":
        """Same orientation, plane moved to c times the distance."""
        return Plane(self.normal, c * self.depth)


@dataclass(frozen=True, eq=False)
class RigidMotion:
    """X' = rotation @ X + scale * t_dir, with unit (or zero) t_dir."""

    rotation: np.ndarray
    t_dir: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = check_rotation(self.rotation)
        r = r.copy()
        r.setflags(write=False)
        t = _as_matrix(self.t_dir, (3,), "t_dir").copy()
        norm = float(np.linalg.norm(t))
        if norm > 1e-12:
            t = t / norm
        else:
            t = np.zeros(3)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "t_dir", t)
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError("motion scale must be positive")

    @property
    def translation(self) -> np.ndarray:
        return self.scale * self.t_dir

    @property
    def translation_free(self) -> bool:
        return bool(np.all(self.t_dir == 0.0))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidMotion":
        """Build from an unnormalized translation vector."""
        t = _as_matrix(translation, (3,), "translation")
        norm = float(np.linalg.norm(t))
        if norm < 1e-12:
            return cls(rotation, np.zeros(3), 1.0)
        return cls(rotation, t / norm, norm)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def apply_motion(motion: RigidMotion, x: np.ndarray) -> np.ndarray:
    """Move points (..., 3) by a rigid motion."""
    return motion.apply(x)


def motion_frobenius_distance(ma: RigidMotion, mb: RigidMotion) -> float:
    """Frobenius distance between the two motions' 3x4 parameter blocks.

    The homogeneous bottom rows agree, so this equals the Frobenius norm
    of the 4x4 matrix difference.
    """
    dr = ma.rotation - mb.rotation
    dt = ma.translation - mb.translation
    return float(np.sqrt(np.sum(dr * dr) + np.sum(dt * dt)))


def project(intr: Intrinsics, points: np.ndarray) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2).

    Raises CheiralityError when any point has non-positive depth.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError("points must have trailing dimension 3")
    z = pts[..., 2]
    if np.any(z <= 0):
        raise CheiralityError("projection of a point with non-positive depth")
    u = intr.fx * pts[..., 0] / z + intr.cx
    v = intr.fy * pts[..., 1] / z + intr.cy
    out = np.stack([u, v], axis=-1)
    return out[0] if single else out


def pixel_rays(intr: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit-depth rays K^{-1} (u, v, 1) for pixels (..., 2)."""
    px = np.asarray(pixels, dtype=float)
    x = (px[..., 0] - intr.cx) / intr.fx
    y = (px[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(intr: Intrinsics, pixels: np.ndarray, plane: Plane) -> np.ndarray:
    """Intersect pixel rays with a plane; returns camera-frame points.

    Raises DegenerateGeometryError for rays parallel to the plane and
    CheiralityError when the intersection lies behind the camera.
    """
    px = np.asarray(pixels, dtype=float)
    single = px.ndim == 1
    rays = np.atleast_2d(pixel_rays(intr, px))
    denom = rays @ plane.normal
    if np.any(np.abs(denom) < 1e-12):
        raise DegenerateGeometryError("ray parallel to plane")
    s = -plane.depth / denom
    if np.any(s <= 0):
        raise CheiralityError("plane intersection behind the camera")
    out = s[:, None] * rays
    return out[0] if single else out


def gauge_normalize(h: np.ndarray) -> np.ndarray:
    """Scale a homography to Frobenius norm sqrt(3) with a fixed sign.

    The sign makes the trace positive; when the trace is numerically
    zero the largest-magnitude entry decides.  The identity maps to
    itself and h, -h, and c*h all map to the same matrix.
    """
    h = _as_matrix(h, (3, 3), "homography")
    nf = float(np.linalg.norm(h))
    if nf < 1e-12:
        raise DegenerateGeometryError("zero homography")
    out = h * (np.sqrt(3.0) / nf)
    tr = float(np.trace(out))
    if abs(tr) > 1e-9:
        sign = np.sign(tr)
    else:
        flat = out.ravel()
        sign = np.sign(flat[int(np.argmax(np.abs(flat)))])
    return sign * out


def homography_from_motion_plane(intr: Intrinsics, motion: RigidMotion,
                                 plane: Plane) -> np.ndarray:
    """Gauge-normalized pixel homography K (R - t n^T / d) K^{-1}."""
    e = motion.rotation - np.outer(motion.translation, plane.normal) / plane.depth
    return gauge_normalize(intr.matrix @ e @ intr.inverse)


def apply_homography(h: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Apply a pixel homography to points (..., 2), dehomogenizing."""
    px = np.asarray(pixels, dtype=float)
    ones = np.ones(px.shape[:-1] + (1,))
    hom = np.concatenate([px, ones], axis=-1) @ h.T
    w = hom[..., 2]
    if np.any(np.abs(w) < 1e-15):
        raise DegenerateGeometryError("homography sends a point to infinity")
    return hom[..., :2] / w[..., None]


@dataclass(frozen=True, eq=False)
class MotionPlaneHypothesis:
    """One (R, t_dir, n, |t|/d) explanation of a homography.

    ``dist_ratio`` is |t|/d, the only scale-free combination observable
    from two views of one plane.  A pure-rotation hypothesis carries
    t_dir = 0, normal = None, dist_ratio = 0.
    """

    rotation: np.ndarray
    t_dir: np.ndarray
    normal: Optional[np.ndarray]
    dist_ratio: float

    @property
    def pure_rotation(self) -> bool:
        return self.normal is None

    def recompose(self, intr: Intrinsics) -> np.ndarray:
        """Gauge-normalized homography with the d = 1 convention."""
        if self.pure_rotation:
            e = self.rotation
        else:
            t = self.dist_ratio * self.t_dir
            e = self.rotation - np.outer(t, self.normal)
        return gauge_normalize(intr.matrix @ e @ intr.inverse)


def _cheirality_ok(hyp: MotionPlaneHypothesis, intr: Intrinsics,
                   pixels: np.ndarray) -> bool:
    """Positive depth in both frames for every given reference pixel."""
    if hyp.pure_rotation:
        return True
    rays = np.atleast_2d(pixel_rays(intr, np.asarray(pixels, dtype=float)))
    denom = rays @ hyp.normal
    # Plane in front of the camera along every ray (with d = 1).
    if np.any(denom >= -1e-12):
        return False
    x = (-1.0 / denom)[:, None] * rays
    x2 = x @ hyp.rotation.T + hyp.dist_ratio * hyp.t_dir
    return bool(np.all(x2[:, 2] > 1e-12))


def decompose_homography(h: np.ndarray, intr: Intrinsics,
                         cheirality_pixels: Optional[np.ndarray] = None
                         ) -> list[MotionPlaneHypothesis]:
    """Factor a pixel homography into (R, t_dir, n, |t|/d) hypotheses.

    Singular-value based decomposition of the calibrated matrix
    K^{-1} H K.  Both projective signs are expanded, so up to eight raw
    hypotheses are formed; duplicates are merged and, when
    ``cheirality_pixels`` is given, hypotheses that place any of those
    reference pixels at non-positive depth in either frame are dropped
    (at most four survive sign disambiguation, at most two cheirality).

    Every returned hypothesis recomposes to the input homography after
    gauge normalization.
    """
    h = _as_matrix(h, (3, 3), "homography")
    if abs(np.linalg.det(h)) < 1e-15:
        raise DegenerateGeometryError("singular homography")
    e = intr.inverse @ h @ intr.matrix

    sv = np.linalg.svd(e, compute_uv=False)
    if (sv[0] - sv[2]) / sv[1] < PURE_ROTATION_SPREAD:
        r = e / sv[1]
        if np.linalg.det(r) < 0:
            r = -r
        r = reorthonormalize(r)
        return [MotionPlaneHypothesis(rotation=r, t_dir=np.zeros(3),
                                      normal=None, dist_ratio=0.0)]

    out: list[MotionPlaneHypothesis] = []
    for sign in (1.0, -1.0):
        eb = sign * e / sv[1]
        u_svd, s, vt = np.linalg.svd(eb)
        # Work with a right-handed singular basis; eb is invariant to
        # flipping the signs of matched (u, v) column pairs.
        v = vt.T
        if np.linalg.det(v) < 0:
            v = -v
        s1, s3 = s[0], s[2]
        a = np.sqrt(max(1.0 - s3 * s3, 0.0))
        b = np.sqrt(max(s1 * s1 - 1.0, 0.0))
        den = np.sqrt(max(s1 * s1 - s3 * s3, 1e-300))
        v1, v2, v3 = v[:, 0], v[:, 1], v[:, 2]
        for u_vec in ((a * v1 + b * v3) / den, (a * v1 - b * v3) / den):
            n_away = np.cross(v2, u_vec)
            u_mat = np.column_stack([v2, u_vec, n_away])
            w_mat = np.column_stack([
                eb @ v2, eb @ u_vec, np.cross(eb @ v2, eb @ u_vec)])
            r = w_mat @ u_mat.T
            if abs(np.linalg.det(r) - 1.0) > 0.5:
                continue  # reflection branch, not a rigid interpretation
            r = reorthonormalize(r)
            t_over_d = (eb - r) @ n_away
            for flip in (1.0, -1.0):
                n_ours = -flip * n_away
                t_vec = flip * t_over_d
                ratio = float(np.linalg.norm(t_vec))
                t_dir = t_vec / ratio if ratio > 1e-12 else np.zeros(3)
                hyp = MotionPlaneHypothesis(rotation=r, t_dir=t_dir,
                                            normal=n_ours, dist_ratio=ratio)
                # Guard against numerically inconsistent branches.
                resid = np.linalg.norm(
                    (r - ratio * np.outer(t_dir, n_ours)) - eb)
                if resid > 1e-6 * max(1.0, np.linalg.norm(eb)):
                    continue
                out.append(hyp)

    deduped: list[MotionPlaneHypothesis] = []
    for hyp in out:
        dup = False
        for kept in deduped:
            if kept.pure_rotation != hyp.pure_rotation:
                continue
            same_rot = rotation_geodesic(kept.rotation, hyp.rotation) < 1e-9
            same_n = (np.linalg.norm(kept.normal - hyp.normal) < 1e-9
                      if not hyp.pure_rotation else True)
            same_t = np.linalg.norm(
                kept.dist_ratio * kept.t_dir - hyp.dist_ratio * hyp.t_dir) < 1e-9
            if same_rot and same_n and same_t:
                dup = True
                break
        if not dup:
            deduped.append(hyp)

    if cheirality_pixels is not None:
        deduped = [hyp for hyp in deduped
                   if _cheirality_ok(hyp, intr, cheirality_pixels)]
        if not deduped:
            raise CheiralityError(
                "no homography decomposition passes the cheirality check")
    return deduped
