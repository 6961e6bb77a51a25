"""Per-superpixel rigid reconstruction from flow correspondences.

Each superpixel is treated as a small rigidly moving plane.  A
homography is fitted to its correspondences (normalized DLT, an
optional RANSAC wrapper for large pixel counts, then a few Gauss-Newton
steps on the symmetric transfer error), decomposed into motion and
plane candidates, and disambiguated by requiring positive depth at
every boundary pixel in both frames.  The surviving interpretation is
stored at the patch's own unit gauge: d_i is chosen so the translation
has unit norm, which is the scale the global solver later multiplies.

Patches whose fit or disambiguation fails are kept as flagged
placeholders rather than dropped, so downstream graph indexing stays
dense; their geometry is later borrowed from neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    CheiralityError,
    DegenerateGeometryError,
    DegeneratePatchError,
)
from .geometry import (
    Intrinsics,
    Plane,
    RigidMotion,
    apply_homography,
    backproject,
    decompose_homography,
    gauge_normalize,
)
from .scene_graph import Superpixel

RANSAC_THRESHOLD_PX = 1.5
RANSAC_ITERS = 200
RANSAC_MIN_PAIRS = 21  # robust path only when strictly more than 20 pairs
GN_STEPS = 5
DLT_CONDITION_LIMIT = 1e10


@dataclass
class PlanarPatch:
    """One superpixel's plane and motion at its own unit scale.

    motion.scale holds the patch scale; it is 1 after reconstruction
    and owned by the global solver afterwards.  reliable=False marks
    patches whose geometry could not be recovered (the plane and motion
    are placeholders), normal_determined=False marks pure-rotation or
    placeholder patches whose plane orientation carries no evidence.
    """

    sp_id: int
    plane: Plane
    motion: RigidMotion
    anchor3d: np.ndarray
    boundary3d: np.ndarray
    residual: float
    reliable: bool = True
    normal_determined: bool = True

    @property
    def static(self) -> bool:
        return self.motion.translation_free


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift to centroid and scale mean radius to sqrt(2)."""
    centroid = pts.mean(axis=0)
    radius = np.linalg.norm(pts - centroid, axis=1).mean()
    if radius < 1e-12:
        raise DegeneratePatchError("correspondences coincide at one point")
    s = np.sqrt(2.0) / radius
    t = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform on pre-normalized pairs."""
    n = len(src)
    a = np.zeros((2 * n, 9))
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1.0
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1.0
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[-2] <= 0 or s[0] / s[-2] > DLT_CONDITION_LIMIT:
        raise DegeneratePatchError(
            "degenerate correspondence configuration for homography fit")
    return vt[-1].reshape(3, 3)


def _fit_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ns, t1 = _hartley_normalize(src)
    nd, t2 = _hartley_normalize(dst)
    hn = _dlt(ns, nd)
    h = np.linalg.inv(t2) @ hn @ t1
    return h / np.linalg.norm(h)


def _symmetric_residuals(h: np.ndarray, src: np.ndarray, dst: np.ndarray
                         ) -> np.ndarray:
    """Per-pair mean of forward and backward transfer error in px."""
    fwd = np.linalg.norm(apply_homography(h, src) - dst, axis=1)
    bwd = np.linalg.norm(apply_homography(np.linalg.inv(h), dst) - src,
                         axis=1)
    return 0.5 * (fwd + bwd)


def _transfer_jacobian(h: np.ndarray, pts: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Projected points and d(projection)/dh for the 9 entries of h."""
    n = len(pts)
    xt = np.column_stack([pts, np.ones(n)])  # (n, 3)
    q = xt @ h.T
    w = q[:, 2]
    proj = q[:, :2] / w[:, None]
    jac = np.zeros((n, 2, 9))
    jac[:, 0, 0:3] = xt / w[:, None]
    jac[:, 1, 3:6] = xt / w[:, None]
    jac[:, 0, 6:9] = -proj[:, 0, None] * xt / w[:, None]
    jac[:, 1, 6:9] = -proj[:, 1, None] * xt / w[:, None]
    return proj, jac


def _inverse_jacobian(h: np.ndarray, pts: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Projection through H^{-1} and its Jacobian wrt the entries of H."""
    n = len(pts)
    hinv = np.linalg.inv(h)
    xt = np.column_stack([pts, np.ones(n)])
    q = xt @ hinv.T  # (n, 3) = H^{-1} x'
    w = q[:, 2]
    proj = q[:, :2] / w[:, None]
    # d(H^{-1})/dh_k = -H^{-1} E_k H^{-1}; applied to x' this picks the
    # col(k) component of q and routes it through column row(k) of H^{-1}.
    dq = np.zeros((n, 3, 9))
    for k in range(9):
        r, c = divmod(k, 3)
        dq[:, :, k] = -np.outer(q[:, c], hinv[:, r])
    jac = np.zeros((n, 2, 9))
    jac[:, 0] = (dq[:, 0, :] - proj[:, 0, None] * dq[:, 2, :]) / w[:, None]
    jac[:, 1] = (dq[:, 1, :] - proj[:, 1, None] * dq[:, 2, :]) / w[:, None]
    return proj, jac


def _refine_gn(h: np.ndarray, src: np.ndarray, dst: np.ndarray,
               steps: int = GN_STEPS) -> np.ndarray:
    """Gauss-Newton on the symmetric transfer error, fixed step count."""
    best = h / np.linalg.norm(h)
    best_cost = float(np.square(_symmetric_residuals(best, src, dst)).sum())
    cur = best
    for _ in range(steps):
        pf, jf = _transfer_jacobian(cur, src)
        pb, jb = _inverse_jacobian(cur, dst)
        r = np.concatenate([(pf - dst).ravel(), (pb - src).ravel()])
        jmat = np.concatenate([jf.reshape(-1, 9), jb.reshape(-1, 9)])
        jtj = jmat.T @ jmat + 1e-12 * np.eye(9)
        try:
            delta = np.linalg.solve(jtj, -jmat.T @ r)
        except np.linalg.LinAlgError:
            break
        cand = (cur.ravel() + delta).reshape(3, 3)
        norm = np.linalg.norm(cand)
        if norm < 1e-12 or abs(np.linalg.det(cand)) < 1e-300:
            break
        cand = cand / norm
        cost = float(np.square(_symmetric_residuals(cand, src, dst)).sum())
        if cost < best_cost:
            best, best_cost = cand, cost
        cur = cand
    return best


def _fit_with_inliers(src: np.ndarray, dst: np.ndarray, seed: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Fit a homography, robustly for large sets; returns (H, inlier mask)."""
    n = len(src)
    if n < 4:
        raise DegeneratePatchError(f"need at least 4 correspondences, got {n}")
    if n < RANSAC_MIN_PAIRS:
        h = _refine_gn(_fit_dlt(src, dst), src, dst)
        return gauge_normalize(h), np.ones(n, dtype=bool)

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = -1
    for _ in range(RANSAC_ITERS):
        pick = rng.choice(n, size=4, replace=False)
        try:
            h = _fit_dlt(src[pick], dst[pick])
        except DegeneratePatchError:
            continue
        if abs(np.linalg.det(h)) < 1e-12:
            continue
        mask = _symmetric_residuals(h, src, dst) < RANSAC_THRESHOLD_PX
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < 4:
        raise DegeneratePatchError("no consensus set found by robust fit")
    h = _refine_gn(_fit_dlt(src[best_mask], dst[best_mask]),
                   src[best_mask], dst[best_mask])
    # the fixed threshold trims the tail of honest measurement noise;
    # re-admit points the provisional fit explains before the final fit
    res = _symmetric_residuals(h, src, dst)
    widened = res < max(RANSAC_THRESHOLD_PX, 3.0 * float(np.median(res)))
    if widened.sum() > best_mask.sum():
        h = _refine_gn(_fit_dlt(src[widened], dst[widened]),
                       src[widened], dst[widened])
        best_mask = widened
    return gauge_normalize(h), best_mask


def fit_homography(src: np.ndarray, dst: np.ndarray, seed: int = 0
                   ) -> np.ndarray:
    """Least-squares homography mapping src pixels to dst pixels.

    Uses normalized DLT plus Gauss-Newton refinement of the symmetric
    transfer error; with more than 20 pairs a seeded RANSAC loop
    (1.5 px threshold) picks the consensus set first.  Raises
    DegeneratePatchError when the configuration cannot determine a
    homography.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("src and dst must both be (n, 2) pixel arrays")
    h, _ = _fit_with_inliers(src, dst, seed)
    return h


def placeholder_patch(sp: Superpixel, intr: Intrinsics) -> PlanarPatch:
    """Static fronto-parallel stand-in for a patch we could not recover."""
    plane = Plane(np.array([0.0, 0.0, -1.0]), 1.0)
    motion = RigidMotion(np.eye(3), np.zeros(3), 1.0)
    anchor3d = backproject(intr, sp.anchor_pixel[None, :], plane)[0]
    boundary3d = backproject(intr, sp.boundary_pixels.astype(float), plane)
    return PlanarPatch(sp_id=sp.id, plane=plane, motion=motion,
                       anchor3d=anchor3d, boundary3d=boundary3d,
                       residual=float("nan"), reliable=False,
                       normal_determined=False)


def _materialize(sp: Superpixel, chosen, intr: Intrinsics,
                 residual: float) -> PlanarPatch | None:
    """One decomposition hypothesis as a unit-gauge patch, or None when
    its plane cannot support the superpixel in both frames."""
    if chosen.pure_rotation:
        plane = Plane(np.array([0.0, 0.0, -1.0]), 1.0)
        motion = RigidMotion(chosen.rotation, np.zeros(3), 1.0)
        anchor3d = backproject(intr, sp.anchor_pixel[None, :], plane)[0]
        boundary3d = backproject(intr, sp.boundary_pixels.astype(float),
                                 plane)
        return PlanarPatch(sp_id=sp.id, plane=plane, motion=motion,
                           anchor3d=anchor3d, boundary3d=boundary3d,
                           residual=residual, reliable=True,
                           normal_determined=False)

    # Unit translation gauge: the decomposition fixes ‖t‖/d, so picking
    # d = d / ‖t‖ rescales the patch until ‖t‖ = 1.
    d_unit = 1.0 / chosen.dist_ratio
    plane = Plane(chosen.normal, d_unit)
    motion = RigidMotion(chosen.rotation, chosen.t_dir, 1.0)
    try:
        anchor3d = backproject(intr, sp.anchor_pixel[None, :], plane)[0]
        boundary3d = backproject(intr, sp.boundary_pixels.astype(float),
                                 plane)
    except (CheiralityError, DegenerateGeometryError):
        return None
    moved = np.vstack([anchor3d, boundary3d]) @ motion.rotation.T \
        + motion.translation
    if np.any(moved[:, 2] <= 0):
        return None
    return PlanarPatch(sp_id=sp.id, plane=plane, motion=motion,
                       anchor3d=anchor3d, boundary3d=boundary3d,
                       residual=residual)


def _scored_hypotheses(sp: Superpixel, src: np.ndarray, dst: np.ndarray,
                       intr: Intrinsics, seed: int):
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    h, inliers = _fit_with_inliers(src, dst, seed)
    cheir_pixels = np.vstack([sp.boundary_pixels.astype(float),
                              sp.anchor_pixel[None, :]])
    try:
        cands = decompose_homography(h, intr, cheirality_pixels=cheir_pixels)
    except (CheiralityError, DegenerateGeometryError):
        return [], float("nan")
    residual = float(_symmetric_residuals(h, src[inliers],
                                          dst[inliers]).mean())
    scored = sorted(
        (round(float(_symmetric_residuals(c.recompose(intr), src[inliers],
                                          dst[inliers]).mean()), 9), i)
        for i, c in enumerate(cands))
    return [cands[i] for _, i in scored], residual


def reconstruct_patch(sp: Superpixel, src: np.ndarray, dst: np.ndarray,
                      intr: Intrinsics, seed: int = 0) -> PlanarPatch:
    """Recover one superpixel's plane and motion at unit gauge.

    Candidate interpretations of the fitted homography are filtered by
    positive depth at every boundary pixel in both frames; among the
    survivors the lowest-residual (then lowest-index) one wins.  The
    returned patch has ``motion.scale == 1`` and ``d_i`` chosen so the
    translation is unit length; pure-rotation patches get d_i = 1, a
    zero translation flag, and an undetermined normal.  If no candidate
    survives, a flagged placeholder is returned instead.
    """
    hyps, residual = _scored_hypotheses(sp, src, dst, intr, seed)
    if not hyps:
        return placeholder_patch(sp, intr)
    patch = _materialize(sp, hyps[0], intr, residual)
    return patch if patch is not None else placeholder_patch(sp, intr)


def reconstruct_patch_candidates(sp: Superpixel, src: np.ndarray,
                                 dst: np.ndarray, intr: Intrinsics,
                                 seed: int = 0) -> list[PlanarPatch]:
    """Every surviving interpretation of the fitted homography, in
    reconstruct_patch's preference order.

    A homography measured over one small window generally admits two
    plane-plus-motion interpretations that transfer the window
    identically, so the residual ordering cannot tell them apart; pass
    the per-superpixel lists to select_branches, which can.  May be
    empty when nothing survives cheirality.
    """
    hyps, residual = _scored_hypotheses(sp, src, dst, intr, seed)
    out = []
    for hyp in hyps:
        patch = _materialize(sp, hyp, intr, residual)
        if patch is not None:
            out.append(patch)
    return out


def _facing(patch: PlanarPatch) -> float:
    """How squarely the patch's plane faces its own viewing ray, in
    (0, 1]; visibility keeps the product negative."""
    ray = patch.anchor3d / np.linalg.norm(patch.anchor3d)
    return -float(patch.plane.normal @ ray)


def select_branches(candidates: list[list[PlanarPatch]],
                    tau: float = 0.3) -> list[PlanarPatch]:
    """Pick one decomposition branch per superpixel by motion consensus.

    Patches lying on the same plane produce identical branch pairs, so
    they cannot disambiguate each other; patches on different planes
    moving with one rigid motion agree only on the true branch.  The
    vote repeatedly finds the candidate motion supported (within tau in
    joint rotation-translation Frobenius distance) by the most patches
    and pins every supporter to its agreeing branch.  Groups spanning a
    single plane get no consensus signal at all, so ties fall back to
    the branch whose plane faces the camera more squarely, which is a
    prior rather than evidence.  Static and unreliable entries carry no
    translation direction and keep their first branch.
    """
    n = len(candidates)
    for i, cands in enumerate(candidates):
        if not cands:
            raise ValueError(f"superpixel {i}: empty candidate list")
    choice = np.zeros(n, dtype=int)

    entries = [(i, b) for i in range(n)
               for b, p in enumerate(candidates[i])
               if p.reliable and not p.static]
    if not entries:
        return [candidates[i][0] for i in range(n)]
    m = len(entries)
    vecs = np.array([np.concatenate([
        candidates[i][b].motion.rotation.ravel(),
        candidates[i][b].motion.translation]) for i, b in entries])
    facing = np.array([_facing(candidates[i][b]) for i, b in entries])
    branch_rows: dict[int, dict[int, int]] = {}
    for row, (i, b) in enumerate(entries):
        branch_rows.setdefault(i, {})[b] = row

    def dist_block(js: np.ndarray) -> np.ndarray:
        gap = vecs[js, None, :] - vecs[None, :, :]
        return np.linalg.norm(gap, axis=2)

    undecided = {i for i in range(n)
                 if len(branch_rows.get(i, {})) > 1}
    while undecided:
        und = sorted(undecided)
        k_max = max(len(branch_rows[i]) for i in und)
        # row index per (patch, branch slot), padded slots repeat slot 0
        # with +inf distance so they never win the per-patch min
        und_rows = np.zeros((len(und), k_max), dtype=int)
        und_pad = np.zeros((len(und), k_max), dtype=bool)
        und_branch = np.zeros((len(und), k_max), dtype=int)
        for a, i in enumerate(und):
            items = sorted(branch_rows[i].items())
            for s in range(k_max):
                b, row = items[min(s, len(items) - 1)]
                und_rows[a, s], und_branch[a, s] = row, b
                und_pad[a, s] = s >= len(items)
        dec_rows = np.array(sorted(
            rows.get(choice[i], next(iter(rows.values())))
            for i, rows in branch_rows.items() if i not in undecided),
            dtype=int)

        best = None
        for start in range(0, m, 256):
            js = np.arange(start, min(start + 256, m))
            d = dist_block(js)
            du = d[:, und_rows.ravel()].reshape(len(js), len(und), k_max)
            du[:, und_pad] = np.inf
            slot = np.argmin(du, axis=2)
            dmin = np.take_along_axis(du, slot[:, :, None], axis=2)[:, :, 0]
            sup = dmin < tau
            n_und = sup.sum(axis=1)
            rows_at = np.take_along_axis(und_rows[None, :, :].repeat(
                len(js), axis=0), slot[:, :, None], axis=2)[:, :, 0]
            penalty = ((1.0 - facing[rows_at]) * sup).sum(axis=1)
            n_dec = (d[:, dec_rows] < tau).sum(axis=1) if len(dec_rows) \
                else np.zeros(len(js), dtype=int)
            for a, j in enumerate(js):
                if n_und[a] == 0:
                    continue
                key = (-(int(n_und[a]) + int(n_dec[a])),
                       float(penalty[a]), int(j))
                if best is None or key < best[0]:
                    best = (key, sup[a].copy(), slot[a].copy())
        if best is None:
            break
        _, sup_mask, slots = best
        for a, i in enumerate(und):
            if sup_mask[a]:
                choice[i] = und_branch[a, slots[a]]
                undecided.discard(i)
    return [candidates[i][choice[i]] for i in range(n)]


def _median_plane(planes: list[Plane]) -> Plane | None:
    normals = np.array([p.normal for p in planes])
    depths = np.array([p.depth for p in planes])
    n = np.median(normals, axis=0)
    norm = np.linalg.norm(n)
    d = float(np.median(depths))
    if norm < 1e-9 or d <= 0:
        return None
    return Plane(n / norm, d)


def borrow_planes(patches: list[PlanarPatch],
                  neighbors: dict[int, list[int]],
                  intr: Intrinsics, sps: list[Superpixel]
                  ) -> list[PlanarPatch]:
    """Give unreliable patches the median plane of reliable neighbors.

    Patches with no reliable neighbor keep their placeholder plane.
    Motion stays static for borrowed patches; only the support geometry
    (plane, anchor, boundary points) is replaced so graph construction
    has sensible 3D positions to work with.
    """
    out = list(patches)
    by_id = {p.sp_id: p for p in patches}
    for i, patch in enumerate(patches):
        if patch.reliable:
            continue
        donor_planes = [by_id[k].plane for k in neighbors.get(patch.sp_id, [])
                        if by_id[k].reliable]
        if not donor_planes:
            continue
        med = _median_plane(donor_planes)
        if med is None:
            continue
        sp = sps[i]
        try:
            anchor3d = backproject(intr, sp.anchor_pixel[None, :], med)[0]
            boundary3d = backproject(intr, sp.boundary_pixels.astype(float),
                                     med)
        except (CheiralityError, DegenerateGeometryError):
            continue
        out[i] = replace(patch, plane=med, anchor3d=anchor3d,
                         boundary3d=boundary3d)
    return out


def unit_scale_anchors(patches: list[PlanarPatch]) -> np.ndarray:
    """Anchor positions at each patch's unit gauge, input to the k-NN graph."""
    return np.array([p.anchor3d for p in patches])
