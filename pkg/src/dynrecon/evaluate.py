"""Depth scoring against ground truth and reconstruction exports.

A reconstruction is defined up to one global scale, so scoring first
aligns the estimated depth map to the ground truth with a single
factor and then applies the mean-relative-error formula over the
valid pixels.  The export side renders the piecewise-planar state
into a dense depth map, a PFM file, and a binary point cloud.
"""

from dataclasses import dataclass

import numpy as np

from .energy import SceneState
from .errors import FormatError, InputError
from .geometry import pixel_rays

PFM_MAGIC = b"Pf"
PLY_PROPS = ["x", "y", "z", "red", "green", "blue"]
_VERTEX_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
     ("red", "u1"), ("green", "u1"), ("blue", "u1")])


@dataclass(frozen=True)
class MreReport:
    """Mean relative depth error after global-scale alignment."""

    mre: float
    pixel_count: int
    excluded: int
    global_scale: float
    per_sp: np.ndarray  # (n,) per-superpixel mre, NaN where unscored

    def to_dict(self) -> dict:
        per_sp = [None if np.isnan(v) else float(v) for v in self.per_sp]
        return {"mre": self.mre, "P": self.pixel_count,
                "excluded": self.excluded,
                "global_scale": self.global_scale, "per_sp": per_sp}


def _valid_mask(z_est: np.ndarray, z_gt: np.ndarray,
                mask: np.ndarray) -> np.ndarray:
    if z_est.shape != z_gt.shape or mask.shape != z_gt.shape:
        raise InputError("depth maps and mask must share one shape")
    return (np.asarray(mask, dtype=bool)
            & np.isfinite(z_est) & np.isfinite(z_gt)
            & (z_est > 0) & (z_gt > 0))


def align_scale(z_est: np.ndarray, z_gt: np.ndarray, mask: np.ndarray,
                method: str = "median") -> float:
    """Global factor s such that s*z_est matches z_gt.

    The median of the per-pixel ratios shrugs off grossly wrong
    patches; "lsq" minimizes ||s*z_est - z_gt||^2 instead and is kept
    for comparability.
    """
    valid = _valid_mask(z_est, z_gt, mask)
    if not valid.any():
        raise InputError("no valid pixels to align on")
    est, gt = z_est[valid], z_gt[valid]
    if method == "median":
        return float(np.median(gt / est))
    if method == "lsq":
        return float((gt @ est) / (est @ est))
    raise InputError(f"unknown alignment method {method!r}")


def mre(z_est: np.ndarray, z_gt: np.ndarray, mask: np.ndarray,
        labels: np.ndarray | None = None,
        global_scale: float = 1.0) -> MreReport:
    """(1/P) sum |z_gt - z_est| / z_gt over valid pixels, pre-aligned."""
    valid = _valid_mask(z_est, z_gt, mask)
    count = int(valid.sum())
    if count == 0:
        raise InputError("no valid pixels to score")
    excluded = int(np.asarray(mask, dtype=bool).sum()) - count
    rel = np.abs(z_gt[valid] - z_est[valid]) / z_gt[valid]
    if labels is None:
        per_sp = np.zeros(0)
    else:
        if labels.shape != z_gt.shape:
            raise InputError("label map must match the depth shape")
        lab = labels[valid]
        n = int(labels.max()) + 1
        sums = np.bincount(lab, weights=rel, minlength=n)
        counts = np.bincount(lab, minlength=n)
        with np.errstate(invalid="ignore"):
            per_sp = np.where(counts > 0, sums / np.maximum(counts, 1),
                              np.nan)
    return MreReport(mre=float(rel.mean()), pixel_count=count,
                     excluded=excluded, global_scale=global_scale,
                     per_sp=per_sp)


def score_depth(z_est: np.ndarray, z_gt: np.ndarray, mask: np.ndarray,
                labels: np.ndarray | None = None,
                method: str = "median") -> MreReport:
    """Align then score; the one call sites should usually make."""
    s = align_scale(z_est, z_gt, mask, method)
    return mre(s * z_est, z_gt, mask, labels, global_scale=s)


def normal_angles_deg(n_est: np.ndarray, n_gt: np.ndarray) -> np.ndarray:
    """Angle in degrees between unit normals, orientation-agnostic."""
    cos = np.abs(np.sum(np.atleast_2d(n_est) * np.atleast_2d(n_gt),
                        axis=-1))
    return np.rad2deg(np.arccos(np.clip(cos, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Rendering the state


def depth_map(state: SceneState) -> np.ndarray:
    """Per-pixel depth of each superpixel's scaled plane, NaN if unusable."""
    graph = state.graph
    out = np.full((graph.height, graph.width), np.nan)
    for i, patch in enumerate(state.patches):
        px = graph.superpixels[i].pixels
        rays = pixel_rays(state.intr, px.astype(float))
        den = rays @ patch.plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            z = -float(state.lam[i]) * patch.plane.depth / den
        z = np.where((np.abs(den) < 1e-12) | (z <= 0), np.nan, z)
        out[px[:, 1], px[:, 0]] = z
    return out


# ---------------------------------------------------------------------------
# PFM, grayscale float32, bottom-up rows, negative scale = little-endian


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise InputError("PFM export expects a 2-d depth map")
    with open(path, "wb") as f:
        f.write(PFM_MAGIC + b"\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        magic, rest = raw.split(b"\n", 1)
        if magic.strip() == b"PF":
            raise FormatError(f"{path}: color PFM is not supported")
        if magic.strip() != PFM_MAGIC:
            raise FormatError(f"{path}: not a PFM file")
        dims, rest = rest.split(b"\n", 1)
        w, h = (int(tok) for tok in dims.split())
        scale_tok, rest = rest.split(b"\n", 1)
        scale = float(scale_tok)
    except (ValueError, FormatError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed PFM header") from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(f"{path}: malformed PFM header")
    dtype = "<f4" if scale < 0 else ">f4"
    expect = w * h * 4
    if len(rest) < expect:
        raise FormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(rest[:expect], dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


# ---------------------------------------------------------------------------
# PLY, binary little-endian, one colored vertex per reference pixel


def export_pointcloud(state: SceneState, path,
                      image: np.ndarray | None = None) -> int:
    """Write the scaled reconstruction as a point cloud; returns the
    vertex count.  Colors come from the reference image when given and
    from superpixel mean colors otherwise; pixels whose plane is
    unusable are skipped."""
    graph = state.graph
    z = depth_map(state)
    chunks = []
    for i, sp in enumerate(graph.superpixels):
        px = sp.pixels
        depths = z[px[:, 1], px[:, 0]]
        good = np.isfinite(depths)
        if not good.any():
            continue
        rays = pixel_rays(state.intr, px[good].astype(float))
        xyz = depths[good, None] * rays
        if image is None:
            rgb = np.tile(sp.mean_color, (int(good.sum()), 1))
        else:
            rgb = image[px[good, 1], px[good, 0], :3]
        verts = np.empty(len(xyz), dtype=_VERTEX_DTYPE)
        verts["x"], verts["y"], verts["z"] = xyz.T.astype(np.float32)
        rgb8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
        verts["red"], verts["green"], verts["blue"] = rgb8.T
        chunks.append(verts)
    verts = (np.concatenate(chunks) if chunks
             else np.empty(0, dtype=_VERTEX_DTYPE))
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(verts)}"]
    header += [f"property {'float' if p in 'xyz' else 'uchar'} {p}"
               for p in PLY_PROPS]
    header += ["end_header", ""]
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        f.write(verts.tobytes())
    return len(verts)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back a cloud written by export_pointcloud: (xyz, rgb)."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii", "replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: unsupported PLY format")
    n = None
    props = []
    for line in lines:
        if line.startswith("element vertex "):
            n = int(line.split()[-1])
        elif line.startswith("property "):
            props.append(line.split()[-1])
    if n is None or props != PLY_PROPS:
        raise FormatError(f"{path}: unexpected PLY layout")
    body = raw[end + len(b"end_header\n"):]
    if len(body) < n * _VERTEX_DTYPE.itemsize:
        raise FormatError(f"{path}: truncated PLY payload")
    verts = np.frombuffer(body[:n * _VERTEX_DTYPE.itemsize],
                          dtype=_VERTEX_DTYPE)
    xyz = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    rgb = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1)
    return xyz, rgb


def export_depth_pfm(state: SceneState, path) -> np.ndarray:
    """Render and write the depth map; returns what was written."""
    z = depth_map(state)
    write_pfm(path, z)
    return z
