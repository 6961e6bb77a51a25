"""Input handling: images, superpixel segmentation, and optical flow.

Flow files use the Middlebury .flo layout: a float32 magic 202021.25,
int32 width and height, then height*width*2 float32 (u, v) pairs in
row-major order, all little endian.  NaN components mark invalid flow
and survive a write/read round trip bit for bit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2lab

from .errors import DegenerateSuperpixelError, FormatError, InputError
from .scene_graph import Superpixel

FLO_MAGIC = 202021.25


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense forward flow, (H, W, 2) float32, NaN where invalid."""

    uv: np.ndarray

    def __post_init__(self):
        uv = np.ascontiguousarray(self.uv, dtype=np.float32)
        if uv.ndim != 3 or uv.shape[2] != 2:
            raise InputError("flow must have shape (H, W, 2)")
        object.__setattr__(self, "uv", uv)

    @property
    def height(self) -> int:
        return self.uv.shape[0]

    @property
    def width(self) -> int:
        return self.uv.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.uv), axis=2)


def load_image(path: str) -> np.ndarray:
    """8-bit RGB image file to (H, W, 3) float64 in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc


def save_image(path: str, image: np.ndarray) -> None:
    """(H, W, 3) float in [0, 1] to an 8-bit RGB file."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_flo(path: str) -> FlowField:
    with open(path, "rb") as f:
        magic = np.fromfile(f, np.float32, count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise FormatError(f"{path}: bad .flo magic")
        dims = np.fromfile(f, np.int32, count=2)
        if dims.size != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise FormatError(f"{path}: bad .flo dimensions")
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, np.float32, count=h * w * 2)
        if data.size != h * w * 2:
            raise FormatError(f"{path}: truncated .flo payload")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after .flo payload")
    return FlowField(data.reshape(h, w, 2))


def write_flo(path: str, flow: FlowField) -> None:
    with open(path, "wb") as f:
        np.float32(FLO_MAGIC).tofile(f)
        np.array([flow.width, flow.height], dtype=np.int32).tofile(f)
        np.ascontiguousarray(flow.uv, dtype=np.float32).tofile(f)


def _merge_component(comp: np.ndarray, sizes: np.ndarray, cid: int,
                     cross: np.ndarray) -> bool:
    """Fold component cid into the 4-neighbor it borders the most."""
    mask = comp == cid
    grown = ndimage.binary_dilation(mask, structure=cross)
    nbr = comp[grown & ~mask]
    nbr = nbr[nbr != cid]
    if nbr.size == 0:
        return False  # component fills the image
    target = int(np.bincount(nbr).argmax())
    comp[mask] = target
    sizes[target] += sizes[cid]
    sizes[cid] = 0
    return True


def _enforce_grid_connectivity(labels: np.ndarray, n_target: int) -> np.ndarray:
    """Split non-4-connected labels, then merge orphan components.

    Each 4-connected component becomes its own segment; components
    smaller than a quarter of the mean target size are merged into the
    4-neighbor they border the most, and the smallest survivors keep
    merging until the count is within 20% of ``n_target``.  Ids come
    out contiguous from 0 in scan order of first occurrence.
    """
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    comp = np.full(labels.shape, -1, dtype=np.int64)
    next_id = 0
    for lab in np.unique(labels):
        cc, ncc = ndimage.label(labels == lab, structure=cross)
        comp[cc > 0] = cc[cc > 0] - 1 + next_id
        next_id += ncc

    sizes = np.bincount(comp.ravel(), minlength=next_id)
    min_size = max(1, int(0.25 * comp.size / n_target))
    for cid in np.argsort(sizes, kind="stable"):
        if 0 < sizes[cid] < min_size:
            _merge_component(comp, sizes, int(cid), cross)
    cap = int(np.ceil(1.2 * n_target))
    while np.count_nonzero(sizes) > cap:
        alive = np.flatnonzero(sizes)
        smallest = alive[np.argmin(sizes[alive], )]
        if not _merge_component(comp, sizes, int(smallest), cross):
            break

    _, out = np.unique(comp, return_inverse=True)
    out = out.reshape(labels.shape)
    # Relabel by first occurrence in scan order for determinism.
    first = {}
    flat = out.ravel()
    remap = np.empty(out.max() + 1, dtype=np.int64)
    nxt = 0
    for val in flat:
        if val not in first:
            first[val] = nxt
            remap[val] = nxt
            nxt += 1
    return remap[out]


def _initial_centers(lab: np.ndarray, n_target: int) -> np.ndarray:
    """Grid-seeded (y, x) cluster centers moved off local gradient maxima."""
    h, w = lab.shape[:2]
    rows = max(1, round(np.sqrt(n_target * h / w)))
    cols = max(1, round(n_target / rows))
    ys = (np.arange(rows) + 0.5) * h / rows
    xs = (np.arange(cols) + 0.5) * w / cols
    grad = np.zeros((h, w))
    for c in range(3):
        gy, gx = np.gradient(lab[..., c])
        grad += gy * gy + gx * gx
    centers = []
    for y in ys:
        for x in xs:
            cy, cx = int(y), int(x)
            window = grad[max(0, cy - 1):cy + 2, max(0, cx - 1):cx + 2]
            dy, dx = np.unravel_index(np.argmin(window), window.shape)
            centers.append((max(0, cy - 1) + dy, max(0, cx - 1) + dx))
    return np.asarray(centers, dtype=float)


def slic_segment(image: np.ndarray, n_target: int,
                 compactness: float = 10.0, n_iter: int = 10) -> np.ndarray:
    """SLIC superpixels with the package's label-map contract.

    CIELAB k-means with the joint color/space distance
    d^2 = d_lab^2 + (m/S)^2 d_xy^2, windowed assignment of half-width
    2S, then a connectivity post-pass so every segment is 4-connected,
    orphans are merged, and ids are contiguous from 0.  Deterministic
    for a given input (ties go to the lower cluster id).
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    if not 1 <= n_target <= h * w:
        raise InputError(f"n_target must be in [1, {h * w}], got {n_target}")
    if n_target == 1:
        return np.zeros((h, w), dtype=np.int64)

    lab = rgb2lab(image)
    step = np.sqrt(h * w / n_target)
    ratio = (compactness / step) ** 2
    yx = _initial_centers(lab, n_target)
    centers = np.concatenate(
        [lab[yx[:, 0].astype(int), yx[:, 1].astype(int)], yx], axis=1)

    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    for _ in range(n_iter):
        best = np.full((h, w), np.inf)
        labels = np.full((h, w), -1, dtype=np.int64)
        for cid, c in enumerate(centers):
            cy, cx = c[3], c[4]
            y0, y1 = max(0, int(cy - 2 * step)), min(h, int(cy + 2 * step) + 1)
            x0, x1 = max(0, int(cx - 2 * step)), min(w, int(cx + 2 * step) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            dc = lab[y0:y1, x0:x1] - c[:3]
            ds = ((vv[y0:y1, x0:x1] - cy) ** 2
                  + (uu[y0:y1, x0:x1] - cx) ** 2)
            d = np.sum(dc * dc, axis=2) + ratio * ds
            better = d < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1][better] = d[better]
            labels[y0:y1, x0:x1][better] = cid
        if (labels < 0).any():
            # Pixels outside every window (possible for tiny n_target).
            miss = np.flatnonzero(labels.ravel() < 0)
            feats = np.concatenate([lab.reshape(-1, 3)[miss],
                                    np.column_stack([vv.ravel()[miss],
                                                     uu.ravel()[miss]])],
                                   axis=1)
            dc = feats[:, None, :3] - centers[None, :, :3]
            ds = feats[:, None, 3:] - centers[None, :, 3:]
            d = np.sum(dc * dc, axis=2) + ratio * np.sum(ds * ds, axis=2)
            labels.ravel()[miss] = np.argmin(d, axis=1)
        for cid in range(len(centers)):
            mask = labels == cid
            if mask.any():
                centers[cid, :3] = lab[mask].mean(axis=0)
                centers[cid, 3] = vv[mask].mean()
                centers[cid, 4] = uu[mask].mean()
    return _enforce_grid_connectivity(labels, n_target)


def flow_correspondences(flow: FlowField, sp: Superpixel,
                         min_valid_fraction: float = 0.5):
    """Per-superpixel point pairs (x, x + flow(x)) over valid pixels.

    Returns (x, x2) float arrays of shape (P, 2).  Raises
    DegenerateSuperpixelError when fewer than ``min_valid_fraction`` of
    the member pixels carry finite flow.
    """
    px = sp.pixels
    uv = flow.uv[px[:, 1], px[:, 0]].astype(np.float64)
    ok = np.all(np.isfinite(uv), axis=1)
    if ok.sum() < min_valid_fraction * len(px):
        raise DegenerateSuperpixelError(
            f"superpixel {sp.id}: only {int(ok.sum())}/{len(px)} "
            "pixels have valid flow")
    x = px[ok].astype(np.float64)
    return x, x + uv[ok]
