import numpy as np
from dynrecon.synth import SceneSpec, render, subdivide_labels
from dynrecon.ingest import FlowField, flow_correspondences
from dynrecon.scene_graph import build_superpixels
from dynrecon.local_sfm import (reconstruct_patch_candidates, select_branches,
                                placeholder_patch)
from dynrecon.errors import DegenerateSuperpixelError, DegeneratePatchError

spec = SceneSpec.from_json("scenes/threeplane.json")
gt = render(spec, seed=0)
labels = subdivide_labels(gt.labels, 300)
intr = spec.intrinsics
flow = FlowField(gt.flow_exact)
sps = build_superpixels(labels, gt.image_ref)
print(f"{len(sps)} superpixels")

cand_lists = []
for sp in sps:
    try:
        src, dst = flow_correspondences(flow, sp)
        cands = reconstruct_patch_candidates(sp, src, dst, intr, seed=0)
    except (DegenerateSuperpixelError, DegeneratePatchError):
        cands = []
    cand_lists.append(cands if cands else [placeholder_patch(sp, intr)])

sizes = [len(c) for c in cand_lists]
print("candidate counts:", dict(zip(*np.unique(sizes, return_counts=True))))

import time
t0 = time.perf_counter()
patches = select_branches(cand_lists)
print(f"select_branches: {time.perf_counter() - t0:.2f}s")

gt_normals = [ps.plane.normal for ps in spec.planes]


def angle(patch, sp):
    ax, ay = int(sp.anchor_pixel[0]), int(sp.anchor_pixel[1])
    gt_id = gt.labels[ay, ax]
    gn = gt_normals[gt_id]
    return np.degrees(np.arccos(np.clip(
        abs(np.dot(patch.plane.normal, gn)), -1, 1)))


bad = 0
worst = 0.0
for sp, patch in zip(sps, patches):
    if not (patch.reliable and patch.normal_determined):
        continue
    ang = angle(patch, sp)
    worst = max(worst, ang)
    if ang > 1.0:
        bad += 1
        if bad <= 5:
            gt_id = gt.labels[int(sp.anchor_pixel[1]), int(sp.anchor_pixel[0])]
            print(f"sp {sp.id} plane {gt_id}: normal off by {ang:.2f} deg")
print(f"chosen: bad normals {bad}, worst angle {worst:.4f} deg")

bad0 = sum(1 for sp, cl in zip(sps, cand_lists)
           if cl[0].reliable and cl[0].normal_determined
           and angle(cl[0], sp) > 1.0)
print(f"first-branch (old behaviour): bad normals {bad0}")
