import sys

import numpy as np

from dynrecon.errors import DegeneratePatchError, DegenerateSuperpixelError
from dynrecon.ingest import FlowField, flow_correspondences
from dynrecon.local_sfm import (placeholder_patch, reconstruct_patch_candidates,
                                select_branches)
from dynrecon.scene_graph import build_superpixels
from dynrecon.synth import SceneSpec, render, perturb, subdivide_labels

spec = SceneSpec.from_json(sys.argv[1] if len(sys.argv) > 1
                           else "scenes/threeplane.json")
n_sp = int(sys.argv[2]) if len(sys.argv) > 2 else 300
gt = render(spec, seed=0)
labels = subdivide_labels(gt.labels, n_sp)
intr = spec.intrinsics
flow = perturb(FlowField(gt.flow_exact.astype(np.float32)), 0.5, seed=7)
sps = build_superpixels(labels, gt.image_ref)

plane_of = [int(np.bincount(gt.labels[labels == s.id]).argmax()) for s in sps]
motion_of = [spec.planes[p].motion_index for p in plane_of]
tnorm = [np.linalg.norm(m.translation) for m in spec.motions]

cand_lists = []
for sp in sps:
    try:
        src, dst = flow_correspondences(flow, sp)
        cands = reconstruct_patch_candidates(sp, src, dst, intr, seed=0)
    except (DegenerateSuperpixelError, DegeneratePatchError):
        cands = []
    cand_lists.append(cands if cands else [placeholder_patch(sp, intr)])
patches = select_branches(cand_lists)

n_err, t_err, r_err = [], [], []
for sp, patch, p, m in zip(sps, patches, plane_of, motion_of):
    if not (patch.reliable and patch.normal_determined):
        continue
    gn = spec.planes[p].plane.normal
    n_err.append(np.degrees(np.arccos(np.clip(
        abs(np.dot(patch.plane.normal, gn)), -1, 1))))
    mot = spec.motions[m]
    that_gt = mot.translation / tnorm[m]
    t_err.append(np.degrees(np.arccos(np.clip(
        np.dot(patch.motion.translation, that_gt), -1, 1))))
    # unit-gauge depth ratio error: anchor z * ||t_gt|| / gt depth
    ax, ay = int(sp.anchor_pixel[0]), int(sp.anchor_pixel[1])
    r_err.append(patch.anchor3d[2] * tnorm[m] / gt.depth_ref[ay, ax] - 1.0)

for name, v in [("normal deg", n_err), ("t_hat deg", t_err),
                ("gauge depth rel", r_err)]:
    v = np.abs(np.array(v))
    print(f"{name:16s} median {np.median(v):8.3f} p90 "
          f"{np.percentile(v, 90):8.3f} max {v.max():8.3f}")
