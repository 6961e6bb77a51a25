import sys

import numpy as np

from dynrecon.errors import DegeneratePatchError, DegenerateSuperpixelError
from dynrecon.geometry import (gauge_normalize, homography_from_motion_plane)
from dynrecon.ingest import FlowField, flow_correspondences
from dynrecon.local_sfm import (fit_homography, placeholder_patch,
                                reconstruct_patch_candidates, select_branches)
from dynrecon.scene_graph import build_superpixels
from dynrecon.synth import SceneSpec, render, perturb, subdivide_labels

spec = SceneSpec.from_json("scenes/threeplane.json")
n_sp = int(sys.argv[1]) if len(sys.argv) > 1 else 48
sigma = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
gt = render(spec, seed=0)
labels = subdivide_labels(gt.labels, n_sp)
intr = spec.intrinsics
flow = perturb(FlowField(gt.flow_exact.astype(np.float32)), sigma, seed=7)
sps = build_superpixels(labels, gt.image_ref)

plane_of = [int(np.bincount(gt.labels[labels == s.id]).argmax()) for s in sps]

h_err, best_n, chosen_n, n_cands = [], [], [], []
cand_lists = []
for sp, p in zip(sps, plane_of):
    ps = spec.planes[p]
    m = spec.motions[ps.motion_index]
    h_gt = homography_from_motion_plane(intr, m, ps.plane)
    try:
        src, dst = flow_correspondences(flow, sp)
        h = fit_homography(src, dst, seed=0)
        cands = reconstruct_patch_candidates(sp, src, dst, intr, seed=0)
    except (DegenerateSuperpixelError, DegeneratePatchError):
        cand_lists.append([placeholder_patch(sp, intr)])
        continue
    cand_lists.append(cands if cands else [placeholder_patch(sp, intr)])
    h_err.append(min(np.linalg.norm(h - h_gt), np.linalg.norm(h + h_gt)))
    gn = ps.plane.normal
    angs = [np.degrees(np.arccos(np.clip(abs(np.dot(c.plane.normal, gn)),
                                         -1, 1)))
            for c in cands if c.normal_determined]
    if angs:
        best_n.append(min(angs))
        n_cands.append(len(angs))

patches = select_branches(cand_lists)
for sp, patch, p in zip(sps, patches, plane_of):
    if patch.reliable and patch.normal_determined:
        gn = spec.planes[p].plane.normal
        chosen_n.append(np.degrees(np.arccos(np.clip(
            abs(np.dot(patch.plane.normal, gn)), -1, 1))))

for name, v in [("|H - H_gt|", h_err), ("best-branch normal deg", best_n),
                ("chosen normal deg", chosen_n)]:
    v = np.array(v)
    print(f"{name:24s} median {np.median(v):9.4f} p90 "
          f"{np.percentile(v, 90):9.4f} max {v.max():9.4f}")
print("branch counts:", dict(zip(*np.unique(n_cands, return_counts=True))))
