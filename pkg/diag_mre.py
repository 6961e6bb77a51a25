import json

import numpy as np

from dynrecon.evaluate import read_pfm
from dynrecon.pipeline import read_labels
from dynrecon.synth import SceneSpec, render, subdivide_labels

run_dir = "/tmp/smoke/out/0e40d44625e1"
report = json.load(open(run_dir + "/report.json"))
per_sp = dict(enumerate(report["mre"]["per_sp"]))

spec = SceneSpec.from_json("scenes/threeplane.json")
gt = render(spec, seed=0)
labels = subdivide_labels(gt.labels, 300)

# which GT plane each sp sits on
plane_of = {}
for s in np.unique(labels):
    sel = labels == s
    plane_of[int(s)] = int(np.bincount(gt.labels[sel]).argmax())

by_plane = {0: [], 1: [], 2: []}
for s, e in per_sp.items():
    by_plane[plane_of[s]].append(e)
for p, errs in by_plane.items():
    errs = np.array(errs)
    print(f"plane {p}: n={len(errs)} mean {errs.mean():.4f} "
          f"median {np.median(errs):.4f} max {errs.max():.4f}")

worst = sorted(per_sp.items(), key=lambda kv: -kv[1])[:12]
print("worst sps:", [(s, plane_of[s], round(e, 3)) for s, e in worst])

est = read_pfm(run_dir + "/depth.pfm")
scale = report["mre"]["global_scale"]
print("global_scale", scale)

# depth ratio per plane: est*scale/gt
for p in range(3):
    sel = (gt.labels == p) & np.isfinite(est)
    r = est[sel] * scale / gt.depth_ref[sel]
    print(f"plane {p}: depth ratio mean {r.mean():.4f} std {r.std():.4f}")
