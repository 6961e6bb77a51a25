import json
import os
import time

from dynrecon.pipeline import PipelineConfig, run, synth
from dynrecon.synth import subdivide_labels
from dynrecon.ingest import load_image
from dynrecon.pipeline import read_labels, write_labels

scene_dir = "/tmp/smoke/scene"
out_dir = "/tmp/smoke/out"
written = synth("scenes/threeplane.json", scene_dir, seed=0)
print("synth wrote:", [os.path.basename(p) for p in written])

labels = read_labels(os.path.join(scene_dir, "labels.png"))
sub = subdivide_labels(labels, 300)
write_labels(os.path.join(scene_dir, "labels300.png"), sub)

cfg = PipelineConfig(
    frame0=os.path.join(scene_dir, "frame0.png"),
    frame1=os.path.join(scene_dir, "frame1.png"),
    flow=os.path.join(scene_dir, "flow.flo"),
    intrinsics=os.path.join(scene_dir, "intrinsics.json"),
    out_dir=out_dir,
    labels=os.path.join(scene_dir, "labels300.png"),
    gt_depth=os.path.join(scene_dir, "depth_gt.pfm"),
    n_superpixels=300,
    knn_K=8,
    seed=0,
)
t0 = time.perf_counter()
report = run(cfg)
dt = time.perf_counter() - t0
print(f"wall time {dt:.1f}s")
print("stage seconds:", {k: round(v, 2) for k, v in
                         report.stage_seconds.items()})
print("energies: initial %.3f after_scales %.3f final %.3f" % (
    report.energies["initial"], report.energies["after_scales"],
    report.energies["final"]))
print("refine:", [round(e, 2) for e in report.energies["refine"]])
print("reliability:", report.reliability)
print("scale_solve:", report.scale_solve)
print("MRE %.6f over %d px" % (report.mre.mre, report.mre.pixel_count))
print("warnings:", report.warnings)
print("run dir:", report.run_dir)
print(sorted(os.listdir(report.run_dir)))
