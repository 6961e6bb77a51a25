"""End-to-end two-frame reconstruction with file inputs and outputs.

A run is configured by a JSON document and executes the stage sequence
ingest -> scene_graph -> local_sfm -> solve_scales -> refine ->
evaluate -> export.  Artifacts land in a directory named by the config
hash: estimated depth (PFM), a colored point cloud (PLY), a
deterministic metrics report, the full run report with timings, and an
echo of the configuration that produced them.  Any failure surfaces as
a StageError wrapping the original exception, and nothing half-written
stays behind.

The companion synth() renders a scene description into exactly the
files a run consumes, which is how the oracle suite drives the whole
pipeline without real footage.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace

import numpy as np
from PIL import Image

from .energy import EnergyParams, SceneState, e_total
from .errors import (
    DegeneratePatchError,
    DegenerateSuperpixelError,
    FormatError,
    InputError,
    NumericalError,
    StageError,
)
from .evaluate import (
    MreReport,
    depth_map,
    export_pointcloud,
    read_pfm,
    score_depth,
    write_pfm,
)
from .geometry import Intrinsics
from .ingest import (
    flow_correspondences,
    load_image,
    read_flo,
    save_image,
    slic_segment,
    write_flo,
)
from .local_sfm import (
    borrow_planes,
    placeholder_patch,
    reconstruct_patch_candidates,
    select_branches,
    unit_scale_anchors,
)
from .optimize import refine, solve_scales
from .scene_graph import SceneGraph, build_knn_graph, build_superpixels
from .synth import SceneSpec, render

log = logging.getLogger(__name__)

_PATH_FIELDS = ("frame0", "frame1", "flow", "intrinsics", "out_dir",
                "labels", "gt_depth")


@dataclass(frozen=True)
class PipelineConfig:
    """One run, fully described; serializes to and from JSON."""

    frame0: str
    frame1: str
    flow: str
    intrinsics: str
    out_dir: str
    labels: str | None = None  # precomputed label map; None means segment
    gt_depth: str | None = None  # enables MRE scoring when present
    # 1000-2000 segments keep patches small enough to stay planar at
    # video resolution; tiny test scenes override this way down
    n_superpixels: int = 1200
    # anchor neighborhoods of 15-20 balance rigidity against coupling
    # independently moving regions together
    knn_K: int = 15
    beta: float = 3.0
    sigma: float = 15.0
    alpha1: float = 1.0
    alpha2: float = 0.5
    refine_iters: int = 8
    particles: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.n_superpixels < 1:
            raise InputError("n_superpixels must be >= 1")
        if self.knn_K < 1:
            raise InputError("knn_K must be >= 1")
        if self.beta <= 0 or self.sigma <= 0:
            raise InputError("beta and sigma must be positive")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InputError("alpha1 and alpha2 must be >= 0")
        if self.refine_iters < 0:
            raise InputError("refine_iters must be >= 0")
        if self.particles < 1:
            raise InputError("particles must be >= 1")
        for name in ("n_superpixels", "knn_K", "refine_iters", "particles",
                     "seed"):
            if not isinstance(getattr(self, name), int):
                raise InputError(f"{name} must be an integer")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        required = [f.name for f in fields(cls)
                    if f.name in _PATH_FIELDS[:5]]
        missing = sorted(set(required) - set(doc))
        if missing:
            raise InputError(f"config missing keys: {', '.join(missing)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str) -> "PipelineConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise InputError(f"{path}: config must be a JSON object")
        cfg = cls.from_dict(doc)
        # relative paths in a config file mean relative to the file
        base = os.path.dirname(os.path.abspath(path))
        resolved = {
            name: os.path.normpath(os.path.join(base, value))
            for name in _PATH_FIELDS
            if (value := getattr(cfg, name)) is not None
            and not os.path.isabs(value)
        }
        return replace(cfg, **resolved)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def config_hash(self) -> str:
        # out_dir names where the run lands, not what it computes
        doc = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def energy_params(self) -> EnergyParams:
        return EnergyParams(beta=self.beta, sigma=self.sigma,
                            alpha1=self.alpha1, alpha2=self.alpha2,
                            knn=self.knn_K)


@dataclass(frozen=True)
class RunReport:
    """What a run did: timings, energies, reliability, and metrics."""

    config_hash: str
    run_dir: str
    n_superpixels: int
    stage_seconds: dict
    energies: dict
    reliability: dict
    scale_solve: dict
    mre: MreReport | None
    warnings: list

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "run_dir": self.run_dir,
            "n_superpixels": self.n_superpixels,
            "stage_seconds": self.stage_seconds,
            "energies": self.energies,
            "reliability": self.reliability,
            "scale_solve": self.scale_solve,
            "mre": self.mre.to_dict() if self.mre is not None else None,
            "warnings": self.warnings,
        }

    def metrics_dict(self) -> dict:
        """The deterministic subset: identical config+seed, identical
        bytes.  Timings and the run directory stay out."""
        return {
            "config_hash": self.config_hash,
            "n_superpixels": self.n_superpixels,
            "energies": self.energies,
            "reliability": self.reliability,
            "scale_solve": self.scale_solve,
            "mre": self.mre.to_dict() if self.mre is not None else None,
        }


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except BaseException as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - start


def read_intrinsics(path: str) -> Intrinsics:
    """Camera intrinsics from a JSON object {fx, fy, cx, cy}."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise InputError(f"{path}: intrinsics must be a JSON object")
    missing = sorted({"fx", "fy", "cx", "cy"} - set(doc))
    if missing:
        raise InputError(f"{path}: intrinsics missing {', '.join(missing)}")
    try:
        fx, fy = float(doc["fx"]), float(doc["fy"])
        cx, cy = float(doc["cx"]), float(doc["cy"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: intrinsics entries must be numbers") \
            from exc
    if fx <= 0 or fy <= 0:
        raise InputError(f"{path}: focal lengths must be positive")
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy)


def read_labels(path: str) -> np.ndarray:
    """Label map from a single-channel PNG, relabeled contiguous from 0."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot decode label image {path}: {exc}") \
            from exc
    if arr.ndim != 2:
        raise InputError(f"{path}: label image must be single-channel")
    _, labels = np.unique(arr, return_inverse=True)
    return labels.reshape(arr.shape).astype(np.int32)


def write_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= 2 ** 16:
        raise InputError("label ids must fit 16-bit PNG (0..65535)")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _cleanup(run_dir: str, created_dir: bool, written: list) -> None:
    for p in written:
        if os.path.exists(p):
            os.remove(p)
    if created_dir:
        shutil.rmtree(run_dir, ignore_errors=True)


def run(config: PipelineConfig) -> RunReport:
    """Reconstruct one two-frame scene per the config; see module doc."""
    config.validate()
    timings: dict[str, float] = {}
    warnings: list[str] = []

    def warn(msg: str) -> None:
        warnings.append(msg)
        log.warning(msg)

    with _stage("ingest", timings):
        image0 = load_image(config.frame0)
        image1 = load_image(config.frame1)
        if image1.shape != image0.shape:
            raise InputError(
                f"frame sizes differ: {config.frame0} is "
                f"{image0.shape[:2]}, {config.frame1} is {image1.shape[:2]}")
        flow = read_flo(config.flow)
        if (flow.height, flow.width) != image0.shape[:2]:
            raise InputError(
                f"{config.flow}: flow is {(flow.height, flow.width)}, "
                f"frames are {image0.shape[:2]}")
        intr = read_intrinsics(config.intrinsics)
        if config.labels is not None:
            labels = read_labels(config.labels)
            if labels.shape != image0.shape[:2]:
                raise InputError(
                    f"{config.labels}: label map is {labels.shape}, "
                    f"frames are {image0.shape[:2]}")
        else:
            labels = slic_segment(image0, config.n_superpixels)
        gt_depth = None
        if config.gt_depth is not None:
            gt_depth = read_pfm(config.gt_depth)
            if gt_depth.shape != image0.shape[:2]:
                raise InputError(
                    f"{config.gt_depth}: depth is {gt_depth.shape}, "
                    f"frames are {image0.shape[:2]}")

    with _stage("scene_graph", timings):
        sps = build_superpixels(labels, image0)
        n = len(sps)
        k = config.knn_K
        if n == 1:
            warn("single superpixel: no anchor graph, relative scale "
                 "fixed at 1")
        elif k > n - 1:
            k = n - 1
            warn(f"knn_K={config.knn_K} exceeds the {n - 1} other "
                 f"superpixels; clamped to {k}")

    with _stage("local_sfm", timings):
        cand_lists = []
        for sp in sps:
            try:
                src, dst = flow_correspondences(flow, sp)
                cands = reconstruct_patch_candidates(sp, src, dst, intr,
                                                     seed=config.seed)
            except (DegenerateSuperpixelError, DegeneratePatchError):
                cands = []
            cand_lists.append(cands if cands else
                              [placeholder_patch(sp, intr)])
        patches = select_branches(cand_lists)
        if n > 1:
            # unreliable patches inherit geometry from their provisional
            # neighborhoods before the real graph is wired
            edges = build_knn_graph(unit_scale_anchors(patches), k)
            neighbors: dict[int, list[int]] = {}
            for i, j in edges:
                neighbors.setdefault(int(i), []).append(int(j))
            patches = borrow_planes(patches, neighbors, intr, sps)
        graph = SceneGraph.build(sps, labels, image0,
                                 unit_scale_anchors(patches), k)
        state = SceneState.build(graph, intr, flow, patches)
        params = config.energy_params()
        e_initial = float(e_total(state, params))
        rel = state.reliable_mask()
        reliability = {
            "reliable": int(rel.sum()),
            "unreliable": int((~rel).sum()),
            "static": int(sum(p.reliable and p.static for p in patches)),
            "undetermined_normal": int(sum(
                p.reliable and not p.normal_determined for p in patches)),
        }
        if reliability["unreliable"]:
            warn(f"{reliability['unreliable']} of {n} superpixels have no "
                 "usable local reconstruction")

    with _stage("solve_scales", timings):
        sol = solve_scales(state, params)
        if not sol.observable:
            warn("no reliable translating patch: relative scales are "
                 "unobservable, left uniform")
        elif not sol.converged:
            warn(f"scale solve stopped short of stationarity after "
                 f"{sol.iterations} iterations")
        state = state.with_scales(sol.lambdas)
        e_scaled = float(e_total(state, params))
        scale_solve = {
            "converged": sol.converged,
            "iterations": sol.iterations,
            "observable": sol.observable,
        }

    with _stage("refine", timings):
        result = refine(state, params, n_iters=config.refine_iters,
                        seed=config.seed, n_particles=config.particles)
        state = result.state
        refine_energies = [float(e) for e in result.energies]
        prev = e_scaled
        for it, e in enumerate(refine_energies):
            if e > prev:
                raise NumericalError(
                    f"energy rose from {prev!r} to {e!r} at refine "
                    f"iteration {it}")
            prev = e
        energies = {
            "initial": e_initial,
            "after_scales": e_scaled,
            "refine": refine_energies,
            "final": refine_energies[-1] if refine_energies else e_scaled,
        }

    with _stage("evaluate", timings):
        depth = depth_map(state)
        mre_report = None
        if gt_depth is not None:
            mask = np.isfinite(gt_depth) & (gt_depth > 0)
            mre_report = score_depth(depth, gt_depth, mask, labels=labels)

    run_dir = os.path.join(config.out_dir, config.config_hash)
    created_dir = not os.path.isdir(run_dir)
    written: list[str] = []
    start = time.perf_counter()
    try:
        os.makedirs(run_dir, exist_ok=True)

        def emit(name: str, writer) -> None:
            path = os.path.join(run_dir, name)
            written.append(path)
            writer(path)

        emit("depth.pfm", lambda p: write_pfm(p, depth))
        emit("cloud.ply", lambda p: export_pointcloud(state, p,
                                                      image=image0))
        emit("config.json", lambda p: _write_json(p, config.to_dict()))
        report = RunReport(
            config_hash=config.config_hash,
            run_dir=run_dir,
            n_superpixels=n,
            stage_seconds=timings,
            energies=energies,
            reliability=reliability,
            scale_solve=scale_solve,
            mre=mre_report,
            warnings=warnings,
        )
        emit("metrics.json", lambda p: _write_json(p, report.metrics_dict()))
        timings["export"] = time.perf_counter() - start
        emit("report.json", lambda p: _write_json(p, report.to_dict()))
    except BaseException as exc:
        _cleanup(run_dir, created_dir, written)
        raise StageError("export", exc) from exc
    return report


# ---------------------------------------------------------------------------
# Synthetic inputs


def synth(spec_path: str, out_dir: str, seed: int = 0) -> list[str]:
    """Render a scene description into the files run() consumes.

    Writes frame0.png, frame1.png, labels.png, flow.flo, depth_gt.pfm,
    and intrinsics.json into out_dir and returns the paths in that
    order.  Spec problems raise before anything is written; a failure
    mid-write removes the partial file set.
    """
    spec = SceneSpec.from_json(spec_path)
    gt = render(spec, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    intr = spec.intrinsics
    try:
        def emit(name: str, writer) -> str:
            path = os.path.join(out_dir, name)
            written.append(path)
            writer(path)
            return path

        emit("frame0.png", lambda p: save_image(p, gt.image_ref))
        emit("frame1.png", lambda p: save_image(p, gt.image_next))
        emit("labels.png", lambda p: write_labels(p, gt.labels))
        emit("flow.flo", lambda p: write_flo(p, gt.flow))
        emit("depth_gt.pfm", lambda p: write_pfm(p, gt.depth_ref))
        emit("intrinsics.json", lambda p: _write_json(p, {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy}))
    except BaseException:
        for p in written:
            if os.path.exists(p):
                os.remove(p)
        raise
    return written


def config_for_scene(scene_dir: str, out_dir: str,
                     use_gt_labels: bool = True,
                     **overrides) -> PipelineConfig:
    """Config pointing at a synth() output directory."""
    doc = {
        "frame0": os.path.join(scene_dir, "frame0.png"),
        "frame1": os.path.join(scene_dir, "frame1.png"),
        "flow": os.path.join(scene_dir, "flow.flo"),
        "intrinsics": os.path.join(scene_dir, "intrinsics.json"),
        "gt_depth": os.path.join(scene_dir, "depth_gt.pfm"),
        "out_dir": out_dir,
    }
    if use_gt_labels:
        doc["labels"] = os.path.join(scene_dir, "labels.png")
    doc.update(overrides)
    cfg = PipelineConfig(**doc)
    cfg.validate()
    return cfg
