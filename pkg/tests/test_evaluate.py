"""Depth scoring, alignment, and the PFM/PLY export formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrecon.energy import SceneState
from dynrecon.errors import FormatError, InputError
from dynrecon.evaluate import (
    MreReport,
    align_scale,
    depth_map,
    export_depth_pfm,
    export_pointcloud,
    mre,
    normal_angles_deg,
    read_pfm,
    read_ply,
    score_depth,
    write_pfm,
)
from dynrecon.geometry import Intrinsics, Plane, RigidMotion, backproject
from dynrecon.ingest import FlowField
from dynrecon.local_sfm import PlanarPatch
from dynrecon.scene_graph import SceneGraph, build_superpixels

from support import random_scene_state


def _maps(seed: int, h: int = 20, w: int = 30):
    rng = np.random.default_rng(seed)
    z_gt = rng.uniform(2.0, 4.0, size=(h, w))
    mask = np.ones((h, w), dtype=bool)
    return z_gt, mask


def _flat_state():
    """One fronto-parallel 2x2 superpixel at depth 2, unit scale."""
    intr = Intrinsics(fx=2.0, fy=2.0, cx=0.5, cy=0.5)
    labels = np.zeros((2, 2), dtype=np.int64)
    image = np.full((2, 2, 3), 0.25)
    sps = build_superpixels(labels, image)
    plane = Plane(np.array([0.0, 0.0, -1.0]), 2.0)
    anchor3d = backproject(intr, sps[0].anchor_pixel[None, :], plane)[0]
    boundary3d = backproject(intr, sps[0].boundary_pixels.astype(float),
                             plane)
    patch = PlanarPatch(sp_id=0, plane=plane,
                        motion=RigidMotion(np.eye(3), np.zeros(3), 1.0),
                        anchor3d=anchor3d, boundary3d=boundary3d,
                        residual=0.0, normal_determined=False)
    graph = SceneGraph.build(sps, labels, image,
                             anchor3d[None, :], k=1)
    flow = FlowField(np.zeros((2, 2, 2), dtype=np.float32))
    return SceneState.build(graph, intr, flow, [patch],
                            lam=np.array([1.0]))


class TestAlignScale:
    def test_identity_gives_unit_scale(self):
        z_gt, mask = _maps(0)
        assert align_scale(z_gt, z_gt, mask) == 1.0

    def test_halved_estimate_gives_two(self):
        z_gt, mask = _maps(1)
        assert align_scale(0.5 * z_gt, z_gt, mask) == 2.0

    def test_median_shrugs_off_corrupted_patch(self):
        # a corrupted block drags least squares but not the median
        z_gt, mask = _maps(2, h=40, w=60)
        s_true = 2.5
        z_est = z_gt / s_true
        z_est[:12, :20] /= 8.0  # 10% of pixels, grossly wrong patch
        s_med = align_scale(z_est, z_gt, mask)
        s_lsq = align_scale(z_est, z_gt, mask, method="lsq")
        assert abs(s_med - s_true) < 0.01 * s_true
        assert abs(s_lsq - s_true) > 0.01 * s_true

    def test_lsq_matches_closed_form(self):
        z_gt, mask = _maps(3)
        rng = np.random.default_rng(4)
        z_est = z_gt * rng.uniform(0.4, 0.6, size=z_gt.shape)
        s = align_scale(z_est, z_gt, mask, method="lsq")
        expect = float((z_gt.ravel() @ z_est.ravel())
                       / (z_est.ravel() @ z_est.ravel()))
        assert s == pytest.approx(expect, abs=1e-15)

    def test_nonpositive_estimates_are_excluded(self):
        z_gt, mask = _maps(5)
        z_est = 0.5 * z_gt
        z_est[0, :5] = 0.0
        z_est[1, :5] = -3.0
        assert align_scale(z_est, z_gt, mask) == 2.0

    def test_no_valid_pixels_raises(self):
        z_gt, mask = _maps(6)
        with pytest.raises(InputError):
            align_scale(z_gt, z_gt, np.zeros_like(mask))

    def test_unknown_method_raises(self):
        z_gt, mask = _maps(7)
        with pytest.raises(InputError):
            align_scale(z_gt, z_gt, mask, method="mean")


class TestMre:
    def test_zero_for_identical_maps(self):
        z_gt, mask = _maps(10)
        rep = mre(z_gt, z_gt, mask)
        assert rep.mre == 0.0
        assert rep.pixel_count == z_gt.size
        assert rep.excluded == 0

    def test_ten_percent_offset_scores_point_one(self):
        z_gt, mask = _maps(11)
        rep = mre(1.1 * z_gt, z_gt, mask)
        assert abs(rep.mre - 0.1) < 1e-12

    def test_mre_of_same_map_is_zero_property(self):
        for seed in range(5):
            z_gt, mask = _maps(100 + seed)
            assert mre(z_gt, z_gt, mask).mre == 0.0

    @given(st.integers(min_value=0, max_value=10_000),
           st.sampled_from([0.25, 0.5, 2.0, 4.0]))
    @settings(max_examples=40, deadline=None)
    def test_alignment_absorbs_joint_rescaling_exactly(self, seed, c):
        z_gt, mask = _maps(seed)
        rng = np.random.default_rng(seed + 1)
        z_est = z_gt * rng.uniform(0.8, 1.2, size=z_gt.shape)
        base = score_depth(z_est, z_gt, mask)
        scaled = score_depth(c * z_est, z_gt, mask)
        assert scaled.mre == base.mre
        assert scaled.global_scale == base.global_scale / c

    def test_alignment_absorbs_non_dyadic_rescaling(self):
        z_gt, mask = _maps(12)
        rng = np.random.default_rng(13)
        z_est = z_gt * rng.uniform(0.8, 1.2, size=z_gt.shape)
        base = score_depth(z_est, z_gt, mask)
        scaled = score_depth(10.0 * z_est, z_gt, mask)
        assert abs(scaled.mre - base.mre) < 1e-12

    def test_excluded_pixels_are_counted(self):
        z_gt, mask = _maps(14)
        z_est = z_gt.copy()
        z_est[0, :4] = np.nan
        z_est[1, :3] = -1.0
        gt = z_gt.copy()
        gt[2, :2] = np.nan
        rep = mre(z_est, gt, mask)
        assert rep.excluded == 9
        assert rep.pixel_count == z_gt.size - 9

    def test_per_superpixel_breakdown(self):
        z_gt, mask = _maps(15)
        labels = np.zeros(z_gt.shape, dtype=np.int64)
        labels[:, 15:] = 1
        z_est = z_gt.copy()
        z_est[:, 15:] *= 1.2
        rep = mre(z_est, z_gt, mask, labels=labels)
        assert rep.per_sp.shape == (2,)
        assert rep.per_sp[0] == 0.0
        assert abs(rep.per_sp[1] - 0.2) < 1e-12
        frac = labels.mean()
        assert abs(rep.mre - 0.2 * frac) < 1e-12

    def test_unscored_superpixel_gets_nan(self):
        z_gt, mask = _maps(16)
        labels = np.zeros(z_gt.shape, dtype=np.int64)
        labels[:, 15:] = 1
        mask[:, 15:] = False
        rep = mre(z_gt, z_gt, mask, labels=labels)
        assert np.isnan(rep.per_sp[1])
        assert rep.per_sp[0] == 0.0

    def test_report_to_dict_is_json_ready(self):
        import json
        z_gt, mask = _maps(17)
        labels = np.zeros(z_gt.shape, dtype=np.int64)
        labels[:, 15:] = 1
        mask[:, 15:] = False
        rep = mre(z_gt, z_gt, mask, labels=labels)
        d = rep.to_dict()
        assert set(d) == {"mre", "P", "excluded", "global_scale", "per_sp"}
        assert d["per_sp"][1] is None
        json.dumps(d)


class TestNormalAngles:
    def test_orientation_agnostic(self):
        n = np.array([[0.0, 0.0, -1.0]])
        assert normal_angles_deg(n, -n)[0] == 0.0

    def test_right_angle(self):
        a = np.array([[1.0, 0.0, 0.0]])
        b = np.array([[0.0, 1.0, 0.0]])
        assert normal_angles_deg(a, b)[0] == pytest.approx(90.0)


class TestDepthMap:
    def test_flat_state_renders_constant_depth(self):
        state = _flat_state()
        z = depth_map(state)
        np.testing.assert_allclose(z, 2.0, atol=1e-14)

    def test_matches_plane_backprojection(self):
        state, _ = random_scene_state(31)
        z = depth_map(state)
        graph = state.graph
        for i, patch in enumerate(state.patches):
            px = graph.superpixels[i].pixels
            pl = Plane(patch.plane.normal,
                       float(state.lam[i]) * patch.plane.depth)
            pts = backproject(state.intr, px.astype(float), pl)
            np.testing.assert_allclose(z[px[:, 1], px[:, 0]], pts[:, 2],
                                       rtol=1e-12)

    def test_scales_with_lam(self):
        state = _flat_state()
        z2 = depth_map(state.with_scales(np.array([3.0])))
        np.testing.assert_allclose(z2, 6.0, atol=1e-14)


class TestPfm:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(40)
        data = rng.uniform(0.5, 9.0, size=(13, 17)).astype(np.float32)
        data[4, 5] = np.nan
        p = tmp_path / "d.pfm"
        write_pfm(p, data)
        back = read_pfm(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(
            np.isnan(back), np.isnan(data))
        np.testing.assert_array_equal(back[~np.isnan(data)],
                                      data[~np.isnan(data)])

    def test_float64_input_rounds_to_float32(self, tmp_path):
        data = np.array([[1.0 / 3.0]])
        p = tmp_path / "d.pfm"
        write_pfm(p, data)
        assert read_pfm(p)[0, 0] == np.float32(1.0 / 3.0)

    def test_header_layout_and_bottom_up_rows(self, tmp_path):
        data = np.arange(12, dtype=np.float32).reshape(3, 4)
        p = tmp_path / "d.pfm"
        write_pfm(p, data)
        raw = p.read_bytes()
        assert raw.startswith(b"Pf\n4 3\n-1.0\n")
        payload = raw[len(b"Pf\n4 3\n-1.0\n"):]
        first = np.frombuffer(payload[:4], dtype="<f4")[0]
        assert first == data[2, 0]  # last image row is written first

    def test_reads_big_endian_scale(self, tmp_path):
        data = np.array([[1.5, -2.0], [0.25, 8.0]], dtype=">f4")
        p = tmp_path / "be.pfm"
        p.write_bytes(b"Pf\n2 2\n1.0\n" + np.flipud(data).tobytes())
        np.testing.assert_array_equal(read_pfm(p),
                                      data.astype(np.float32))

    def test_rejects_color_pfm(self, tmp_path):
        p = tmp_path / "c.pfm"
        p.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
        with pytest.raises(FormatError, match="color"):
            read_pfm(p)

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "x.pfm"
        p.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(FormatError):
            read_pfm(p)

    def test_rejects_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pfm"
        p.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 10)
        with pytest.raises(FormatError, match="truncated"):
            read_pfm(p)

    def test_rejects_garbled_header(self, tmp_path):
        p = tmp_path / "g.pfm"
        p.write_bytes(b"Pf\nfour three\n-1.0\n")
        with pytest.raises(FormatError):
            read_pfm(p)


class TestPly:
    def test_flat_state_writes_four_expected_vertices(self, tmp_path):
        state = _flat_state()
        p = tmp_path / "cloud.ply"
        count = export_pointcloud(state, p)
        assert count == 4
        xyz, rgb = read_ply(p)
        expect = np.array([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0],
                           [-0.5, 0.5, 2.0], [0.5, 0.5, 2.0]],
                          dtype=np.float32)
        np.testing.assert_array_equal(xyz, expect)
        np.testing.assert_array_equal(rgb, np.full((4, 3), 64,
                                                   dtype=np.uint8))

    def test_header_is_binary_little_endian(self, tmp_path):
        state = _flat_state()
        p = tmp_path / "cloud.ply"
        export_pointcloud(state, p)
        raw = p.read_bytes()
        assert raw.startswith(b"ply\nformat binary_little_endian 1.0\n"
                              b"element vertex 4\n")
        assert b"property float x" in raw and b"property uchar red" in raw

    def test_round_trip_on_random_state(self, tmp_path):
        state, _ = random_scene_state(33)
        p = tmp_path / "cloud.ply"
        count = export_pointcloud(state, p)
        z = depth_map(state)
        assert count == int(np.isfinite(z).sum())
        xyz, rgb = read_ply(p)
        assert xyz.shape == (count, 3) and rgb.shape == (count, 3)
        assert xyz.dtype == np.float32 and rgb.dtype == np.uint8
        assert np.all(xyz[:, 2] > 0)

    def test_image_colors_override_mean_color(self, tmp_path):
        state = _flat_state()
        image = np.zeros((2, 2, 3))
        image[:, :, 0] = 1.0  # pure red
        p = tmp_path / "cloud.ply"
        export_pointcloud(state, p, image=image)
        _, rgb = read_ply(p)
        np.testing.assert_array_equal(
            rgb, np.tile([255, 0, 0], (4, 1)).astype(np.uint8))

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "x.ply"
        p.write_bytes(b"not a ply at all")
        with pytest.raises(FormatError):
            read_ply(p)


class TestExportRescore:
    def test_exported_depth_rescores_identically(self, tmp_path):
        state, _ = random_scene_state(35)
        gt = depth_map(state)
        jittered = state.with_scales(state.lam
                                     * np.linspace(0.9, 1.1, state.graph.n))
        est = depth_map(jittered)
        mask = np.isfinite(gt) & np.isfinite(est)

        p = tmp_path / "est.pfm"
        write_pfm(p, est)
        back = read_pfm(p)
        direct = score_depth(est.astype(np.float32), gt, mask)
        reread = score_depth(back, gt, mask)
        assert reread.mre == direct.mre
        assert reread.global_scale == direct.global_scale
        assert reread.pixel_count == direct.pixel_count

    def test_export_depth_pfm_writes_render(self, tmp_path):
        state = _flat_state()
        p = tmp_path / "d.pfm"
        z = export_depth_pfm(state, p)
        np.testing.assert_array_equal(read_pfm(p), z.astype(np.float32))
