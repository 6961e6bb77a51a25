"""Image IO, SLIC segmentation contract, .flo round trips, correspondences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrecon.errors import (
    DegenerateSuperpixelError,
    FormatError,
    InputError,
)
from dynrecon.ingest import (
    FlowField,
    flow_correspondences,
    load_image,
    read_flo,
    save_image,
    slic_segment,
    write_flo,
)
from dynrecon.scene_graph import build_superpixels


class TestImageRoundTrip:
    def test_png_round_trip_is_exact_for_8bit(self, tmp_path):
        rng = np.random.default_rng(1)
        img8 = rng.integers(0, 256, size=(6, 8, 3), dtype=np.uint8)
        path = str(tmp_path / "img.png")
        save_image(path, img8 / 255.0)
        back = load_image(path)
        np.testing.assert_array_equal((back * 255).round().astype(np.uint8),
                                      img8)

    def test_bad_payload_raises_format_error(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not an image")
        with pytest.raises(FormatError):
            load_image(str(path))


class TestFloFormat:
    def test_layout_matches_reference_bytes(self, tmp_path):
        # 1x2 field with known components, laid out by hand.
        flow = FlowField(np.array([[[1.5, -2.0], [0.0, 3.25]]],
                                  dtype=np.float32))
        path = str(tmp_path / "a.flo")
        write_flo(path, flow)
        raw = open(path, "rb").read()
        expect = (np.float32(202021.25).tobytes()
                  + np.int32(2).tobytes() + np.int32(1).tobytes()
                  + np.array([1.5, -2.0, 0.0, 3.25],
                             dtype=np.float32).tobytes())
        assert raw == expect

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_bit_exact_with_nans(self, seed):
        rng = np.random.default_rng(seed)
        h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        uv = rng.normal(size=(h, w, 2)).astype(np.float32) * 10
        nan_mask = rng.uniform(size=(h, w)) < 0.2
        uv[nan_mask] = np.nan
        import tempfile, os
        fd, path = tempfile.mkstemp(suffix=".flo")
        os.close(fd)
        try:
            write_flo(path, FlowField(uv))
            back = read_flo(path)
            assert back.uv.tobytes() == uv.tobytes()
            np.testing.assert_array_equal(back.valid, ~nan_mask)
        finally:
            os.unlink(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(np.float32(1.0).tobytes()
                         + np.array([1, 1], dtype=np.int32).tobytes()
                         + np.zeros(2, dtype=np.float32).tobytes())
        with pytest.raises(FormatError):
            read_flo(str(path))

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.flo"
        path.write_bytes(np.float32(202021.25).tobytes()
                         + np.array([4, 4], dtype=np.int32).tobytes()
                         + np.zeros(5, dtype=np.float32).tobytes())
        with pytest.raises(FormatError):
            read_flo(str(path))

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "long.flo"
        path.write_bytes(np.float32(202021.25).tobytes()
                         + np.array([1, 1], dtype=np.int32).tobytes()
                         + np.zeros(3, dtype=np.float32).tobytes())
        with pytest.raises(FormatError):
            read_flo(str(path))


class TestSlic:
    def test_uniform_image_four_quadrants(self):
        img = np.full((64, 64, 3), 0.5)
        labels = slic_segment(img, 4)
        assert labels.min() == 0
        n = labels.max() + 1
        assert abs(n - 4) <= 1  # within the count tolerance
        sizes = np.bincount(labels.ravel())
        assert sizes.min() > 0.5 * sizes.max()  # near-equal cells

    def test_single_segment(self):
        img = np.full((16, 16, 3), 0.3)
        labels = slic_segment(img, 1)
        assert np.all(labels == 0)

    def test_two_tone_split_follows_edge(self):
        img = np.zeros((16, 16, 3))
        img[:, 8:] = 1.0
        labels = slic_segment(img, 2)
        assert labels.max() + 1 == 2
        # Every boundary between the two segments must hug column 7/8.
        change = labels[:, :-1] != labels[:, 1:]
        cols = np.nonzero(change)[1]
        assert np.all(np.abs(cols - 7) <= 1)

    def test_full_partition_and_connectivity(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(size=(48, 64, 3))
        labels = slic_segment(img, 30)
        n = labels.max() + 1
        assert set(np.unique(labels)) == set(range(n))
        assert 0.8 * 30 <= n <= 1.2 * 30
        from scipy import ndimage
        cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        for lab in range(n):
            _, ncc = ndimage.label(labels == lab, structure=cross)
            assert ncc == 1

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        img = rng.uniform(size=(32, 32, 3))
        a = slic_segment(img, 12)
        b = slic_segment(img, 12)
        np.testing.assert_array_equal(a, b)

    def test_invalid_target_rejected(self):
        img = np.zeros((8, 8, 3))
        with pytest.raises(InputError):
            slic_segment(img, 0)
        with pytest.raises(InputError):
            slic_segment(img, 65)


class TestFlowCorrespondences:
    def _superpixel(self, h=4, w=4):
        labels = np.zeros((h, w), dtype=int)
        return build_superpixels(labels, np.zeros((h, w, 3)))[0]

    def test_constant_flow_offsets_all_pixels(self):
        sp = self._superpixel()
        uv = np.zeros((4, 4, 2), dtype=np.float32)
        uv[..., 0] = 2.0
        uv[..., 1] = -1.0
        x, x2 = flow_correspondences(FlowField(uv), sp)
        np.testing.assert_allclose(x2 - x, [[2.0, -1.0]] * len(x))
        assert len(x) == sp.size

    def test_nan_pixels_are_dropped(self):
        sp = self._superpixel()
        uv = np.zeros((4, 4, 2), dtype=np.float32)
        uv[0, 0] = np.nan
        x, x2 = flow_correspondences(FlowField(uv), sp)
        assert len(x) == sp.size - 1
        assert not any(np.array_equal(p, [0, 0]) for p in x)

    def test_mostly_invalid_superpixel_rejected(self):
        sp = self._superpixel()
        uv = np.zeros((4, 4, 2), dtype=np.float32)
        uv[:2] = np.nan  # half the pixels plus one more below
        uv[2, 0] = np.nan
        with pytest.raises(DegenerateSuperpixelError):
            flow_correspondences(FlowField(uv), sp)

    def test_flow_field_validates_shape(self):
        with pytest.raises(InputError):
            FlowField(np.zeros((4, 4)))
