import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppkit.frames import (KB, KR, GeometryError, PlanarFrame420, RgbImage, SampleRangeError,
                          ShortFileError, aggregate_blocks, aggregate_planes, count_frames,
                          downsample_chroma, enhance_frame, extract_blocks, extract_planes,
                          frame_bytes, plan_blocks, read_yuv, rgb_to_ycbcr, rgb_to_ycbcr444,
                          upsample_chroma, write_yuv, ycbcr444_to_rgb, ycbcr_to_rgb)
from ppkit.models import GeneratorConfig, ModelBundle, build_generator


def random_frame(rng, w, h, bd):
    top = (1 << bd) - 1
    return PlanarFrame420(w, h, bd, rng.integers(0, top + 1, (h, w)),
                          rng.integers(0, top + 1, (h // 2, w // 2)),
                          rng.integers(0, top + 1, (h // 2, w // 2)))


def smooth_image(w, h, phase=0.0):
    yy, xx = np.mgrid[0:h, 0:w] / max(w, h)
    return RgbImage(np.stack([0.5 + 0.3 * np.sin(5 * xx + phase), 0.45 + 0.3 * np.cos(4 * yy),
                              0.5 + 0.25 * np.sin(3 * (xx + yy) + phase)]))


def counting_oracle(dim, block=96, overlap=4):
    """Walk the placement rule one pixel at a time."""
    starts, x = [], 0
    while True:
        if x + block >= dim:
            starts.append(dim - block)
            break
        starts.append(x)
        x += block - overlap
    return starts


class TestYuvIO:
    @pytest.mark.parametrize("bd", [8, 10])
    def test_tiny_round_trip(self, tmp_path, rng, bd):
        f = random_frame(rng, 4, 4, bd)
        path = tmp_path / "a.yuv"
        write_yuv(path, f)
        assert path.stat().st_size == 24 * (bd // 8 if bd == 8 else 2)
        assert read_yuv(path, 4, 4, bd) == f
        raw = path.read_bytes()
        write_yuv(tmp_path / "b.yuv", read_yuv(path, 4, 4, bd))
        assert (tmp_path / "b.yuv").read_bytes() == raw

    def test_multi_frame_byte_exact(self, tmp_path, rng):
        frames = [random_frame(rng, 8, 6, 10) for _ in range(3)]
        path = tmp_path / "s.yuv"
        write_yuv(path, frames)
        assert count_frames(path, 8, 6, 10) == 3
        assert read_yuv(path, 8, 6, 10, 2) == frames[2]
        out = tmp_path / "t.yuv"
        for i in range(3):
            write_yuv(out, read_yuv(path, 8, 6, 10, i), append=i > 0)
        assert out.read_bytes() == path.read_bytes()

    def test_ten_bit_layout(self, tmp_path):
        y = np.array([[1023, 1], [256, 0]])
        f = PlanarFrame420(2, 2, 10, y, np.array([[512]]), np.array([[3]]))
        write_yuv(tmp_path / "x.yuv", f)
        assert (tmp_path / "x.yuv").read_bytes() == bytes([0xFF, 0x03, 1, 0, 0, 1, 0, 0, 0, 2, 3, 0])

    def test_past_eof(self, tmp_path, rng):
        write_yuv(tmp_path / "a.yuv", random_frame(rng, 4, 4, 8))
        with pytest.raises(ShortFileError):
            read_yuv(tmp_path / "a.yuv", 4, 4, 8, frame_index=1)
        (tmp_path / "b.yuv").write_bytes(b"\0" * 23)
        with pytest.raises(ShortFileError):
            read_yuv(tmp_path / "b.yuv", 4, 4, 8)

    def test_sample_1024_rejected(self, tmp_path):
        raw = np.full(24, 100, dtype="<u2")
        raw[5] = 1024
        (tmp_path / "bad.yuv").write_bytes(raw.tobytes())
        with pytest.raises(SampleRangeError):
            read_yuv(tmp_path / "bad.yuv", 4, 4, 10)

    def test_odd_dimensions(self, tmp_path):
        with pytest.raises(GeometryError):
            read_yuv(tmp_path / "none.yuv", 5, 4, 8)
        with pytest.raises(GeometryError):
            frame_bytes(4, 4, 12)

    def test_plane_shape_checked(self):
        with pytest.raises(GeometryError):
            PlanarFrame420(4, 4, 8, np.zeros((4, 4), int), np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_error_kinds_distinct(self):
        assert len({GeometryError, ShortFileError, SampleRangeError}) == 3
        assert not issubclass(ShortFileError, GeometryError)
        assert not issubclass(SampleRangeError, GeometryError)


class TestColor:
    def test_white_and_black_points(self):
        out = ycbcr444_to_rgb(np.array([[940, 64]]), np.array([[512, 512]]), np.array([[512, 512]]), 10)
        assert np.array_equal(out.data[:, 0, 0], [1.0, 1.0, 1.0])
        assert np.array_equal(out.data[:, 0, 1], [0.0, 0.0, 0.0])
        out8 = ycbcr444_to_rgb(np.array([[235, 16]]), np.array([[128, 128]]), np.array([[128, 128]]), 8)
        assert np.array_equal(out8.data[:, 0, :], [[1.0, 0.0]] * 3)

    def test_primaries(self):
        # Pure red: Y = KR, Cr = 0.5 -> Cr code 128 + 224 * 0.5 = 240 (8-bit).
        y, cb, cr = rgb_to_ycbcr444(RgbImage(np.array([1.0, 0, 0]).reshape(3, 1, 1)), 8)
        assert int(y[0, 0]) == round(16 + 219 * KR)
        assert int(cr[0, 0]) == 240
        assert int(cb[0, 0]) == round(128 - 224 * KR / (2 * (1 - KB)))

    @staticmethod
    def quantization_bound(bit_depth):
        """Worst-case RGB error from rounding Y, Cb, Cr to integer codes."""
        s = 1 << (bit_depth - 8)
        ey, ec = 0.5 / (219 * s), 0.5 / (224 * s)
        kg = 1 - KR - KB
        return max(ey + 2 * (1 - KR) * ec, ey + 2 * (1 - KB) * ec,
                   ey + (2 * KB * (1 - KB) / kg + 2 * KR * (1 - KR) / kg) * ec)

    @pytest.mark.parametrize("bd", [8, 10])
    def test_444_round_trip(self, rng, bd):
        img = RgbImage(rng.uniform(size=(3, 40, 40)))
        back = ycbcr444_to_rgb(*rgb_to_ycbcr444(img, bd), bd)
        err = np.abs(back.data - img.data).max()
        assert err <= self.quantization_bound(bd) + 1e-12
        if bd == 10:
            assert err <= 2 / 1023

    def test_constant_chroma_survives_subsampling(self, rng):
        f = PlanarFrame420(8, 8, 10, rng.integers(300, 700, (8, 8)), np.full((4, 4), 500), np.full((4, 4), 530))
        assert rgb_to_ycbcr(ycbcr_to_rgb(f), 10) == f

    def test_resampling(self):
        p = np.arange(6.0).reshape(2, 3)
        up = upsample_chroma(p)
        assert up.shape == (4, 6) and np.array_equal(downsample_chroma(up), p)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**20), bd=st.sampled_from([8, 10]))
    def test_outputs_legal(self, seed, bd):
        r = np.random.default_rng(seed)
        f = random_frame(r, 6, 4, bd)
        rgb = ycbcr_to_rgb(f)
        assert rgb.data.min() >= 0 and rgb.data.max() <= 1
        g = rgb_to_ycbcr(RgbImage(r.uniform(-0.5, 1.5, size=(3, 4, 6))), bd)
        assert all(p.max() <= (1 << bd) - 1 for p in g.planes())

    def test_rgb_clamped(self):
        assert RgbImage(np.full((3, 2, 2), 7.0)).data.max() == 1.0


class TestTiling:
    def test_single_block(self):
        g = plan_blocks(96, 96)
        assert g.positions == [(0, 0)]

    def test_100(self):
        g = plan_blocks(100, 100)
        assert g.xs == (0, 4) and g.ys == (0, 4) and len(g) == 4

    def test_1080p(self):
        g = plan_blocks(1920, 1080)
        assert list(g.xs) == counting_oracle(1920) and list(g.ys) == counting_oracle(1080)
        assert (len(g.xs), len(g.ys), len(g)) == (21, 12, 252)

    def test_too_small(self):
        with pytest.raises(ValueError):
            plan_blocks(95, 200)

    @settings(max_examples=40, deadline=None)
    @given(w=st.integers(96, 700), h=st.integers(96, 400))
    def test_coverage_matches_counting_oracle(self, w, h):
        g = plan_blocks(w, h)
        assert list(g.xs) == counting_oracle(w) and list(g.ys) == counting_oracle(h)
        expect = np.zeros((h, w), int)
        for y0 in counting_oracle(h):
            for x0 in counting_oracle(w):
                expect[y0 : y0 + 96, x0 : x0 + 96] += 1
        cov = g.coverage()
        assert np.array_equal(cov, expect) and cov.min() >= 1

    def test_regular_seams_overlap_by_four(self):
        w = 96 + 3 * 92
        cov = plan_blocks(w, 96).coverage()[0]
        doubled = np.flatnonzero(cov == 2)
        assert len(doubled) == 3 * 4 and cov.max() == 2
        assert list(doubled[:4]) == [92, 93, 94, 95]

    def test_all_half_is_zero(self):
        img = RgbImage(np.full((3, 100, 120), 0.5))
        blocks = extract_blocks(img, plan_blocks(120, 100))
        assert blocks.shape == (4, 3, 96, 96) and not blocks.any()

    def test_single_block_extract(self, rng):
        img = RgbImage(rng.uniform(size=(3, 96, 96)))
        np.testing.assert_array_equal(extract_blocks(img, plan_blocks(96, 96))[0], 2 * img.data - 1)

    def test_grid_mismatch(self, rng):
        img = RgbImage(rng.uniform(size=(3, 100, 100)))
        with pytest.raises(ValueError):
            extract_blocks(img, plan_blocks(96, 96))
        with pytest.raises(ValueError):
            aggregate_blocks(np.zeros((3, 3, 96, 96)), plan_blocks(100, 100), 100, 100)

    @settings(max_examples=25, deadline=None)
    @given(w=st.integers(96, 300), h=st.integers(96, 250), seed=st.integers(0, 2**20))
    def test_identity_round_trip_exact(self, w, h, seed):
        r = np.random.default_rng(seed)
        g = plan_blocks(w, h)
        planes = r.uniform(-1, 1, size=(3, h, w))
        assert np.array_equal(aggregate_planes(extract_planes(planes, g), g), planes)
        # RGB path: values on a 2^-20 grid are carried exactly through 2v - 1.
        img = RgbImage(r.integers(0, 2**20 + 1, size=(3, h, w)) / 2.0**20)
        assert np.array_equal(aggregate_blocks(extract_blocks(img, g), g, w, h).data, img.data)

    def test_overlap_is_mean(self):
        g = plan_blocks(100, 96)
        blocks = np.empty((2, 1, 96, 96))
        blocks[0], blocks[1] = 0.25, -0.5
        out = aggregate_planes(blocks, g)[0]
        assert np.all(out[:, :4] == 0.25) and np.all(out[:, 96:] == -0.5)
        assert np.all(out[:, 4:96] == (0.25 + -0.5) / 2)

    def test_random_mean_oracle(self, rng):
        g = plan_blocks(200, 110)
        blocks = rng.normal(size=(len(g), 2, 96, 96))
        total = np.zeros((2, 110, 200))
        for blk, (x, y) in zip(blocks, g.positions):
            total[:, y : y + 96, x : x + 96] += blk
        np.testing.assert_allclose(aggregate_planes(blocks, g), total / g.coverage(), rtol=1e-13, atol=1e-15)


class TestEnhance:
    @pytest.mark.parametrize("bd", [8, 10])
    def test_identity_network(self, bd):
        f = rgb_to_ycbcr(smooth_image(240, 136), bd)
        out = enhance_frame(lambda blocks: blocks, f)
        assert (out.width, out.height, out.bit_depth) == (240, 136, bd)
        for a, b in zip(f.planes(), out.planes()):
            assert np.abs(a.astype(int) - b.astype(int)).max() <= 2

    def test_zeroed_generator_is_tanh(self):
        cfg = GeneratorConfig(num_residual_blocks=1, feature_width=4)
        g = build_generator(cfg, seed=0, dtype=np.float64)
        for name in g.params:
            if ".conv2." in name or name.startswith("output.conv."):
                g.params.set(name, np.zeros(g.params[name].shape))
        f = rgb_to_ycbcr(smooth_image(100, 100), 10)
        out = enhance_frame(g, f)
        rgb = ycbcr_to_rgb(f).data
        expect = rgb_to_ycbcr(RgbImage((np.tanh(2 * rgb - 1) + 1) / 2), 10)
        assert out == expect

    def test_bundle_deterministic_and_workers(self, rng):
        cfg = GeneratorConfig(num_residual_blocks=1, feature_width=4)
        bundle = ModelBundle("VVC", "QP37", "l1", cfg, build_generator(cfg, seed=3).params)
        f = random_frame(rng, 196, 100, 10)
        a = enhance_frame(bundle, f, batch_size=2)
        b = enhance_frame(bundle, f, batch_size=2)
        c = enhance_frame(bundle, f, batch_size=1, workers=3)
        assert a == b == c
        assert all(p.max() <= 1023 for p in a.planes())

    def test_too_small_frame(self, rng):
        with pytest.raises(ValueError):
            enhance_frame(lambda b: b, random_frame(rng, 64, 64, 8))
