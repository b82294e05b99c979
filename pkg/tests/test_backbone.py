import numpy as np
import pytest

from hareid import autodiff as ad
from hareid import backbone, formats
from hareid.errors import ConfigError, FormatError, ShapeError


def stack_shape_oracle(h, w, layers, kernel, stride, pool, channels):
    # Independent recurrence: valid conv then ceil-mode 2x2 pool per layer.
    for _ in range(layers):
        h = (h - kernel) // stride + 1
        w = (w - kernel) // stride + 1
        if h < 1 or w < 1:
            return None
        if pool:
            h = -(-h // 2)
            w = -(-w // 2)
    return (h, w, channels)


class TestConvStack:
    def test_default_16x16_lands_on_2x2x32(self):
        cfg = backbone.ConvStackConfig()
        assert stack_shape_oracle(16, 16, 3, 2, 1, True, 32) == (2, 2, 32)
        assert cfg.output_shape(16, 16) == (2, 2, 32)
        params = backbone.ConvStackParams.init(cfg, np.random.default_rng(0))
        amap = backbone.conv_forward(np.random.default_rng(1).uniform(size=(16, 16, 1)), params)
        assert amap.shape == (2, 2, 32)
        assert amap.provenance == "conv"

    def test_shape_matches_oracle_across_configs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            layers = int(rng.integers(1, 4))
            kernel = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pool = bool(rng.integers(0, 2))
            channels = int(rng.integers(1, 5))
            size = int(rng.integers(6, 20))
            expected = stack_shape_oracle(size, size, layers, kernel, stride, pool, channels)
            cfg = backbone.ConvStackConfig(layers=layers, kernel=kernel, channels=channels,
                                           stride=stride, pool=pool)
            if expected is None:
                with pytest.raises(ConfigError):
                    cfg.output_shape(size, size)
                continue
            assert cfg.output_shape(size, size) == expected
            params = backbone.ConvStackParams.init(cfg, rng)
            amap = backbone.conv_forward(rng.uniform(size=(size, size, 1)), params)
            assert amap.shape == expected

    def test_zero_image_zero_bias_gives_zero_map(self):
        cfg = backbone.ConvStackConfig(layers=2, channels=3)
        params = backbone.ConvStackParams.init(cfg, np.random.default_rng(3))
        amap = backbone.conv_forward(np.zeros((10, 10, 1)), params)
        np.testing.assert_array_equal(amap.tensor.data, 0.0)

    def test_identity_one_by_one_kernel_passthrough(self):
        cfg = backbone.ConvStackConfig(layers=1, kernel=1, channels=1, pool=False)
        params = backbone.ConvStackParams.init(cfg, np.random.default_rng(4))
        params.kernels[0].data[:] = 1.0
        params.biases[0].data[:] = 0.0
        image = np.random.default_rng(5).uniform(size=(5, 4, 1))  # nonnegative, ReLU-safe
        amap = backbone.conv_forward(image, params)
        np.testing.assert_allclose(amap.tensor.data, image, atol=1e-15)

    def test_channel_mismatch(self):
        cfg = backbone.ConvStackConfig(layers=1)
        params = backbone.ConvStackParams.init(cfg, np.random.default_rng(6))
        with pytest.raises(ShapeError):
            backbone.conv_forward(np.zeros((8, 8, 3)), params)

    def test_gradients_match_finite_differences_on_8x8(self):
        cfg = backbone.ConvStackConfig(layers=2, kernel=2, channels=2)
        params = backbone.ConvStackParams.init(cfg, np.random.default_rng(7))
        image = np.random.default_rng(8).uniform(-1, 1, size=(8, 8, 1))

        def f():
            amap = backbone.conv_forward(image, params)
            return ad.softmax_cross_entropy(ad.global_average_pool(amap.tensor), 1)

        err = ad.grad_check(f, list(params.named().values()))
        assert err < 1e-4


class TestDescriptors:
    def test_single_location_map(self):
        amap = backbone.from_descriptors(np.arange(6.0), 1, 1)
        descs = backbone.to_descriptors(amap)
        assert len(descs) == 1
        np.testing.assert_array_equal(descs[0], np.arange(6.0))

    def test_row_major_order(self):
        amap = backbone.ActivationMap(ad.constant(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)))
        descs = backbone.to_descriptors(amap)
        np.testing.assert_array_equal(np.concatenate(descs), [1.0, 2.0, 3.0, 4.0])

    def test_round_trip(self):
        rng = np.random.default_rng(9)
        arr = rng.uniform(size=(3, 4, 5))
        amap = backbone.ActivationMap(ad.constant(arr))
        back = backbone.from_descriptors(np.stack(backbone.to_descriptors(amap)), 3, 4)
        np.testing.assert_array_equal(back.tensor.data, arr)


class TestDesc1Format:
    def test_small_file(self, tmp_path):
        path = tmp_path / "two.desc"
        maps = [np.arange(4.0).reshape(1, 1, 4), np.arange(4.0, 8.0).reshape(1, 1, 4)]
        backbone.write_descriptors(path, maps)
        loaded = backbone.load_descriptors(path)
        assert len(loaded) == 2
        assert loaded[0].shape == (1, 1, 4)
        assert loaded[0].provenance == "ingested"
        assert not loaded[0].tensor.requires_grad
        np.testing.assert_array_equal(loaded[1].tensor.data, maps[1])

    def test_round_trip_is_identity_at_f32(self, tmp_path):
        rng = np.random.default_rng(10)
        maps = [rng.uniform(-2, 2, size=(2, 3, 4)).astype(np.float32).astype(np.float64)
                for _ in range(5)]
        path = tmp_path / "rt.desc"
        backbone.write_descriptors(path, maps)
        loaded = backbone.load_descriptors(path)
        for orig, got in zip(maps, loaded):
            np.testing.assert_array_equal(got.tensor.data, orig)

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        path = tmp_path / "trunc.desc"
        backbone.write_descriptors(path, [np.ones((1, 1, 4))])
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(FormatError, match=r"expected 16 payload bytes, got 12"):
            backbone.load_descriptors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.desc"
        path.write_bytes(b"NOPE!\n" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            backbone.load_descriptors(path)

    def test_zero_dimension_rejected(self, tmp_path):
        import struct
        path = tmp_path / "zdim.desc"
        path.write_bytes(formats.DESC_MAGIC + struct.pack("<4I", 1, 0, 1, 4))
        with pytest.raises(FormatError, match="non-positive"):
            backbone.load_descriptors(path)


class TestImages:
    def test_pgm_p2_round_trip(self, tmp_path):
        grid = np.array([[0, 128], [255, 64]], dtype=np.uint8)
        path = tmp_path / "img.pgm"
        formats.write_pgm(path, grid)
        img = formats.read_image(path)
        assert img.shape == (2, 2, 1)
        np.testing.assert_allclose(img[:, :, 0] * 255.0, grid, atol=1e-12)

    def test_pgm_p5_binary(self, tmp_path):
        path = tmp_path / "img5.pgm"
        path.write_bytes(b"P5\n# comment\n3 2\n255\n" + bytes([0, 10, 20, 30, 40, 255]))
        img = formats.read_image(path)
        assert img.shape == (2, 3, 1)
        assert img[1, 2, 0] == pytest.approx(1.0)

    def test_ppm_p6(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n2 1\n255\n" + bytes([255, 0, 0, 0, 255, 0]))
        img = formats.read_image(path)
        assert img.shape == (1, 2, 3)
        np.testing.assert_allclose(img[0, 0], [1.0, 0.0, 0.0])

    def test_16bit_rejected(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError, match="8-bit"):
            formats.read_image(path)


class TestAttentionExport:
    def test_uniform_map_is_all_255(self):
        pixels = formats.attention_to_pixels(np.full((3, 3), 0.25))
        np.testing.assert_array_equal(pixels, np.full((3, 3), 255, dtype=np.uint8))

    def test_single_cell_is_255(self):
        pixels = formats.attention_to_pixels(np.array([[1.0]]))
        np.testing.assert_array_equal(pixels, [[255]])

    def test_linear_rescale(self):
        pixels = formats.attention_to_pixels(np.array([[0.0, 0.5, 1.0]]))
        np.testing.assert_array_equal(pixels, [[0, 128, 255]])
