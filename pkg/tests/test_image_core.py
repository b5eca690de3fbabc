import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from texsr.errors import (
    MalformedHeaderError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedBitDepthError,
)
from texsr.image_core import (
    PatchGrid,
    assemble_patches,
    bicubic_resize,
    degrade,
    extract_patches,
    load_image,
    load_tensor,
    save_image,
    save_tensor,
)

from oracles import reference_bicubic


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

class TestPgmIO:
    def test_load_8bit_scaling(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
        img = load_image(p)
        np.testing.assert_array_equal(
            img, np.array([[0.0, 1.0], [128 / 255, 64 / 255]]))

    def test_load_16bit_fullscale(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n" + (65535).to_bytes(2, "big"))
        assert load_image(p) == np.array([[1.0]])

    def test_load_16bit_big_endian(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n" + (258).to_bytes(2, "big"))
        assert load_image(p)[0, 0] == 258 / 65535

    def test_empty_file_is_malformed(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"")
        with pytest.raises(MalformedHeaderError):
            load_image(p)

    def test_ascii_pgm_rejected(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(MalformedHeaderError):
            load_image(p)

    def test_comment_in_header(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n# a comment\n1 1\n255\n\x10")
        assert load_image(p)[0, 0] == 16 / 255

    def test_oversized_maxval(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n1 1\n70000\n\x00\x00\x00")
        with pytest.raises(UnsupportedBitDepthError):
            load_image(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n2 2\n255\n\x00\x01")
        with pytest.raises(TruncatedPayloadError):
            load_image(p)

    def test_save_rounds_half_up(self, tmp_path):
        p = tmp_path / "a.pgm"
        save_image(np.array([[0.5]]), p)
        assert p.read_bytes()[-1] == 128

    def test_save_clamps(self, tmp_path):
        p = tmp_path / "a.pgm"
        save_image(np.array([[1.2, -0.3]]), p)
        assert list(p.read_bytes()[-2:]) == [255, 0]

    @pytest.mark.parametrize("bit_depth,step", [(8, 1 / 255), (16, 1 / 65535)])
    def test_roundtrip_error_bound(self, tmp_path, bit_depth, step):
        rng = np.random.default_rng(7)
        img = rng.random((9, 13))
        p = tmp_path / "a.pgm"
        save_image(img, p, bit_depth=bit_depth)
        back = load_image(p)
        assert np.abs(back - img).max() <= step


# ---------------------------------------------------------------------------
# Tensor container
# ---------------------------------------------------------------------------

class TestTensorIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((3, 4, 5)).astype(np.float32)
        p = tmp_path / "t.sttf"
        save_tensor(arr, p)
        np.testing.assert_array_equal(load_tensor(p), arr)

    def test_truncated_tensor(self, tmp_path):
        arr = np.ones((4, 4), dtype=np.float32)
        p = tmp_path / "t.sttf"
        save_tensor(arr, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(TruncatedPayloadError):
            load_tensor(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.sttf"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(MalformedHeaderError):
            load_tensor(p)

    def test_image_from_tensor_must_be_finite(self, tmp_path):
        from texsr.errors import DataError
        arr = np.full((3, 3), np.inf, dtype=np.float32)
        p = tmp_path / "t.sttf"
        save_tensor(arr, p)
        with pytest.raises(DataError):
            load_image(p)
        ok = np.random.default_rng(0).random((3, 3)).astype(np.float32)
        save_tensor(ok, p)
        np.testing.assert_allclose(load_image(p), ok, atol=1e-7)


# ---------------------------------------------------------------------------
# Bicubic resize
# ---------------------------------------------------------------------------

class TestBicubic:
    @pytest.mark.parametrize("scale", [0.25, 0.5, 1.0, 2.0, 4.0])
    def test_constant_preserved(self, scale):
        img = np.full((16, 12), 0.37)
        out = bicubic_resize(img, scale)
        assert np.abs(out - 0.37).max() < 1e-13

    def test_scale_one_identity(self):
        img = np.random.default_rng(3).random((11, 7))
        np.testing.assert_array_equal(bicubic_resize(img, 1.0), img)

    def test_ramp_down_up_recovers_interior(self):
        # Cubic kernels reproduce degree-1 polynomials, so down-up restores
        # the ramp wherever no clamped border tap is referenced. The 4-tap
        # kernel reads one sample past the right edge at the second-to-last
        # pixel, so the clean zone is [2:-3] per axis.
        r = np.arange(16)
        ramp = (r[:, None] + 2.0 * r[None, :]) / 48.0
        down_up = bicubic_resize(bicubic_resize(ramp, 0.5), 2.0)
        err = np.abs(down_up - ramp)[2:-3, 2:-3]
        assert err.max() < 1e-6

    @pytest.mark.parametrize("scale", [0.5, 2.0, 0.75])
    def test_matches_direct_kernel_oracle(self, scale):
        img = np.random.default_rng(11).random((12, 10))
        mine = bicubic_resize(img, scale)
        ref = reference_bicubic(img, scale)
        assert mine.shape == ref.shape
        assert np.abs(mine - ref).max() < 1e-12

    def test_output_dims_rounding(self):
        assert bicubic_resize(np.zeros((10, 10)), 0.25).shape == (3, 3)
        assert bicubic_resize(np.zeros((64, 48)), 0.25).shape == (16, 12)

    def test_bad_scale(self):
        with pytest.raises(ShapeError):
            bicubic_resize(np.zeros((4, 4)), -1.0)


class TestDegrade:
    def test_constant(self):
        lr, lr_up = degrade(np.full((8, 8), 0.6), 2)
        assert np.abs(lr - 0.6).max() < 1e-13
        assert np.abs(lr_up - 0.6).max() < 1e-13

    def test_dims_64_by_4(self):
        lr, lr_up = degrade(np.zeros((64, 64)), 4)
        assert lr.shape == (16, 16)
        assert lr_up.shape == (64, 64)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            degrade(np.zeros((9, 8)), 4)

    def test_idempotence_on_smooth_images(self):
        from scipy.ndimage import gaussian_filter
        rng = np.random.default_rng(5)
        img = gaussian_filter(rng.random((64, 64)), sigma=3.0)
        _, lr_up = degrade(img, 4)
        _, lr_up2 = degrade(lr_up, 4)
        rms = np.sqrt(np.mean((lr_up2 - lr_up) ** 2))
        assert rms < 0.02


# ---------------------------------------------------------------------------
# Patch extraction / assembly
# ---------------------------------------------------------------------------

class TestPatches:
    def test_count_4x4(self):
        fm = np.arange(16, dtype=float).reshape(1, 4, 4)
        grid = PatchGrid.for_shape(4, 4)
        assert extract_patches(fm, grid).shape == (4, 1, 3, 3)

    def test_single_patch_is_map(self):
        fm = np.random.default_rng(0).random((1, 3, 3))
        grid = PatchGrid.for_shape(3, 3)
        patches = extract_patches(fm, grid)
        assert patches.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(patches[0], fm)

    def test_multichannel_count(self):
        fm = np.zeros((2, 5, 5))
        grid = PatchGrid.for_shape(5, 5)
        patches = extract_patches(fm, grid)
        assert patches.shape == (9, 2, 3, 3)
        assert patches[0].size == 18

    def test_patch_too_large(self):
        with pytest.raises(ShapeError):
            PatchGrid.for_shape(2, 2, patch_size=3)

    def test_assemble_single_patch(self):
        patch = np.random.default_rng(2).random((1, 1, 3, 3))
        grid = PatchGrid.for_shape(3, 3)
        np.testing.assert_array_equal(
            assemble_patches(patch, grid, (1, 3, 3)), patch[0])

    def test_two_patch_overlap_average(self):
        grid = PatchGrid.for_shape(3, 4)
        patches = np.stack([np.full((1, 3, 3), 1.0), np.full((1, 3, 3), 3.0)])
        out = assemble_patches(patches, grid, (1, 3, 4))
        np.testing.assert_array_equal(out[0, :, 0], np.full(3, 1.0))
        np.testing.assert_array_equal(out[0, :, 1], np.full(3, 2.0))
        np.testing.assert_array_equal(out[0, :, 2], np.full(3, 2.0))
        np.testing.assert_array_equal(out[0, :, 3], np.full(3, 3.0))

    def test_count_mismatch(self):
        grid = PatchGrid.for_shape(4, 4)
        with pytest.raises(ShapeError):
            assemble_patches(np.zeros((3, 1, 3, 3)), grid, (1, 4, 4))

    @settings(max_examples=40, deadline=None)
    @given(
        c=st.integers(1, 3),
        h=st.integers(3, 9),
        w=st.integers(3, 9),
        seed=st.integers(0, 2 ** 31),
    )
    def test_extract_assemble_identity(self, c, h, w, seed):
        fm = np.random.default_rng(seed).standard_normal((c, h, w))
        grid = PatchGrid.for_shape(h, w)
        back = assemble_patches(extract_patches(fm, grid), grid, fm.shape)
        np.testing.assert_array_equal(back, fm)
