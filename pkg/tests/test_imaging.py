from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapecpc import imaging
from shapecpc.imaging import GridSpec, GridSpecError, FULL_GRID, UnknownTextureError
from shapecpc.synth import SyntheticShapesSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(scope="module")
def shapes():
    images, _ = generate(SyntheticShapesSpec(images_per_class=5, texture_randomization=False, seed=11))
    return images


def checkerboard(n):
    cells = (np.add.outer(np.arange(n), np.arange(n)) % 2).astype(np.float32)
    return np.repeat(cells[..., None], 3, axis=2)


class TestResize:
    def test_identity(self, rng):
        img = rng.uniform(size=(224, 224, 3)).astype(np.float32)
        np.testing.assert_array_equal(imaging.resize(img, 224), img)

    @pytest.mark.parametrize("side", [1, 5, 17, 64])
    def test_constant(self, side):
        img = np.full((13, 9, 3), [0.2, 0.5, 0.9], dtype=np.float32)
        np.testing.assert_allclose(imaging.resize(img, side), np.full((side, side, 3), [0.2, 0.5, 0.9]), atol=1e-6)

    def test_checkerboard_to_2x2_hits_corners(self):
        # corner alignment: outputs sample source coords 0 and 3 exactly
        out = imaging.resize(checkerboard(4), 2)[..., 0]
        np.testing.assert_array_equal(out, [[0, 1], [1, 0]])

    def test_checkerboard_to_3x3_hand_weights(self):
        src = checkerboard(4)[..., 0].astype(np.float64)
        out = imaging.resize(checkerboard(4), 3)[..., 0]
        # source coords {0, 1.5, 3}; a half-way sample averages two neighbours
        expected = np.empty((3, 3))
        for a, y in enumerate([0.0, 1.5, 3.0]):
            for b, x in enumerate([0.0, 1.5, 3.0]):
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 3), min(x0 + 1, 3)
                fy, fx = y - y0, x - x0
                expected[a, b] = (
                    src[y0, x0] * (1 - fy) * (1 - fx)
                    + src[y0, x1] * (1 - fy) * fx
                    + src[y1, x0] * fy * (1 - fx)
                    + src[y1, x1] * fy * fx
                )
        np.testing.assert_allclose(out, expected, atol=1e-7)
        assert out[1, 1] == pytest.approx(0.5)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            imaging.resize(np.zeros((0, 4, 3)), 4)
        with pytest.raises(ValueError):
            imaging.resize(np.zeros((4, 4, 3)), 0)


class TestGrid:
    def test_full_grid(self, rng):
        img = rng.uniform(size=(224, 224, 3)).astype(np.float32)
        grid = imaging.extract_grid(img, FULL_GRID)
        assert FULL_GRID.grid_side == 7
        assert grid.patches.shape == (7, 7, 56, 56, 3)

    def test_overlap_is_half_patch(self, rng):
        img = rng.uniform(size=(224, 224, 3)).astype(np.float32)
        p = imaging.extract_grid(img, FULL_GRID).patches
        np.testing.assert_array_equal(p[0, 0][:, 28:], p[0, 1][:, :28])  # 56x28 shared
        np.testing.assert_array_equal(p[0, 0][28:, :], p[1, 0][:28, :])

    def test_single_patch(self, rng):
        img = rng.uniform(size=(56, 56, 3)).astype(np.float32)
        grid = imaging.extract_grid(img, GridSpec(56, 56, 28))
        assert grid.patches.shape == (1, 1, 56, 56, 3)
        np.testing.assert_array_equal(grid.patches[0, 0], img)

    def test_pixelwise_3x3(self, rng):
        img = rng.uniform(size=(112, 112, 3)).astype(np.float32)
        spec = GridSpec(112, 56, 28)
        grid = imaging.extract_grid(img, spec)
        assert spec.grid_side == 3 and grid.patches.shape[:2] == (3, 3)
        for i in range(3):
            for j in range(3):
                for y in range(56):
                    for x in range(0, 56, 5):
                        assert (grid.patches[i, j, y, x] == img[i * 28 + y, j * 28 + x]).all()

    def test_mismatch_and_invalid_specs(self, rng):
        with pytest.raises(GridSpecError):
            imaging.extract_grid(rng.uniform(size=(60, 60, 3)), GridSpec(64, 16, 8))
        with pytest.raises(GridSpecError, match="divisible"):
            GridSpec(100, 56, 28)
        with pytest.raises(GridSpecError, match="half overlap"):
            GridSpec(64, 16, 4)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 6))
    def test_grid_side_formula_and_lossless(self, half, steps):
        p, stride = 2 * half, half
        S = p + steps * stride
        spec = GridSpec(S, p, stride)
        s = spec.grid_side
        assert s == (S - p) // stride + 1
        img = np.random.default_rng(S).uniform(size=(S, S, 3)).astype(np.float32)
        grid = imaging.extract_grid(img, spec)
        total = np.zeros((S, S, 3))
        count = np.zeros((S, S, 1))
        for i in range(s):
            for j in range(s):
                rows, cols = spec.window(i, j)
                total[rows, cols] += grid.patches[i, j]
                count[rows, cols] += 1
        np.testing.assert_array_equal((total / count).astype(np.float32), img)


class TestTextures:
    def test_zero_blend_is_identity(self, shapes):
        t = replace(imaging.default_texture_bank()[0], blend=0.0)
        np.testing.assert_array_equal(imaging.apply_texture(shapes[0], t), shapes[0])

    def test_constant_gray_full_blend_is_pattern(self):
        gray = np.full((32, 32, 3), 0.37, dtype=np.float32)
        t = replace(imaging.default_texture_bank()[0], blend=1.0)
        field_ = imaging.pattern_field(t, 32, 32)[..., None]
        expected = np.clip(np.asarray(t.low) + (np.asarray(t.high) - np.asarray(t.low)) * field_, 0, 1)
        np.testing.assert_allclose(imaging.apply_texture(gray, t), expected, atol=1e-6)

    @pytest.mark.parametrize("t", imaging.default_texture_bank(), ids=lambda t: t.pattern)
    def test_changes_texture_keeps_edges(self, shapes, t):
        overlaps = []
        for img in shapes:
            out = imaging.apply_texture(img, t)
            assert out.shape == img.shape
            assert 0.0 <= out.min() and out.max() <= 1.0
            assert np.abs(out - img).mean() > 0.02
            before, after = imaging.edge_map(img, 0.2), imaging.edge_map(out, 0.2)
            overlaps.append((before & after).sum() / before.sum())
        assert np.mean(overlaps) >= 0.70

    def test_deterministic(self, shapes):
        bank = imaging.default_texture_bank()
        first = imaging.make_variants(shapes[3], bank)
        second = imaging.make_variants(shapes[3], bank)
        assert len(first) == 6
        assert all(a.tobytes() == b.tobytes() for a, b in zip(first, second))
        np.testing.assert_array_equal(first[0], shapes[3])

    def test_empty_bank(self, shapes):
        out = imaging.make_variants(shapes[0], [])
        assert len(out) == 1
        np.testing.assert_array_equal(out[0], shapes[0])

    def test_checker_commutes_with_flip_up_to_phase(self, shapes):
        t = imaging.default_texture_bank()[1]
        assert t.pattern == "checker" and t.period % 2 == 0
        img = shapes[2]
        flipped_after = imaging.apply_texture(img, t)[:, ::-1]
        shifted = replace(t, phase=(0, t.period))
        flipped_before = imaging.apply_texture(img[:, ::-1].copy(), shifted)
        np.testing.assert_allclose(flipped_after, flipped_before, atol=1e-6)

    def test_unknown_texture(self):
        bank = imaging.default_texture_bank()
        assert imaging.lookup_texture(bank, 3).pattern == "dots"
        with pytest.raises(UnknownTextureError):
            imaging.lookup_texture(bank, 9)
        with pytest.raises(ValueError):
            imaging.TextureTransform(1, "plaid")


class TestFormats:
    def test_imgf_round_trip(self, tmp_path, rng):
        img = rng.uniform(size=(5, 7, 3)).astype(np.float32)
        path = tmp_path / "x.imgf"
        imaging.write_imgf(path, img)
        raw = path.read_bytes()
        assert raw[:4] == b"IMGF" and len(raw) == 12 + 5 * 7 * 3 * 4
        assert int.from_bytes(raw[4:6], "little") == 5 and int.from_bytes(raw[6:8], "little") == 7
        np.testing.assert_array_equal(imaging.load_image(path), img)

    def test_imgf_truncated(self, tmp_path, rng):
        path = tmp_path / "x.imgf"
        imaging.write_imgf(path, rng.uniform(size=(4, 4, 3)))
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ValueError, match="payload"):
            imaging.read_imgf(path)

    def test_png(self, tmp_path, rng):
        img = rng.uniform(size=(6, 6, 3)).astype(np.float32)
        path = tmp_path / "x.png"
        imaging.write_png(path, img)
        np.testing.assert_allclose(imaging.load_image(path), img, atol=1 / 255)
