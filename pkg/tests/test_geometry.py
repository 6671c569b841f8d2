import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facadefixer.geometry import (
    BinaryMask,
    BoundingBox,
    DefectCategory,
    RasterImage,
    ShapeError,
    box_iou,
    clip_mask_to_boxes,
    dilate,
    mask_iou,
    mask_union,
    rle_decode,
    rle_encode,
    rle_from_string,
    rle_to_string,
)


def raster_iou(a, b):
    """Count integer-grid cells covered by each box."""
    cells_a = {(i, j) for i in range(a[0], a[0] + a[2]) for j in range(a[1], a[1] + a[3])}
    cells_b = {(i, j) for i in range(b[0], b[0] + b[2]) for j in range(b[1], b[1] + b[3])}
    return len(cells_a & cells_b) / len(cells_a | cells_b)


def grid_with(shape, pixels):
    g = np.zeros(shape, dtype=bool)
    for y, x in pixels:
        g[y, x] = True
    return g


class TestBoxIoU:
    def test_identity(self):
        b = BoundingBox(0, 0, 10, 10)
        assert box_iou(b, b) == 1.0

    def test_disjoint(self):
        assert box_iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 5, 5)) == 0.0

    def test_partial_overlap_matches_raster(self):
        expected = raster_iou((0, 0, 10, 10), (5, 5, 10, 10))
        assert expected == pytest.approx(25 / 175)
        assert box_iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 10, 10)) == pytest.approx(
            expected, abs=1e-12
        )

    def test_touching_edges_is_zero(self):
        assert box_iou(BoundingBox(0, 0, 10, 10), BoundingBox(10, 0, 10, 10)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(
        st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)),
        st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)),
    )
    def test_symmetric_and_matches_raster(self, a, b):
        ba, bb = BoundingBox(*a), BoundingBox(*b)
        assert box_iou(ba, bb) == box_iou(bb, ba)
        assert abs(box_iou(ba, bb) - raster_iou(a, b)) <= 1e-9

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(0, 0, 0, 5)


class TestRLE:
    def test_zeros_first_column_major(self):
        g = np.array([[1, 0], [1, 1]], dtype=bool)
        # column-major flatten: 1,1,0,1
        assert rle_encode(g) == (0, 2, 1, 1)

    def test_all_zero(self):
        assert BinaryMask.empty(3, 2).counts == (6,)

    def test_string_codec_hand_values(self):
        # small counts: no deltas for the first three, one char each
        assert rle_to_string((0, 2, 1)) == "021"
        # fourth count is delta-coded against the count two back: 5-2 = 3
        assert rle_to_string((0, 2, 1, 5)) == "0213"
        assert rle_from_string("0213") == (0, 2, 1, 5)
        # 37 needs two 5-bit groups: 37 = 5 + 1*32 -> chr(48+5|0x20), chr(48+1)
        assert rle_to_string((37,)) == chr(48 + (5 | 0x20)) + chr(49)

    def test_string_codec_negative_delta(self):
        counts = (3, 40, 7, 1, 900, 2)
        s = rle_to_string(counts)
        assert rle_from_string(s) == counts

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 256), st.integers(1, 256), st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_round_trip_random_grids(self, h, w, seed, density):
        rng = np.random.default_rng(seed)
        grid = rng.random((h, w)) < density
        counts = rle_encode(grid)
        assert sum(counts) == h * w
        assert np.array_equal(rle_decode(counts, w, h), grid)
        m = BinaryMask.from_array(grid)
        assert BinaryMask.from_rle(m.to_rle()) == m
        assert np.array_equal(m.array, grid)

    def test_bad_counts_rejected(self):
        with pytest.raises(ShapeError):
            BinaryMask(2, 2, (1, 1))

    def test_array_is_read_only(self):
        m = BinaryMask.from_array(np.eye(3, dtype=bool))
        with pytest.raises(ValueError):
            m.array[0, 0] = False


class TestMaskAlgebra:
    def test_union_single_is_identity(self):
        m = BinaryMask.from_array(grid_with((4, 4), [(1, 2)]))
        assert mask_union([m]) == m

    def test_union_with_zero(self):
        m = BinaryMask.from_array(grid_with((4, 4), [(1, 2), (3, 3)]))
        assert mask_union([m, BinaryMask.empty(4, 4)]) == m

    def test_union_disjoint_pixels(self):
        m1 = BinaryMask.from_array(grid_with((4, 4), [(0, 0)]))
        m2 = BinaryMask.from_array(grid_with((4, 4), [(3, 2)]))
        out = mask_union([m1, m2])
        oracle = [[m1.array[y, x] or m2.array[y, x] for x in range(4)] for y in range(4)]
        assert np.array_equal(out.array, np.array(oracle))
        assert out.area == 2

    def test_union_errors(self):
        with pytest.raises(ValueError):
            mask_union([])
        with pytest.raises(ShapeError):
            mask_union([BinaryMask.empty(4, 4), BinaryMask.empty(4, 5)])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_union_laws(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (BinaryMask.from_array(rng.random((9, 7)) < 0.3) for _ in range(3))
        assert mask_union([a, b]) == mask_union([b, a])
        assert mask_union([mask_union([a, b]), c]) == mask_union([a, mask_union([b, c])])
        assert mask_union([a, a]) == a

    def test_iou_cases(self):
        a = BinaryMask.from_array(grid_with((5, 5), [(1, 1), (1, 2), (2, 1), (2, 2)]))
        b = BinaryMask.from_array(grid_with((5, 5), [(1, 2), (1, 3), (2, 2), (2, 3)]))
        assert mask_iou(a, a) == 1.0
        assert mask_iou(a, b) == pytest.approx(2 / 6)
        far = BinaryMask.from_array(grid_with((5, 5), [(4, 4)]))
        assert mask_iou(a, far) == 0.0
        assert mask_iou(BinaryMask.empty(5, 5), BinaryMask.empty(5, 5)) == 1.0
        with pytest.raises(ShapeError):
            mask_iou(a, BinaryMask.empty(4, 5))


class TestClip:
    def test_inside_outside(self):
        m = BinaryMask.from_array(grid_with((10, 10), [(1, 1), (8, 8)]))
        out = clip_mask_to_boxes(m, [BoundingBox(0, 0, 5, 5)])
        assert out.array[1, 1] and not out.array[8, 8]

    def test_no_anchors(self):
        m = BinaryMask.from_array(np.ones((4, 4), dtype=bool))
        assert clip_mask_to_boxes(m, []).is_empty()

    def test_full_frame_anchor(self):
        m = BinaryMask.from_array(np.random.default_rng(1).random((6, 8)) < 0.5)
        assert clip_mask_to_boxes(m, [BoundingBox(0, 0, 8, 6)]) == m

    def test_out_of_bounds_anchor(self):
        with pytest.raises(ValueError):
            clip_mask_to_boxes(BinaryMask.empty(4, 4), [BoundingBox(2, 2, 5, 5)])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_subset(self, seed):
        rng = np.random.default_rng(seed)
        m = BinaryMask.from_array(rng.random((12, 12)) < 0.4)
        x, y = rng.integers(0, 8, size=2)
        out = clip_mask_to_boxes(m, [BoundingBox(int(x), int(y), 4, 4)])
        assert not np.any(out.array & ~m.array)


class TestDilate:
    def brute(self, grid, r):
        h, w = grid.shape
        out = np.zeros_like(grid)
        for y in range(h):
            for x in range(w):
                out[y, x] = grid[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1].any()
        return out

    def test_single_pixel_radius_one(self):
        m = BinaryMask.from_array(grid_with((5, 5), [(2, 2)]))
        out = dilate(m, 1)
        assert out.area == 9
        assert out.array[1:4, 1:4].all()

    @pytest.mark.parametrize("r", [0, 1, 2, 5])
    def test_matches_brute_force(self, r):
        grid = np.random.default_rng(r).random((11, 13)) < 0.1
        assert np.array_equal(dilate(BinaryMask.from_array(grid), r).array, self.brute(grid, r))


def test_category_parse():
    assert DefectCategory.parse("RustStain") is DefectCategory.RUST_STAIN
    assert DefectCategory.parse("degraded-plaster") is DefectCategory.DEGRADED_PLASTER
    assert DefectCategory.parse("CRACK") is DefectCategory.CRACK
    assert len(DefectCategory) == 6
    with pytest.raises(ValueError):
        DefectCategory.parse("window")


def test_raster_png_round_trip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, size=(7, 9, 3), dtype=np.uint8)
    img = RasterImage.from_array(px)
    assert RasterImage.from_png(img.to_png()) == img
    img.save(tmp_path / "a.png")
    assert RasterImage.load(tmp_path / "a.png") == img
    assert len(img.to_bytes()) == 7 * 9 * 3
    with pytest.raises(ShapeError):
        RasterImage.from_bytes(2, 2, b"\x00" * 11)
