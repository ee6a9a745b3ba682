import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deocc.errors import PlacementError, ValidationError
from deocc.scene import (BinaryMask, RasterImage, composite, derive_visible_masks,
                         mask_algebra, mask_dilate, mask_intersect, mask_subtract,
                         mask_union)
from conftest import square_object


def zbuffer_oracle(objects, background, size):
    """Brute-force per-pixel painter: highest-rank opaque object wins."""
    h, w = size
    out = np.empty((h, w, 3))
    out[:] = background
    for y in range(h):
        for x in range(w):
            best = None
            for o in objects:
                if o.amodal_rgba.array[y, x, 3] > 0.5:
                    if best is None or o.stack_rank > best.stack_rank:
                        best = o
            if best is not None:
                out[y, x] = best.amodal_rgba.array[y, x, :3]
    return out


def visible_oracle(objects, size):
    """Per-pixel argmax of stack rank over amodal supports."""
    h, w = size
    out = {o.object_id: np.zeros((h, w), dtype=bool) for o in objects}
    for y in range(h):
        for x in range(w):
            best = None
            for o in objects:
                if o.amodal_rgba.array[y, x, 3] > 0.5:
                    if best is None or o.stack_rank > best.stack_rank:
                        best = o
            if best is not None:
                out[best.object_id][y, x] = True
    return out


class TestComposite:
    def test_zero_objects_gives_background(self):
        bg = (0.25, 0.5, 0.75)
        img = composite([], bg, (16, 16))
        assert np.allclose(img.array, np.array(bg))

    def test_single_sprite_pastes_at_placement(self):
        obj = square_object(1, 1, 3, 4, 5, (1.0, 0.0, 0.0))
        img = composite([obj], (0.0, 0.0, 0.0), (16, 16))
        assert np.array_equal(img.array, zbuffer_oracle([obj], (0, 0, 0), (16, 16)))

    def test_two_overlapping_squares_match_zbuffer(self):
        a = square_object(1, 1, 2, 2, 8, (1.0, 0.0, 0.0))
        b = square_object(2, 2, 6, 6, 8, (0.0, 1.0, 0.0))
        img = composite([a, b], (0.1, 0.1, 0.1), (16, 16))
        oracle = zbuffer_oracle([a, b], (0.1, 0.1, 0.1), (16, 16))
        assert np.array_equal(img.array, oracle)
        # overlap takes rank-2 color
        assert np.allclose(img.array[7, 7], (0.0, 1.0, 0.0))

    def test_order_independent_under_permutation(self):
        objs = [square_object(i + 1, r, 2 * i, 2 * i, 6, (i / 4, 0.3, 0.6))
                for i, r in enumerate([2, 3, 1, 4])]
        ref = composite(objs, (0, 0, 0), (16, 16))
        perm = [objs[2], objs[0], objs[3], objs[1]]
        assert np.array_equal(composite(perm, (0, 0, 0), (16, 16)).array, ref.array)

    def test_oversized_raster_is_placement_error(self):
        obj = square_object(1, 1, 0, 0, 4, (1, 1, 1), canvas=32)
        with pytest.raises(PlacementError):
            composite([obj], (0, 0, 0), (16, 16))


class TestVisibleMasks:
    def test_disjoint_sprites_visible_equals_amodal(self):
        a = square_object(1, 1, 1, 1, 4, (1, 0, 0))
        b = square_object(2, 2, 9, 9, 4, (0, 1, 0))
        vis = derive_visible_masks([a, b])
        assert np.array_equal(vis[1].array, a.amodal_mask().array)
        assert np.array_equal(vis[2].array, b.amodal_mask().array)

    def test_full_cover_gives_empty_visible(self):
        a = square_object(1, 1, 4, 4, 4, (1, 0, 0))
        b = square_object(2, 2, 3, 3, 7, (0, 1, 0))
        vis = derive_visible_masks([a, b])
        assert vis[1].empty()
        assert not vis[2].empty()

    def test_three_sprite_scene_matches_rank_argmax_oracle(self):
        objs = [
            square_object(1, 1, 2, 2, 8, (1, 0, 0)),
            square_object(2, 3, 5, 5, 8, (0, 1, 0)),
            square_object(3, 2, 4, 1, 6, (0, 0, 1)),
        ]
        vis = derive_visible_masks(objs)
        oracle = visible_oracle(objs, (16, 16))
        for oid in (1, 2, 3):
            assert np.array_equal(vis[oid].array, oracle[oid])

    def test_duplicate_rank_rejected(self):
        a = square_object(1, 1, 1, 1, 4, (1, 0, 0))
        b = square_object(2, 1, 9, 9, 4, (0, 1, 0))
        with pytest.raises(ValidationError):
            derive_visible_masks([a, b])


class TestMaskAlgebra:
    def test_union_with_empty_is_identity(self):
        a = BinaryMask(np.eye(8, dtype=bool))
        empty = BinaryMask(np.zeros((8, 8), dtype=bool))
        assert np.array_equal(mask_union(a, empty).array, a.array)

    def test_intersect_idempotent(self):
        a = BinaryMask(np.eye(8, dtype=bool))
        assert np.array_equal(mask_intersect(a, a).array, a.array)

    def test_dilate_point_k1_gives_3x3_block(self):
        m = np.zeros((9, 9), dtype=bool)
        m[4, 4] = True
        out = mask_dilate(BinaryMask(m), 1).array
        expect = np.zeros((9, 9), dtype=bool)
        expect[3:6, 3:6] = True
        assert np.array_equal(out, expect)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            mask_union(BinaryMask(np.zeros((4, 4), dtype=bool)),
                       BinaryMask(np.zeros((5, 5), dtype=bool)))

    def test_dispatch_matches_functions(self):
        a = BinaryMask(np.eye(8, dtype=bool))
        b = BinaryMask(np.fliplr(np.eye(8)).astype(bool))
        assert np.array_equal(mask_algebra(a, b, "union").array, mask_union(a, b).array)
        assert np.array_equal(mask_algebra(a, None, "dilate", k=1).array,
                              mask_dilate(a, 1).array)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 36 - 1))
    def test_subtract_union_intersect_recovers_original(self, bits):
        rng = np.random.default_rng(bits)
        a = BinaryMask(rng.random((6, 6)) < 0.5)
        b = BinaryMask(rng.random((6, 6)) < 0.5)
        recovered = mask_union(mask_subtract(a, b), mask_intersect(a, b))
        assert np.array_equal(recovered.array, a.array)


class TestRasterValidation:
    def test_out_of_range_values_rejected(self):
        with pytest.raises(ValidationError):
            RasterImage(np.full((8, 8, 3), 1.5))

    def test_small_canvas_rejected(self):
        with pytest.raises(ValidationError):
            RasterImage(np.zeros((4, 8, 3)))

    def test_bad_channel_count_rejected(self):
        with pytest.raises(ValidationError):
            RasterImage(np.zeros((8, 8, 2)))


def test_scene_invariants_exhaustive_on_generated(small_corpus):
    for sample in small_corpus:
        sample.validate()
        oracle = visible_oracle(sample.objects, sample.size())
        for oid, mask in sample.visible_masks.items():
            assert np.array_equal(mask.array, oracle[oid])
