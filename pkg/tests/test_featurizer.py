import math

import numpy as np
import pytest

from panofocus.featurizer import (
    DEFAULT_GROUP_DISTANCE,
    crop_individual,
    embed_individual,
    projection_matrix,
    propose_groups,
)
from panofocus.geometry import Box


class TestEmbedIndividual:
    def test_shape(self, rng):
        emb = embed_individual(rng.random((32, 32, 3)), patch_size=16, d=8, seed=0)
        assert emb.tokens.shape == (4, 8)
        assert emb.num_patches == 4

    @pytest.mark.parametrize("h,w,p", [(33, 17, 16), (5, 5, 4), (1, 40, 8), (48, 16, 16)])
    def test_token_count(self, rng, h, w, p):
        emb = embed_individual(rng.random((h, w, 3)), patch_size=p, d=4, seed=1)
        assert emb.tokens.shape == (math.ceil(h / p) * math.ceil(w / p), 4)
        assert np.all(np.isfinite(emb.tokens))

    def test_deterministic(self, rng):
        crop = (rng.random((20, 12, 3)) * 255).astype(np.uint8)
        a = embed_individual(crop, 8, 6, seed=3).tokens
        b = embed_individual(crop.copy(), 8, 6, seed=3).tokens
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, embed_individual(crop, 8, 6, seed=4).tokens)

    def test_zero_crop(self):
        emb = embed_individual(np.zeros((32, 32, 3)), 16, 8, seed=0)
        np.testing.assert_array_equal(emb.tokens, 0.0)

    def test_matches_manual_projection(self, rng):
        crop = rng.random((16, 16, 3))
        emb = embed_individual(crop, 8, 5, seed=9)
        first_patch = crop[:8, :8].reshape(-1)
        np.testing.assert_allclose(emb.tokens[0], first_patch @ projection_matrix(192, 5, 9), atol=1e-12)
        second_patch = crop[:8, 8:].reshape(-1)
        np.testing.assert_allclose(emb.tokens[1], second_patch @ projection_matrix(192, 5, 9), atol=1e-12)

    def test_uint8_scaled(self, rng):
        crop = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
        np.testing.assert_allclose(
            embed_individual(crop, 8, 4, 0).tokens, embed_individual(crop / 255.0, 8, 4, 0).tokens, atol=1e-12
        )

    @pytest.mark.parametrize("shape", [(0, 5, 3), (5, 0, 3)])
    def test_degenerate(self, shape):
        with pytest.raises(ValueError):
            embed_individual(np.zeros(shape), 4, 4, 0)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            embed_individual(np.zeros((4, 4, 3)), 0, 4, 0)

    def test_non_finite(self):
        crop = np.zeros((4, 4, 3))
        crop[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            embed_individual(crop, 4, 4, 0)


class TestCropIndividual:
    def test_rounds_outward(self):
        img = np.arange(100 * 50).reshape(50, 100)
        assert crop_individual(img, Box(10.5, 5.2, 4.1, 3.0)).shape == (4, 5)

    def test_outside(self):
        with pytest.raises(ValueError):
            crop_individual(np.zeros((10, 10)), Box(50, 50, 5, 5))


class TestProposeGroups:
    def test_default_threshold(self):
        assert DEFAULT_GROUP_DISTANCE == 100.0

    def test_close_pair(self):
        (g,) = propose_groups([Box(0, 0, 10, 20), Box(5, 0, 10, 20)], 50)
        assert g.member_indices == (0, 1)
        assert g.bounds.coords() == (0, 0, 15, 20)

    def test_far_pair(self):
        groups = propose_groups([Box(0, 0, 10, 20), Box(500, 0, 10, 20)], 50)
        assert [g.member_indices for g in groups] == [(0,), (1,)]

    def test_single(self):
        assert [g.member_indices for g in propose_groups([Box(3, 3, 4, 4)], 50)] == [(0,)]

    def test_empty(self):
        assert propose_groups([]) == []

    def test_single_linkage_chain(self):
        boxes = [Box(float(40 * i), 0, 10, 10) for i in range(5)]
        (g,) = propose_groups(boxes, 50)
        assert len(g.member_indices) == 5

    def test_threshold_is_strict(self):
        groups = propose_groups([Box(0, 0, 10, 10), Box(50, 0, 10, 10)], 50)
        assert len(groups) == 2

    def test_partition_and_bounds(self, rng):
        for _ in range(30):
            boxes = [Box(*rng.uniform(0, 800, 2), *rng.uniform(5, 60, 2)) for _ in range(int(rng.integers(1, 40)))]
            groups = propose_groups(boxes, 90)
            assert sorted(i for g in groups for i in g.member_indices) == list(range(len(boxes)))
            for g in groups:
                assert all(g.bounds.contains(boxes[i]) for i in g.member_indices)

    def test_order_independent_components(self, rng):
        boxes = [Box(*rng.uniform(0, 600, 2), 20, 20) for _ in range(25)]
        base = {frozenset(boxes[i] for i in g.member_indices) for g in propose_groups(boxes, 80)}
        perm = rng.permutation(25)
        shuffled = [boxes[i] for i in perm]
        again = {frozenset(shuffled[i] for i in g.member_indices) for g in propose_groups(shuffled, 80)}
        assert base == again
