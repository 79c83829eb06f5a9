import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irab.errors import ConfigError, DataError
from irab.surrogate import (DEFAULT_RATIOS, ThresholdLadder, derive_mask, derive_mask_set, derive_thresholds,
                            ladder_for_tasks, quantize_msst, rank_index)


def sort_and_index(maps, ratios):
    """Reference ladder: plain Python sort, decimal rank arithmetic, tie bumping."""
    values = sorted(float(v) for m in maps for v in np.ravel(m) if v > 0)
    n = len(values)
    out = []
    for r in ratios:
        if r == 0:
            eps = 0.0
        else:
            # r * n rounded up, computed in integer thousandths
            k = max(1, -(-round(r * 1000) * n // 1000))
            eps = values[k - 1]
        if out and eps <= out[-1]:
            eps = min(v for v in values if v > out[-1])
        out.append(eps)
    return out


class TestThresholds:
    def test_ten_values(self):
        maps = [np.arange(1, 11) / 10.0]
        ladder = derive_thresholds(maps, (0.0, 0.5, 0.7))
        assert ladder.thresholds == (0.0, 0.5, 0.7)
        assert ladder.n_nonzero == 10

    def test_single_value(self):
        assert derive_thresholds([np.array([0.0, 0.37, 0.0])], (0.0, 0.5)).thresholds == (0.0, 0.37)

    def test_all_zero(self):
        with pytest.raises(DataError):
            derive_thresholds([np.zeros((4, 4))], DEFAULT_RATIOS)

    @pytest.mark.parametrize("ratio,n,rank", [(0.7, 10, 7), (0.5, 3, 2), (0.01, 5, 1), (0.9, 10, 9), (0.3, 10, 3)])
    def test_rank_index(self, ratio, n, rank):
        assert rank_index(ratio, n) == rank

    def test_ties_bumped(self):
        ladder = derive_thresholds([np.array([0.2, 0.2, 0.2, 0.2, 0.9])], (0.0, 0.5, 0.7))
        assert ladder.thresholds == (0.0, 0.2, 0.9)

    def test_unbuildable(self):
        with pytest.raises(DataError):
            derive_thresholds([np.array([0.3, 0.3])], (0.0, 0.5, 0.7))

    @pytest.mark.parametrize("ratios", [(), (0.5, 0.2), (0.0, 1.0), (-0.1,)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ConfigError):
            derive_thresholds([np.ones(3)], ratios)

    def test_pool_oracle_many(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            maps = [np.where(rng.random((6, 6)) < 0.6, rng.gamma(2.0, 0.1, (6, 6)), 0.0)
                    for _ in range(int(rng.integers(1, 5)))]
            ratios = (0.0, 0.5, 0.7) if trial % 2 else (0.0, 0.5, 0.7, 0.8, 0.9)
            if not any((m > 0).any() for m in maps):
                continue
            assert list(derive_thresholds(maps, ratios).thresholds) == sort_and_index(maps, ratios)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        vals = rng.gamma(2.0, 0.1, 60)
        a = derive_thresholds([vals[:30], vals[30:]])
        b = derive_thresholds([rng.permutation(vals)])
        assert a == b

    def test_dict_roundtrip(self):
        ladder = derive_thresholds([np.arange(1, 11) / 10.0])
        assert ThresholdLadder.from_dict(ladder.to_dict()) == ladder
        assert set(ladder.to_dict()) == {"ratios", "thresholds", "N"}

    def test_task_sequence(self):
        maps = [np.arange(1, 11) / 10.0]
        assert ladder_for_tasks(maps, 1).thresholds == (0.0,)
        assert ladder_for_tasks(maps, 5).thresholds == (0.0, 0.5, 0.7, 0.8, 0.9)
        with pytest.raises(ConfigError):
            ladder_for_tasks(maps, 6)


class TestMasks:
    def test_simple(self):
        np.testing.assert_array_equal(derive_mask(np.array([0.1, 0.0, 0.3]), 0.2), [0, 0, 1])

    def test_zero_strict(self):
        assert not derive_mask(np.zeros((3, 3)), 0.0).any()

    def test_above_max(self):
        assert not derive_mask(np.array([0.1, 0.4]), 0.5).any()

    def test_mask_set_matches_pixelwise(self):
        rng = np.random.default_rng(2)
        d = np.where(rng.random((7, 7)) < 0.5, rng.random((7, 7)), 0.0)
        ladder = ThresholdLadder((0.0, 0.5, 0.7), (0.0, 0.3, 0.6), 10)
        masks = derive_mask_set(d, ladder)
        for k, eps in enumerate(ladder.thresholds):
            for i in range(7):
                for j in range(7):
                    assert masks[k, i, j] == (1 if d[i, j] > eps else 0)

    def test_zero_density(self):
        ladder = ThresholdLadder((0.0, 0.5), (0.0, 0.3), 4)
        assert not derive_mask_set(np.zeros((4, 4)), ladder).any()


class TestQuantize:
    LADDER = ThresholdLadder((0.0, 0.5, 0.7), (0.0, 0.5, 0.7), 10)

    def test_classes(self):
        np.testing.assert_array_equal(quantize_msst(np.array([0.0, 0.3, 0.6, 0.9]), self.LADDER), [0, 1, 2, 3])

    def test_below_first(self):
        ladder = ThresholdLadder((0.3, 0.6), (0.2, 0.5), 10)
        assert not quantize_msst(np.full((3, 3), 0.1), ladder).any()

    def test_at_threshold_goes_low(self):
        assert quantize_msst(np.array([0.5]), self.LADDER)[0] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_nesting_and_quantize_equivalence(seed, c):
    rng = np.random.default_rng(seed)
    d = np.where(rng.random((6, 6)) < 0.5, rng.random((6, 6)), 0.0)
    thresholds = tuple(np.concatenate([[0.0], np.sort(rng.choice(np.arange(1, 100), c - 1, replace=False)) / 100]))
    ladder = ThresholdLadder(tuple(np.linspace(0, 0.9, c)), thresholds, 36)
    masks = derive_mask_set(d, ladder)
    for k in range(c - 1):
        assert np.all(masks[k + 1] <= masks[k])
    classes = quantize_msst(d, ladder)
    for k in range(c):
        np.testing.assert_array_equal(masks[k], (classes >= k + 1).astype(np.uint8))
