
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpselect.errors import LengthMismatchError
from qpselect.selection import score_selection, select_bfdr, select_median

ppi_vectors = st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=30).map(np.array)


class TestMedian:
    def test_basic(self):
        np.testing.assert_array_equal(select_median([1.0, 0.0, 0.0]).selected, [True, False, False])

    def test_boundary_inclusive(self):
        np.testing.assert_array_equal(select_median([0.5, 0.49]).selected, [True, False])

    def test_all_half(self):
        assert select_median([0.5] * 4).selected.all()

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            select_median([1.2])


class TestBfdr:
    def test_hand_example(self):
        res = select_bfdr([0.99, 0.97, 0.6, 0.2], 0.05)
        np.testing.assert_array_equal(res.selected, [True, True, False, False])
        assert res.k == 2 and res.implicit_threshold == 0.97

    def test_nothing_qualifies(self):
        res = select_bfdr([0.9, 0.8], 0.05)
        assert res.k == 0 and res.implicit_threshold > 1.0

    def test_all_ones(self):
        assert select_bfdr(np.ones(7), 0.05).selected.all()

    def test_ties_go_to_inclusion(self):
        # top-2 mean 0.955 qualifies, top-3 mean 0.943 does not; the third-ranked
        # column ties the threshold 0.92 and is kept
        res = select_bfdr([0.92, 0.99, 0.92, 0.5], 0.05)
        assert res.implicit_threshold == 0.92
        np.testing.assert_array_equal(res.selected, [True, True, True, False])

    @pytest.mark.parametrize("alpha", [0.0, 1.0])
    def test_alpha_bounds(self, alpha):
        with pytest.raises(ValueError):
            select_bfdr([0.5], alpha)

    @settings(max_examples=300, deadline=None)
    @given(ppi_vectors)
    def test_threshold_invariant(self, ppi):
        res = select_bfdr(ppi, 0.1)
        np.testing.assert_array_equal(res.selected, ppi >= res.implicit_threshold)
        if res.k:
            # the qualifying prefix is everything above the threshold plus one tied column;
            # further ties are added by the inclusion rule
            above = ppi[ppi > res.implicit_threshold]
            prefix = np.append(above, res.implicit_threshold)
            assert prefix.mean() >= 0.9 * (1 - 1e-12)

    @settings(max_examples=300, deadline=None)
    @given(ppi_vectors, st.data())
    def test_monotone_in_ppi(self, ppi, data):
        before = select_bfdr(ppi, 0.1).selected
        j = data.draw(st.integers(0, len(ppi) - 1))
        bumped = ppi.copy()
        bumped[j] = data.draw(st.floats(ppi[j], 1.0))
        after = select_bfdr(bumped, 0.1).selected
        if before[j]:
            assert after[j]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.one_of(st.just(0.0), st.just(1.0), st.floats(1e-9, 1 - 1e-9)),
                    min_size=1, max_size=30).map(np.array))
    def test_alpha_limits(self, ppi):
        loose = select_bfdr(ppi, 1 - 1e-12).selected
        # every positive ppi is kept (zeros may ride along once the prefix mean stays positive)
        assert np.all(loose[ppi > 0])
        strict = select_bfdr(ppi, 1e-15).selected
        np.testing.assert_array_equal(strict, ppi == 1.0)

    def test_json(self):
        d = select_bfdr([0.99, 0.2], 0.05).to_dict(["a", "b"])
        assert d["selected_columns"] == ["a"] and d["selected"] == [1, 0]


class TestScore:
    def test_perfect(self):
        m = score_selection([1, 0, 1], [1, 0, 1])
        assert (m.fdr, m.power, m.f1, m.mcc) == (0.0, 1.0, 1.0, 1.0)

    def test_hand_counts(self):
        truth = np.array([1, 1, 1] + [0] * 17, dtype=bool)
        sel = np.array([1, 1, 0, 1] + [0] * 16, dtype=bool)
        m = score_selection(sel, truth)
        assert (m.tp, m.fp, m.fn, m.tn) == (2, 1, 1, 16)
        assert m.fdr == pytest.approx(1 / 3)
        assert m.power == pytest.approx(2 / 3)
        assert m.f1 == pytest.approx(2 / 3)
        assert m.mcc == pytest.approx(31 / 51, rel=1e-12)

    def test_empty_selection(self):
        m = score_selection([0, 0, 0], [1, 1, 0])
        assert (m.fdr, m.power, m.f1, m.mcc) == (0.0, 0.0, 0.0, 0.0)

    def test_mask_excludes_columns(self):
        m = score_selection([1, 1, 0], [1, 0, 0], scored_mask=[False, True, True])
        assert (m.tp, m.fp) == (0, 1)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            score_selection([1, 0], [1, 0, 0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 25), st.data())
    def test_permutation_symmetry_and_ranges(self, p, data):
        bools = st.lists(st.booleans(), min_size=p, max_size=p).map(np.array)
        sel, truth, mask = data.draw(bools), data.draw(bools), data.draw(bools)
        perm = np.array(data.draw(st.permutations(range(p))))
        a = score_selection(sel, truth, mask)
        b = score_selection(sel[perm], truth[perm], mask[perm])
        assert a == b
        assert 0 <= a.fdr <= 1 and 0 <= a.power <= 1 and 0 <= a.f1 <= 1 and -1 <= a.mcc <= 1
