import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpselect.core import (
    MAX_PREDICTORS,
    BetaBinomial,
    Dataset,
    FixedW,
    ModelIndicator,
    PriorConfig,
    RunConfig,
    read_csv,
    standardize_columns,
    validate_dataset,
)
from qpselect.errors import (
    DimensionMismatchError,
    DuplicateColumnError,
    InputError,
    NonFiniteError,
    TooManyPredictorsError,
)


class TestValidateDataset:
    def test_valid_dataset_returned_unchanged(self):
        d = Dataset.from_arrays([1.0, 2.0], np.eye(2), ["a", "b"])
        assert validate_dataset(d) is d

    def test_row_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            Dataset.from_arrays([1.0, 2.0, 3.0], np.ones((2, 2)))

    def test_nan_location_reported(self):
        X = np.ones((2, 2))
        X[0, 1] = np.nan
        with pytest.raises(NonFiniteError) as info:
            Dataset.from_arrays([1.0, 2.0], X)
        assert (info.value.row, info.value.col) == (0, 1)

    def test_duplicate_names(self):
        with pytest.raises(DuplicateColumnError):
            Dataset.from_arrays([1.0, 2.0], np.eye(2), ["a", "a"])

    def test_too_many_predictors(self):
        with pytest.raises(TooManyPredictorsError):
            Dataset.from_arrays(np.zeros(2), np.zeros((2, MAX_PREDICTORS + 1)))

    def test_arrays_are_read_only(self):
        d = Dataset.from_arrays([1.0, 2.0], np.eye(2))
        with pytest.raises(ValueError):
            d.X[0, 0] = 5.0


class TestReadCsv:
    def test_intercept_and_names(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,a,b\n1,2,3\n4,5,6\n", encoding="utf-8")
        d = read_csv(f, add_intercept=True)
        assert d.column_names == ("intercept", "a", "b")
        np.testing.assert_array_equal(d.X[:, 0], 1.0)
        np.testing.assert_array_equal(d.y, [1.0, 4.0])

    def test_missing_y_named_in_error(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("z,a\n1,2\n", encoding="utf-8")
        with pytest.raises(InputError, match="'y'"):
            read_csv(f)

    def test_non_numeric_cell(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,a,b\n1,2,3\n4,x,6\n", encoding="utf-8")
        with pytest.raises(NonFiniteError, match="'a'") as info:
            read_csv(f)
        assert (info.value.row, info.value.col) == (1, 0)

    def test_standardize_skips_constant_columns(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        Z = standardize_columns(X)
        np.testing.assert_array_equal(Z[:, 0], 1.0)
        assert abs(Z[:, 1].mean()) < 1e-12
        assert Z[:, 1].std() == pytest.approx(1.0)


class TestModelIndicator:
    def test_equal_bits_equal_hash(self):
        a = ModelIndicator.from_columns(10, [1, 3])
        b = ModelIndicator(10, 0b1010)
        assert a == b and hash(a) == hash(b)

    def test_popcount_matches_naive_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            bits = int(rng.integers(0, 1 << 62))
            naive = sum((bits >> j) & 1 for j in range(64))
            assert ModelIndicator(64, bits).size() == naive

    def test_forced_bits_always_set(self):
        m = ModelIndicator.from_columns(5, [2], forced=[0])
        assert 0 in m and m.size() == 2
        with pytest.raises(ValueError):
            m.with_bit(0, False)

    def test_total_order_is_lexicographic(self):
        ms = [ModelIndicator(3, b) for b in range(8)]
        assert sorted(ms, key=lambda m: m.bitstring()) == sorted(ms)

    def test_p_limit(self):
        with pytest.raises(TooManyPredictorsError):
            ModelIndicator(MAX_PREDICTORS + 1)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 200), st.data())
    def test_array_round_trip(self, p, data):
        bits = data.draw(st.integers(0, (1 << p) - 1))
        m = ModelIndicator(p, bits)
        assert ModelIndicator.from_array(m.to_array()) == m
        assert m.columns() == list(np.flatnonzero(m.to_array()))


class TestDefaults:
    def test_prior_defaults(self):
        prior = PriorConfig()
        assert prior.slab_variance == 9.0
        assert prior.sparsity == BetaBinomial(1.0, 1.0)

    def test_run_defaults(self):
        run = RunConfig()
        assert (run.sweeps, run.burn_in, run.fdr_alpha) == (3000, 1500, 0.05)
        assert run.newton_tol == 1e-8 and run.newton_max_iter == 100 and run.cache_cap is None

    @pytest.mark.parametrize("w", [0.0, 1.0, -0.1])
    def test_fixed_w_bounds(self, w):
        with pytest.raises(ValueError):
            FixedW(w)

    def test_burn_in_below_sweeps(self):
        with pytest.raises(ValueError):
            RunConfig(sweeps=10, burn_in=10)

    def test_forced_default_is_intercept(self):
        d = Dataset.from_arrays([1.0, 2.0, 3.0], np.column_stack([np.arange(3.0), np.ones(3)]))
        assert RunConfig().forced_columns(d) == (1,)
        d2 = Dataset.from_arrays([1.0, 2.0, 3.0], np.arange(3.0)[:, None])
        assert RunConfig().forced_columns(d2) == ()
