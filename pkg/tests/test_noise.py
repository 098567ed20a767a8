import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masklab.errors import ValidationError
from masklab.nets import Rng
from masklab.noise import (
    StructureMask,
    TemperedSigmoidParams,
    TransitionMatrix,
    build_mask,
    build_transition,
    corrupt_labels,
    distill_mask,
    extract_structure,
    identity_transition,
    load_mask,
    load_transition,
    mask_from_json,
    mask_to_json,
    save_mask,
    save_transition,
    tempered_sigmoid,
    tempered_sigmoid_deriv,
    threshold_structure,
    transition_from_json,
    transition_to_json,
)


def oracle_sigmoid(s, alpha="0.05", beta="0.005"):
    """Arbitrary-precision reference for the quantizing sigmoid."""
    with mpmath.workdps(60):
        t = (mpmath.mpf(s) - mpmath.mpf(alpha)) / mpmath.mpf(beta)
        return float(1 / (1 + mpmath.e ** (-t)))


class TestBuildMask:
    def test_tri_diagonal_c4(self):
        m = build_mask("tri_diagonal", 4)
        expected = [[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]]
        np.testing.assert_array_equal(m.m, expected)

    def test_block_diagonal_c4(self):
        m = build_mask("block_diagonal", 4, block_sizes=[2, 2])
        expected = [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
        np.testing.assert_array_equal(m.m, expected)

    def test_column_diagonal_c4_col3(self):
        m = build_mask("column_diagonal", 4, noise_columns={3})
        expected = [[1, 0, 0, 1], [0, 1, 0, 1], [0, 0, 1, 1], [0, 0, 0, 1]]
        np.testing.assert_array_equal(m.m, expected)

    def test_full_and_identity(self):
        np.testing.assert_array_equal(build_mask("full", 3).m, np.ones((3, 3)))
        np.testing.assert_array_equal(build_mask("identity", 3).m, np.eye(3))

    def test_column_out_of_range_rejected(self):
        with pytest.raises(ValidationError, match="out of range"):
            build_mask("column_diagonal", 4, noise_columns={4})

    def test_block_sizes_must_sum_to_c(self):
        with pytest.raises(ValidationError, match="sum"):
            build_mask("block_diagonal", 4, block_sizes=[2, 3])

    def test_soft_mask_allows_loose_diagonal_but_hard_does_not(self):
        StructureMask(2, np.array([[0.9, 0.2], [0.1, 0.8]]))  # soft: fine
        with pytest.raises(ValidationError):
            StructureMask(2, np.array([[0.0, 1.0], [1.0, 1.0]]))


class TestBuildTransition:
    def test_tri_c3_rate_point2(self):
        t = build_transition(build_mask("tri_diagonal", 3), 0.2)
        expected = [[0.8, 0.2, 0.0], [0.1, 0.8, 0.1], [0.0, 0.2, 0.8]]
        np.testing.assert_allclose(t.t, expected, atol=1e-15)

    def test_rate_zero_is_identity(self):
        t = build_transition(build_mask("block_diagonal", 4, block_sizes=[2, 2]), 0.0)
        np.testing.assert_array_equal(t.t, np.eye(4))

    def test_column_mask_row_with_no_escape_stays_put(self):
        t = build_transition(build_mask("column_diagonal", 4, noise_columns={3}), 0.3)
        np.testing.assert_array_equal(t.t[3], [0, 0, 0, 1])

    def test_soft_mask_rejected(self):
        soft = StructureMask(2, np.array([[1.0, 0.5], [0.5, 1.0]]))
        with pytest.raises(ValidationError):
            build_transition(soft, 0.2)

    @settings(max_examples=40, deadline=None, derandomize=True)
    @given(c=st.integers(2, 12), rate=st.floats(0.0, 0.99),
           kind=st.sampled_from(["tri_diagonal", "full", "identity"]))
    def test_row_stochastic_and_mask_consistent(self, c, rate, kind):
        mask = build_mask(kind, c)
        t = build_transition(mask, rate)
        np.testing.assert_allclose(t.t.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(t.t[mask.m == 0.0] == 0.0)


class TestCorruptLabels:
    def test_identity_transition_is_identity_map(self):
        labels = Rng(0).integers(0, 5, size=1000)
        noisy = corrupt_labels(labels, identity_transition(5), Rng(1))
        np.testing.assert_array_equal(noisy, labels)

    def test_deterministic_flip(self):
        t = TransitionMatrix(3, np.array([[0.0, 1.0, 0.0],
                                          [0.0, 1.0, 0.0],
                                          [0.0, 0.0, 1.0]]))
        noisy = corrupt_labels(np.zeros(200, dtype=int), t, Rng(2))
        assert np.all(noisy == 1)

    def test_masked_transitions_never_occur(self):
        t = build_transition(build_mask("tri_diagonal", 4), 0.4)
        clean = Rng(3).integers(0, 4, size=10_000)
        noisy = corrupt_labels(clean, t, Rng(4))
        assert np.all(t.t[clean, noisy] > 0.0)

    def test_monte_carlo_frequencies_tri_c3(self):
        # 1e5 draws from class 1 of tri(C=3, rate 0.2): rows land within
        # +-0.01 of [0.1, 0.8, 0.1] (binomial sd is ~1e-3 here)
        t = build_transition(build_mask("tri_diagonal", 3), 0.2)
        noisy = corrupt_labels(np.ones(100_000, dtype=int), t, Rng(5))
        freq = np.bincount(noisy, minlength=3) / noisy.size
        np.testing.assert_allclose(freq, [0.1, 0.8, 0.1], atol=0.01)

    def test_row_tv_concentration_over_seeds(self):
        # empirical row frequencies converge: TV < 3*sqrt(C/n) per row
        c, n = 6, 100_000
        t = build_transition(build_mask("tri_diagonal", c), 0.3)
        bound = 3.0 * np.sqrt(c / n)
        for seed in range(20):
            for cls in (0, c // 2, c - 1):
                noisy = corrupt_labels(np.full(n, cls), t, Rng(seed, cls))
                freq = np.bincount(noisy, minlength=c) / n
                tv = 0.5 * np.abs(freq - t.t[cls]).sum()
                assert tv < bound

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValidationError, match="out of range"):
            corrupt_labels(np.array([0, 7]), identity_transition(5), Rng(6))

    def test_same_seed_same_corruption(self):
        t = build_transition(build_mask("tri_diagonal", 5), 0.3)
        clean = Rng(7).integers(0, 5, size=500)
        np.testing.assert_array_equal(
            corrupt_labels(clean, t, Rng(8)), corrupt_labels(clean, t, Rng(8))
        )


class TestTemperedSigmoid:
    def test_half_at_location_parameter(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        assert tempered_sigmoid(np.array(0.05), p) == 0.5

    def test_value_at_zero_matches_high_precision_oracle(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        got = float(tempered_sigmoid(np.array(0.0), p))
        assert got == pytest.approx(oracle_sigmoid("0"), abs=1e-9)
        assert got == pytest.approx(4.5398e-5, abs=1e-9)

    def test_value_at_point_two_saturates(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        got = float(tempered_sigmoid(np.array(0.2), p))
        assert abs(got - 1.0) < 1e-12
        assert got == pytest.approx(oracle_sigmoid("0.2"), abs=1e-15)

    def test_total_function_no_overflow(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        with np.errstate(over="raise"):
            out = tempered_sigmoid(np.array([-1e9, -5.0, 0.0, 5.0, 1e9]), p)
        assert np.all(np.isfinite(out))
        assert np.all((out >= 0.0) & (out <= 1.0))

    @settings(max_examples=60, deadline=None, derandomize=True)
    @given(a=st.floats(-0.5, 1.5), b=st.floats(-0.5, 1.5))
    def test_strictly_increasing(self, a, b):
        p = TemperedSigmoidParams(0.05, 0.005)
        lo, hi = min(a, b), max(a, b)
        if lo == hi:
            return
        flo = float(tempered_sigmoid(np.array(lo), p))
        fhi = float(tempered_sigmoid(np.array(hi), p))
        assert flo <= fhi
        if abs(hi - lo) > 1e-12 and abs((lo - 0.05) / 0.005) < 30:
            assert flo < fhi

    def test_open_unit_interval_near_location(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        s = np.linspace(0.0, 0.1, 201)
        f = tempered_sigmoid(s, p)
        assert np.all(f > 0.0) and np.all(f < 1.0)

    def test_threshold_matches_above_alpha_predicate(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        s = np.array([[0.7, 0.049, 0.0], [0.051, 0.7, 0.05], [0.2, 0.04, 0.76]])
        hard = threshold_structure(extract_structure(s, p))
        np.testing.assert_array_equal(hard.m[~np.eye(3, dtype=bool)],
                                      (s > 0.05)[~np.eye(3, dtype=bool)].astype(float))

    def test_derivative_matches_finite_differences(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        s = np.array([0.03, 0.05, 0.07, 0.1])
        h = 1e-8
        num = (tempered_sigmoid(s + h, p) - tempered_sigmoid(s - h, p)) / (2 * h)
        np.testing.assert_allclose(tempered_sigmoid_deriv(s, p), num, rtol=1e-5)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValidationError):
            TemperedSigmoidParams(alpha=0.0)
        with pytest.raises(ValidationError):
            TemperedSigmoidParams(beta=0.0)


class TestExtractStructure:
    def test_uniform_matrix_reads_fully_valid(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        t = TransitionMatrix(10, np.full((10, 10), 0.1))
        s_o = extract_structure(t, p)
        np.testing.assert_allclose(s_o.m, 1.0 - oracle_sigmoid("0"), atol=1e-12)

    def test_identity_matrix_reads_diagonal(self):
        p = TemperedSigmoidParams(0.05, 0.005)
        s_o = extract_structure(identity_transition(4), p)
        assert np.all(np.diag(s_o.m) > 1.0 - 1e-12)
        off = s_o.m[~np.eye(4, dtype=bool)]
        np.testing.assert_allclose(off, oracle_sigmoid("0"), atol=1e-12)


class TestDistillMask:
    def test_above_hi_is_valid(self):
        t = TransitionMatrix(2, np.array([[0.85, 0.15], [0.0, 1.0]]))
        assert distill_mask(t, 0.1, 0.01).m[0, 1] == 1.0

    def test_below_lo_is_invalid(self):
        t = TransitionMatrix(2, np.array([[0.995, 0.005], [0.0, 1.0]]))
        assert distill_mask(t, 0.1, 0.01).m[0, 1] == 0.0

    def test_undecided_band_stays_valid(self):
        t = TransitionMatrix(2, np.array([[0.95, 0.05], [0.0, 1.0]]))
        assert distill_mask(t, 0.1, 0.01).m[0, 1] == 1.0

    def test_diagonal_forced_valid(self):
        t = TransitionMatrix(3, np.array([[0.0, 1.0, 0.0],
                                          [0.5, 0.5, 0.0],
                                          [0.0, 0.0, 1.0]]))
        assert np.all(np.diag(distill_mask(t, 0.1, 0.01).m) == 1.0)

    def test_bad_thresholds_rejected(self):
        t = identity_transition(2)
        with pytest.raises(ValidationError):
            distill_mask(t, 0.01, 0.1)
        with pytest.raises(ValidationError):
            distill_mask(t, 0.1, 0.1)

    @settings(max_examples=40, deadline=None, derandomize=True)
    @given(lo1=st.floats(0.0, 0.4), dlo=st.floats(0.001, 0.2),
           hi1=st.floats(0.45, 0.9), dhi=st.floats(0.001, 0.09),
           seed=st.integers(0, 1000))
    def test_monotone_raising_thresholds_never_unmasks(self, lo1, dlo, hi1, dhi, seed):
        rows = Rng(seed).random((4, 4)) + 1e-3
        rows /= rows.sum(axis=1, keepdims=True)
        t = TransitionMatrix(4, rows)
        a = distill_mask(t, hi1, lo1).m
        b = distill_mask(t, min(hi1 + dhi, 1.0), min(lo1 + dlo, hi1)).m
        assert np.all(b <= a)


class TestSerialization:
    def test_transition_round_trip_bit_exact(self, tmp_path):
        rows = Rng(40).random((5, 5)) + 0.1
        rows /= rows.sum(axis=1, keepdims=True)
        t = TransitionMatrix(5, rows)
        path = tmp_path / "t.json"
        save_transition(t, path)
        back = load_transition(path)
        np.testing.assert_array_equal(back.t, t.t)

    def test_mask_round_trip(self, tmp_path):
        m = build_mask("tri_diagonal", 6)
        path = tmp_path / "m.json"
        save_mask(m, path)
        back = load_mask(path)
        np.testing.assert_array_equal(back.m, m.m)
        assert back.kind == "tri_diagonal"

    def test_schema_fields(self):
        doc = transition_to_json(identity_transition(3))
        assert set(doc) == {"C", "rows", "kind"}
        doc = mask_to_json(build_mask("full", 3))
        assert doc["kind"] == "full"

    def test_unknown_keys_rejected(self):
        doc = mask_to_json(build_mask("full", 3))
        doc["extra"] = 1
        with pytest.raises(ValidationError, match="unknown keys"):
            mask_from_json(doc)
        with pytest.raises(ValidationError, match="missing"):
            transition_from_json({"C": 3, "rows": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]})

    def test_awkward_decimals_survive(self, tmp_path):
        rows = np.array([[0.1 + 0.2, 1.0 - 0.1 - 0.2], [1 / 3, 2 / 3]])
        rows /= rows.sum(axis=1, keepdims=True)
        t = TransitionMatrix(2, rows)
        path = tmp_path / "t.json"
        save_transition(t, path)
        np.testing.assert_array_equal(load_transition(path).t, t.t)

    def test_matrix_validation(self):
        with pytest.raises(ValidationError, match="row"):
            TransitionMatrix(2, np.array([[0.6, 0.3], [0.5, 0.5]]))
        with pytest.raises(ValidationError, match="nonnegative"):
            TransitionMatrix(2, np.array([[1.1, -0.1], [0.0, 1.0]]))
