"""Tests for the RNG, gradient checker and MIV1 tensor files."""

import struct

import numpy as np
import pytest

from latent_meshfit.tensorcore import (
    BadMagicError,
    GradCheckError,
    Rng,
    ShapeOverflowError,
    TruncatedFileError,
    grad_check,
    load_tensors,
    save_tensors,
)


class TestRng:
    """Tests for the seeded random stream."""

    def test_same_seed_same_stream(self):
        """Two streams with the same seed should produce identical draws."""
        a = Rng(7).normal(10)
        b = Rng(7).normal(10)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        """Different seeds should produce different draws."""
        assert not np.array_equal(Rng(1).normal(10), Rng(2).normal(10))

    def test_child_streams_are_independent_of_parent_use(self):
        """A child stream should not depend on how much of the parent was consumed."""
        parent = Rng(3)
        first = parent.child(5).normal(4)
        parent.normal(100)
        again = parent.child(5).normal(4)
        assert np.array_equal(first, again)

    def test_children_with_different_keys_differ(self):
        """Children addressed by different keys should differ."""
        rng = Rng(3)
        assert not np.array_equal(rng.child(0).normal(4), rng.child(1).normal(4))

    def test_unit_vector_has_unit_norm(self):
        """unit_vector should return a vector of length 1."""
        v = Rng(0).unit_vector(16)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)

    def test_choice_without_replacement(self):
        """choice should return distinct indices."""
        picked = Rng(0).choice(100, 30)
        assert len(set(picked.tolist())) == 30


class TestGradCheck:
    """Tests for grad_check."""

    def test_polynomial_gradient(self):
        """sum(x^2) at (1, 2) should match its exact gradient."""

        def f(x):
            return float(np.sum(x * x)), 2 * x

        report = grad_check(f, np.array([1.0, 2.0]), eps=1e-5)
        assert report.max_rel_err < 1e-8
        assert report.n_checked == 2

    def test_constant_function(self):
        """A constant function should have zero gradient and zero error."""

        def f(x):
            return 3.0, np.zeros_like(x)

        report = grad_check(f, np.ones(5))
        assert report.max_abs_err < 1e-9

    def test_wrong_gradient_is_reported(self):
        """An incorrect analytic gradient should fail the tolerance."""

        def f(x):
            return float(np.sum(x * x)), x

        report = grad_check(f, np.array([1.0, 2.0]))
        assert not report.passed(1e-4)

    def test_coords_and_skip(self):
        """Only the selected coordinates minus the skipped ones are checked."""

        def f(x):
            return float(np.sum(x**3)), 3 * x**2

        report = grad_check(f, np.arange(6.0), coords=[1, 2, 3], skip=[2])
        assert report.n_checked == 2

    def test_non_finite_value_raises(self):
        """A non-finite value at the evaluation point should raise."""

        def f(x):
            return float("nan"), np.zeros_like(x)

        with pytest.raises(GradCheckError):
            grad_check(f, np.ones(2))

    def test_non_finite_perturbed_value_names_coordinate(self):
        """A non-finite value when perturbing should name the coordinate."""

        def f(x):
            value = float(np.sum(x)) if x[1] <= 1.0 else float("inf")
            return value, np.ones_like(x)

        with pytest.raises(GradCheckError, match="coordinate 1"):
            grad_check(f, np.ones(3))


class TestTensorFile:
    """Tests for MIV1 save/load."""

    def test_round_trip_is_32_bit_exact(self, tmp_path):
        """A saved tensor should load back as its 32-bit values."""
        data = np.array([[0.1, 0.2, 0.3], [1.5, -2.25, 1e-7]])
        path = tmp_path / "t.miv1"
        save_tensors(path, {"a": data})
        loaded = load_tensors(path)
        assert loaded["a"].shape == (2, 3)
        assert np.array_equal(loaded["a"].astype(np.float32), data.astype(np.float32))

    def test_order_is_preserved(self, tmp_path):
        """Tensors should load in file order."""
        path = tmp_path / "t.miv1"
        save_tensors(path, {"z": np.zeros(2), "a": np.ones(3), "m": np.ones((1, 1))})
        assert list(load_tensors(path)) == ["z", "a", "m"]

    def test_empty_container(self, tmp_path):
        """An empty tensor list should give a valid file with count 0."""
        path = tmp_path / "empty.miv1"
        save_tensors(path, {})
        assert path.read_bytes() == b"MIV1" + struct.pack("<I", 0)
        assert load_tensors(path) == {}

    def test_bad_magic(self, tmp_path):
        """Corrupt magic bytes should raise BadMagicError."""
        path = tmp_path / "bad.miv1"
        path.write_bytes(b"XXXX" + struct.pack("<I", 0))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_tensors(path)

    def test_truncated_payload(self, tmp_path):
        """A payload shorter than declared should raise TruncatedFileError."""
        path = tmp_path / "t.miv1"
        save_tensors(path, {"a": np.ones(8)})
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedFileError):
            load_tensors(path)

    def test_shape_overflow(self, tmp_path):
        """An absurd declared shape should raise ShapeOverflowError."""
        path = tmp_path / "huge.miv1"
        header = b"MIV1" + struct.pack("<I", 1) + struct.pack("<H", 1) + b"a"
        header += struct.pack("<B", 2) + struct.pack("<2I", 1 << 20, 1 << 20)
        path.write_bytes(header)
        with pytest.raises(ShapeOverflowError):
            load_tensors(path)
