import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from listennet import preprocess as P
from listennet.errors import DataError, ShapeError
from listennet.verify import check_alignment


def rec(samples, label="left", subject="s1", fs=64.0):
    return P.Recording(subject, "t1", fs, np.asarray(samples, dtype=np.float32), label)


def win(data, subject="s"):
    return P.DecisionWindow(np.asarray(data, dtype=np.float64), "left", subject, "t", 0)


def test_recording_validation():
    with pytest.raises(DataError):
        rec(np.zeros((2, 4)), label="up")
    with pytest.raises(ShapeError):
        rec(np.zeros(4))


def test_zscore_examples(caplog):
    out = P.zscore_normalize(rec([[1.0, 3.0]]))
    np.testing.assert_allclose(out.samples, [[-1.0, 1.0]])
    with caplog.at_level(logging.WARNING):
        out = P.zscore_normalize(rec([[5.0, 5.0, 5.0]]))
    np.testing.assert_array_equal(out.samples, 0.0)
    assert "constant" in caplog.text


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 50), st.integers(0, 2**31 - 1))
def test_zscore_idempotent(c, s, seed):
    x = np.random.default_rng(seed).standard_normal((c, s)) * 3 + 1
    once = P.zscore_normalize(rec(x))
    twice = P.zscore_normalize(once)
    np.testing.assert_allclose(twice.samples, once.samples, atol=1e-5)


def test_alignment_examples():
    r = np.random.default_rng(0)
    q, _ = np.linalg.qr(r.standard_normal((4, 4)))
    white = win(q * np.sqrt(4))  # q q^T * 4 / 4 = I
    np.testing.assert_allclose(P.compute_alignment([white]).matrix, np.eye(4), atol=1e-10)
    diag = win(np.array([[2.0, -2.0], [3.0, 3.0]]))  # covariance diag(4, 9)
    np.testing.assert_allclose(P.compute_alignment([diag]).matrix, np.diag([0.5, 1 / 3]), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 10), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_alignment_whitens_scope(c, n, seed):
    r = np.random.default_rng(seed)
    mix = r.standard_normal((c, c)) + c * np.eye(c)
    wins = [win(mix @ r.standard_normal((c, 3 * c))) for _ in range(n)]
    a = P.compute_alignment(wins)
    rbar = np.mean([P.window_covariance(w.data) for w in wins], axis=0)
    np.testing.assert_allclose(a.matrix @ rbar @ a.matrix, np.eye(c), atol=1e-6)
    assert check_alignment(wins, a.matrix) < 1e-6


def test_alignment_floor_warns(caplog):
    with caplog.at_level(logging.WARNING):
        a = P.compute_alignment([win(np.ones((3, 10)))])
    assert a.floored and np.all(np.isfinite(a.matrix))
    assert "floor" in caplog.text


def test_alignment_rejects_nonfinite():
    with pytest.raises(DataError):
        P.compute_alignment([win(np.full((2, 4), np.nan))])


def test_apply_alignment_linear(rng):
    w = P.DecisionWindow(rng.standard_normal((3, 8)).astype(np.float32), "right", "s", "t", 0)
    same = P.apply_alignment(w, P.AlignmentMatrix("s", np.eye(3)))
    np.testing.assert_array_equal(same.data, w.data)
    double = P.apply_alignment(w, P.AlignmentMatrix("s", 2 * np.eye(3)))
    np.testing.assert_allclose(double.data, 2 * w.data)
    with pytest.raises(ShapeError):
        P.apply_alignment(w, P.AlignmentMatrix("s", np.eye(2)))


@pytest.mark.parametrize("s, stride, expected", [(1280, 128, 10), (1280, 64, 19), (100, 128, 0)])
def test_make_windows_counts(s, stride, expected):
    wins = P.make_windows(rec(np.zeros((2, s))), 128, stride)
    assert len(wins) == expected
    assert all(w.data.shape == (2, 128) for w in wins)


def test_make_windows_content():
    x = np.arange(20, dtype=np.float32).reshape(1, 20)
    wins = P.make_windows(rec(x, label="right"), 8, 6)
    assert [w.start_sample for w in wins] == [0, 6, 12]
    np.testing.assert_array_equal(wins[1].data[0], np.arange(6, 14))
    assert all(w.target == 1 for w in wins)


def test_align_by_subject_scopes(rng):
    wins = [P.DecisionWindow(rng.standard_normal((3, 16)) * (1 + i % 2) * 5, "left", f"s{i % 2}", "t", 0)
            for i in range(8)]
    aligned, mats = P.align_by_subject(wins)
    assert set(mats) == {"s0", "s1"}
    for s in mats:
        assert check_alignment([w for w in aligned if w.subject_id == s], np.eye(3)) < 1e-5
    with pytest.raises(DataError):
        P.align_by_subject(wins, fit_windows=wins[:1])


def test_stack_windows(rng):
    wins = [P.DecisionWindow(rng.standard_normal((4, 9)), lab, "s", "t", 0) for lab in ("left", "right")]
    x, y = P.stack_windows(wins)
    assert x.shape == (2, 1, 4, 9) and x.dtype == np.float32
    np.testing.assert_array_equal(y, [0, 1])


def test_alignment_order_invariant(rng):
    wins = [win(rng.standard_normal((4, 30))) for _ in range(6)]
    a = P.compute_alignment(wins).matrix
    b = P.compute_alignment(wins[::-1]).matrix
    np.testing.assert_allclose(a, b, atol=1e-12)
