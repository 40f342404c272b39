import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codecflow import kernels

pytestmark = pytest.mark.skipif(kernels.numba_impl is None, reason="numba unavailable")


def majority_oracle(labels, width=5):
    half = width // 2
    out = labels.copy()
    for i in range(labels.size):
        win = labels[max(0, i - half) : i + half + 1]
        counts = np.bincount(win, minlength=3)
        best = counts.max()
        winners = np.flatnonzero(counts == best)
        out[i] = labels[i] if labels[i] in winners else winners[0] if winners.size == 1 else labels[i]
    return out


def test_backend_name():
    assert kernels.backend() in ("numba", "numpy")


@settings(max_examples=40, deadline=None)
@given(labels=st.lists(st.integers(0, 2), min_size=1, max_size=40))
def test_majority_paths_agree_with_oracle(labels):
    labels = np.array(labels, dtype=np.int64)
    ref = majority_oracle(labels)
    np.testing.assert_array_equal(kernels.numpy_impl.majority_smooth(labels, 5), ref)
    np.testing.assert_array_equal(kernels.numba_impl.majority_smooth(labels, 5), ref)


@settings(max_examples=40, deadline=None)
@given(labels=st.lists(st.integers(0, 2), min_size=1, max_size=40))
def test_smoothing_uses_only_window_labels(labels):
    labels = np.array(labels, dtype=np.int64)
    out = kernels.majority_smooth(labels, 5)
    for i, v in enumerate(out):
        assert v in labels[max(0, i - 2) : i + 3]


@pytest.mark.parametrize("seed", range(5))
def test_top2_parity(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(size=(37, 11))
    a = kernels.numpy_impl.top2(d)
    b = kernels.numba_impl.top2(d)
    order = np.argsort(d, axis=1, kind="stable")
    for got in (a, b):
        np.testing.assert_array_equal(got[0], order[:, 0])
        np.testing.assert_array_equal(got[1], order[:, 1])


def test_overlap_add_parity():
    rng = np.random.default_rng(0)
    cols = rng.normal(size=(3, 9, 8))
    out_len = 8 * 4 + 4 + 8
    a = kernels.numpy_impl.overlap_add(cols, 4, out_len)
    b = kernels.numba_impl.overlap_add(cols, 4, out_len)
    ref = np.zeros((3, out_len))
    for f in range(9):
        ref[:, f * 4 : f * 4 + 8] += cols[:, f]
    np.testing.assert_allclose(a, ref, atol=1e-12)
    np.testing.assert_allclose(b, ref, atol=1e-12)


def test_normalized_acf_parity():
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(6, 128))
    frames -= frames.mean(axis=1, keepdims=True)
    frames[2] = 0.0
    win_acf = np.ones(41)
    a = kernels.numpy_impl.normalized_acf(frames, 40, win_acf)
    b = kernels.numba_impl.normalized_acf(frames, 40, win_acf)
    ref = np.zeros_like(a)
    for i, f in enumerate(frames):
        e = f @ f
        if e > 0:
            ref[i] = [f[: 128 - k] @ f[k:] / e for k in range(41)]
    np.testing.assert_allclose(a, ref, atol=1e-10)
    np.testing.assert_allclose(b, ref, atol=1e-10)
    assert not a[2].any()
