import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavsentry.amplify import (
    AmplifierConfig,
    AmplifierError,
    amplify_array,
    amplify_channel,
    amplify_windows,
    calibrate_alpha,
    calibrate_windows,
)
from cavsentry.traces import LabeledWindowSet


def reference(x, alpha, beta, mode="multiply"):
    """Plain loop over current/next pairs using the untouched input."""
    out = list(x)
    for t in range(len(x) - 1):
        d = abs(x[t + 1] - x[t])
        if d > alpha or d == 0:
            out[t] = x[t] + beta * x[t] if mode == "multiply" else x[t] + beta
    return out


def test_hand_example():
    out = amplify_channel([10, 10, 50, 10], AmplifierConfig(2.0, 1.0))
    assert out.tolist() == [20, 20, 100, 10]


def test_no_trigger_is_identity():
    x = np.cumsum(np.full(20, 0.5))
    np.testing.assert_array_equal(amplify_channel(x, AmplifierConfig(1.0, 3.0)), x)


def test_constant_sequence():
    out = amplify_channel([4.0] * 6, AmplifierConfig(1.0, 0.5))
    assert out.tolist() == [6.0] * 5 + [4.0]


def test_additive_mode():
    out = amplify_channel([10, 10, 50, 10], AmplifierConfig(2.0, 1.0, "additive"))
    assert out.tolist() == [11, 11, 51, 10]


def test_length_check():
    with pytest.raises(AmplifierError):
        amplify_channel([1.0], AmplifierConfig())


@pytest.mark.parametrize("kw", [{"alpha": 0}, {"beta": 0}, {"mode": "cube"}])
def test_config_validation(kw):
    with pytest.raises(AmplifierError):
        AmplifierConfig(**kw)


def test_windows_keep_labels_and_match_channel():
    values = np.array([[[10, 10, 50, 10], [1, 2, 3, 4]]] * 3, dtype=float)
    ws = LabeledWindowSet(4, 1, values, [0, 1, 0], [0, 1, 2])
    out = amplify_windows(ws, AmplifierConfig(2.0, 1.0))
    assert len(out) == 3
    assert out.labels.tolist() == [0, 1, 0]
    np.testing.assert_array_equal(out.values[1, 0], [20, 20, 100, 10])
    np.testing.assert_array_equal(out.values[1, 1], [1, 2, 3, 4])


def test_per_channel_alpha():
    values = np.array([[[0, 5, 5.5], [0, 5, 5.5]]], dtype=float)
    out = amplify_array(values, AmplifierConfig([1.0, 10.0], 1.0))
    np.testing.assert_array_equal(out[0, 0], [0, 5, 5.5])  # 0 * 2 stays 0
    values = np.array([[[1, 5, 5.5], [1, 5, 5.5]]], dtype=float)
    out = amplify_array(values, AmplifierConfig([1.0, 10.0], 1.0))
    np.testing.assert_array_equal(out[0, 0], [2, 5, 5.5])
    np.testing.assert_array_equal(out[0, 1], [1, 5, 5.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=40),
       st.floats(1e-3, 100), st.floats(1e-3, 10), st.sampled_from(["multiply", "additive"]))
def test_matches_reference(xs, alpha, beta, mode):
    out = amplify_channel(xs, AmplifierConfig(alpha, beta, mode))
    assert out.tolist() == reference(xs, alpha, beta, mode)
    assert len(out) == len(xs)
    x = np.asarray(xs)
    d = np.abs(np.diff(x))
    keep = (d > 0) & (d <= alpha)
    np.testing.assert_array_equal(out[:-1][keep], x[:-1][keep])
    assert out[-1] == x[-1]
    if mode == "multiply":
        trig = ~keep
        pos = trig & (x[:-1] > 1e-6)
        neg = trig & (x[:-1] < -1e-6)
        assert np.all(out[:-1][pos] > x[:-1][pos])
        assert np.all(out[:-1][neg] < x[:-1][neg])


class TestCalibrate:
    def test_zero_std(self):
        assert calibrate_alpha([[0, 1, 2, 3, 4]], k=6) == 1.0

    def test_mean_plus_std(self):
        # differences {0, 2}: mean 1, population std 1
        assert calibrate_alpha([[0, 0, 2]], k=1) == pytest.approx(2.0)

    def test_flat_signal(self):
        with pytest.raises(AmplifierError):
            calibrate_alpha([[3, 3, 3, 3]])

    def test_windows_use_normal_only(self):
        values = np.array([[[0, 1, 2]], [[0, 100, 0]]], dtype=float)
        ws = LabeledWindowSet(3, 1, values, [0, 1], [0, 1])
        assert calibrate_windows(ws, k=6).tolist() == [1.0]
