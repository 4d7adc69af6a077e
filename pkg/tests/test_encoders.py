import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hamlet import numerics as nx
from hamlet.encoders import (LSTM, CooccurrenceEncoder, InputTooShortError, StubEncoder, lstm_forward, segment,
                             segment_bounds, temporal_max_pool)
from hamlet.layers import set_identity
from hamlet.numerics import Rng, Tensor, grad_check


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# -- segmentation ---------------------------------------------------------

def test_even_split():
    assert [b - a for a, b in segment_bounds(100, 10)] == [10] * 10


def test_remainder_goes_to_last_segment():
    assert [b - a for a, b in segment_bounds(17, 5)] == [3, 3, 3, 3, 5]


def test_single_segment_is_whole_sequence():
    assert segment_bounds(23, 1) == [(0, 23)]


def test_too_short_raises():
    with pytest.raises(InputTooShortError):
        segment_bounds(3, 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60))
def test_segment_is_lossless(T, S):
    if T < S:
        return
    x = rand(2, T, 3)
    seq = segment(x, S)
    np.testing.assert_array_equal(np.concatenate([s.data for s in seq.segments()], axis=1), x)
    assert seq.segment_count == S and sum(seq.frames_per_segment) == T


# -- pooling --------------------------------------------------------------

def test_pool_intermediate_length():
    assert nx.max_pool1d(Tensor(rand(1, 11, 2)), 5, 3, axis=1).shape == (1, 3, 2)


def test_pool_constant_input():
    out = temporal_max_pool(Tensor(np.full((2, 11, 3), 4.5)))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 4.5))


def test_pool_spike_survives():
    x = np.zeros((1, 11, 1))
    x[0, 7, 0] = 1.0
    assert temporal_max_pool(Tensor(x)).data[0, 0] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 30), st.integers(0, 10_000))
def test_pool_matches_brute_force_windows(L, seed):
    x = rand(2, L, 3, seed=seed)
    out = temporal_max_pool(Tensor(x)).data
    starts = range(0, L - 5 + 1, 3)
    brute = np.max([x[:, s:s + 5, :].max(axis=1) for s in starts], axis=0)
    np.testing.assert_array_equal(out, brute)


def test_pool_short_sequence_falls_back_to_global_max():
    x = rand(2, 3, 4)
    np.testing.assert_array_equal(temporal_max_pool(Tensor(x)).data, x.max(axis=1))


# -- stub encoder ---------------------------------------------------------

def test_stub_zero_input_zero_bias():
    enc = StubEncoder(Rng(0), 4, 6)
    enc.proj.bias.data[...] = 0.0
    out = enc(segment(np.zeros((2, 12, 4)), 3))
    np.testing.assert_array_equal(out.data, 0.0)


def test_stub_identity_projection_is_pooled_relu():
    enc = StubEncoder(Rng(0), 4, 4)
    set_identity(enc.proj)
    x = rand(2, 12, 4)
    out = enc(segment(x, 2)).data
    expect = np.stack([temporal_max_pool(Tensor(np.maximum(x[:, a:b], 0))).data for a, b in [(0, 6), (6, 12)]], 1)
    np.testing.assert_array_equal(out, expect)


def test_stub_shape_and_mismatch():
    enc = StubEncoder(Rng(0), 5, 7)
    assert enc(segment(rand(3, 20, 5), 4)).shape == (3, 4, 7)
    with pytest.raises(nx.ShapeError):
        enc(segment(rand(3, 20, 6), 4))


# -- co-occurrence encoder ------------------------------------------------

def test_cooccurrence_zero_input_zero_features():
    enc = CooccurrenceEncoder(Rng(0), points=5, coords=3, out_dim=8)
    enc.proj.bias.data[...] = 0.0
    out = enc(segment(np.zeros((2, 12, 15)), 3), training=False)
    np.testing.assert_array_equal(out.data, 0.0)


def test_cooccurrence_output_shape_20_joints():
    enc = CooccurrenceEncoder(Rng(0), points=20, coords=3, out_dim=16)
    assert enc(segment(rand(2, 17, 60), 4), training=True, rng=Rng(1)).shape == (2, 4, 16)


def test_cooccurrence_point_count_mismatch():
    enc = CooccurrenceEncoder(Rng(0), points=20, coords=3, out_dim=16)
    with pytest.raises(nx.ShapeError):
        enc(segment(rand(2, 12, 45), 3))


def test_cooccurrence_no_leak_across_segments():
    enc = CooccurrenceEncoder(Rng(0), points=4, coords=3, out_dim=6)
    x = rand(2, 12, 12)
    base = enc(segment(x, 2), training=False).data
    x2 = x.copy()
    x2[:, 6:] += 5.0
    moved = enc(segment(x2, 2), training=False).data
    np.testing.assert_array_equal(base[:, 0], moved[:, 0])


def test_cooccurrence_gradcheck_both_stages():
    enc = CooccurrenceEncoder(Rng(0), points=3, coords=3, out_dim=4, channels=(3, 4), dropout=0.3)
    x = Tensor(rand(2, 7, 9))
    w = rand(2, 2, 4, seed=3)

    def f(inp, *params):
        return (enc(segment(inp, 2), training=True, rng=Rng(5)) * w).sum()

    params = [enc.conv1, enc.conv2, enc.proj.weight, enc.bn1.gamma, enc.bn2.beta]
    assert grad_check(f, [x, *params]) < 1e-5


# -- LSTM -----------------------------------------------------------------

def test_lstm_zero_weights_give_zero_states():
    lstm = LSTM(Rng(0), 3, 4, layers=2)
    for p in lstm.parameters():
        p.data[...] = 0.0
    out = lstm_forward(Tensor(rand(2, 5, 3)), lstm)
    np.testing.assert_array_equal(out.data, 0.0)


def test_lstm_single_step_matches_hand_cell():
    lstm = LSTM(Rng(0), 3, 2, layers=1)
    x = rand(4, 1, 3)
    out = lstm_forward(Tensor(x), lstm).data[:, 0]
    z = x[:, 0] @ lstm.w_ih[0].data + lstm.b[0].data
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, g, o = sig(z[:, 0:2]), np.tanh(z[:, 4:6]), sig(z[:, 6:8])
    np.testing.assert_allclose(out, o * np.tanh(i * g), rtol=1e-12)


def test_lstm_is_causal():
    lstm = LSTM(Rng(0), 3, 4, layers=2)
    x = rand(2, 6, 3)
    base = lstm_forward(Tensor(x), lstm).data
    x2 = x.copy()
    x2[:, 4:] += 3.0
    out = lstm_forward(Tensor(x2), lstm).data
    np.testing.assert_array_equal(base[:, :4], out[:, :4])
    assert not np.allclose(base[:, 4:], out[:, 4:])


def test_lstm_gradcheck_two_layers_four_steps():
    lstm = LSTM(Rng(0), 3, 4, layers=2)
    w = rand(2, 4, 4, seed=1)
    x = Tensor(rand(2, 4, 3))
    assert grad_check(lambda inp, *ps: (lstm_forward(inp, lstm) * w).sum(), [x, *lstm.parameters()]) < 1e-5
