import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ganem import autodiff as ad
from ganem import nn


def _layer(w, b, act=None):
    return nn.DenseLayer(np.asarray(w, float), np.asarray(b, float), act)


# ------------------------------------------------------------------ layers


def test_identity_layer_passes_input_through():
    x = np.random.default_rng(0).normal(size=(5, 3))
    out = nn.mlp_forward([_layer(np.eye(3), np.zeros(3))], x)
    np.testing.assert_array_equal(out.value, x)


def test_zero_weight_layer_outputs_bias():
    b = np.array([0.5, -1.0])
    out = nn.mlp_forward([_layer(np.zeros((2, 4)), b)], np.random.default_rng(1).normal(size=(3, 4)))
    np.testing.assert_array_equal(out.value, np.tile(b, (3, 1)))


def test_two_layer_mlp_matches_hand_loop():
    rng = np.random.default_rng(2)
    l1 = nn.DenseLayer.create(4, 6, "leaky_relu", rng)
    l2 = nn.DenseLayer.create(6, 3, "tanh", rng)
    x = rng.normal(size=(7, 4))
    expected = np.empty((7, 3))
    for n in range(7):
        h = [sum(l1.weight[j, i] * x[n, i] for i in range(4)) + l1.bias[j] for j in range(6)]
        h = [v if v > 0 else 0.2 * v for v in h]
        for j in range(3):
            expected[n, j] = np.tanh(sum(l2.weight[j, i] * h[i] for i in range(6)) + l2.bias[j])
    np.testing.assert_allclose(nn.mlp_forward([l1, l2], x).value, expected, rtol=1e-12, atol=1e-14)


def test_width_mismatch_names_layer_index():
    layers = [nn.DenseLayer.create(3, 4), nn.DenseLayer.create(5, 2)]
    with pytest.raises(ad.ShapeError, match="layer 1"):
        nn.mlp_forward(layers, np.ones((2, 3)))


def test_layer_rejects_bad_shapes_and_activation():
    with pytest.raises(ValueError):
        nn.DenseLayer(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ValueError):
        nn.DenseLayer(np.ones((2, 3)), np.ones(2), "relu6")


def test_frozen_forward_records_no_parameters():
    layer = nn.DenseLayer.create(2, 2, rng=np.random.default_rng(0))
    g = ad.Graph()
    x = g.variable(np.ones((1, 2)))
    out = nn.mlp_forward([layer], x, frozen=True)
    grads = nn.gather_grads(g, ad.backward(g, ad.sum_(out)), layer.params())
    assert all(not gr.any() for gr in grads)


# ------------------------------------------------------------------ RMSprop


def test_zero_gradient_leaves_params_and_decays_accumulator():
    p = np.array([1.0, -2.0])
    state = nn.RmspropState(lr=0.1)
    state.accumulators = [np.array([0.5, 2.0])]
    nn.rmsprop_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    np.testing.assert_allclose(state.accumulators[0], [0.49, 1.96], rtol=1e-15)


def test_single_step_closed_form():
    p = np.array([0.0])
    state = nn.RmspropState(lr=2e-4, decay=0.98, eps=1e-8)
    nn.rmsprop_step([p], [np.array([1.0])], state)
    assert state.accumulators[0][0] == pytest.approx(0.02, rel=1e-15)
    assert p[0] == pytest.approx(-2e-4 / np.sqrt(0.02 + 1e-8), rel=1e-13)


def test_two_steps_follow_recurrence():
    g = 0.7
    p = np.array([0.3])
    state = nn.RmspropState(lr=1e-3, decay=0.9, eps=1e-8)
    acc, want = 0.0, 0.3
    for _ in range(2):
        nn.rmsprop_step([p], [np.array([g])], state)
        acc = 0.9 * acc + 0.1 * g * g
        want -= 1e-3 * g / np.sqrt(acc + 1e-8)
    assert state.accumulators[0][0] == pytest.approx(acc, rel=1e-14)
    assert p[0] == pytest.approx(want, rel=1e-13)


def test_rmsprop_shape_mismatch():
    with pytest.raises(ValueError):
        nn.rmsprop_step([np.zeros(2)], [np.zeros(3)], nn.RmspropState())
    with pytest.raises(ValueError):
        nn.rmsprop_step([np.zeros(2)], [], nn.RmspropState())


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(decay=1.0), dict(decay=0.0), dict(eps=0.0)])
def test_rmsprop_rejects_bad_hyperparameters(kw):
    with pytest.raises(ValueError):
        nn.RmspropState(**kw)


def test_lr_decay_per_epoch():
    state = nn.RmspropState(lr=1.0, lr_decay=0.5)
    state.end_epoch()
    state.end_epoch()
    assert state.lr == 0.25


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)), st.integers(1, 5))
def test_accumulator_stays_nonnegative_and_zero_grad_is_noop(grad, steps):
    p = np.zeros((3, 2))
    state = nn.RmspropState(lr=1e-2)
    for _ in range(steps):
        nn.rmsprop_step([p], [grad], state)
    assert (state.accumulators[0] >= 0).all()
    before = p.copy()
    nn.rmsprop_step([p], [np.zeros_like(p)], state)
    np.testing.assert_array_equal(p, before)


# ------------------------------------------------------------------ clipping


def test_clip_inside_values_unchanged():
    p = np.array([0.004, -0.01, 0.0, 0.01])
    nn.clip_weights([p], 0.01)
    np.testing.assert_array_equal(p, [0.004, -0.01, 0.0, 0.01])


def test_clip_saturates():
    p = np.array([5.0, -5.0])
    nn.clip_weights([p], 0.01)
    np.testing.assert_array_equal(p, [0.01, -0.01])


@pytest.mark.parametrize("c", [0.0, -1.0])
def test_clip_rejects_nonpositive(c):
    with pytest.raises(ValueError):
        nn.clip_weights([np.ones(2)], c)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)),
    st.floats(1e-4, 10.0),
)
def test_clip_matches_elementwise_oracle(v, c):
    expected = np.array([[max(-c, min(c, x)) for x in row] for row in v])
    p = v.copy()
    nn.clip_weights([p], c)
    np.testing.assert_array_equal(p, expected)
    assert np.abs(p).max() <= c


# ------------------------------------------------------------------ checkpoints


def _tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=3), "scalar": np.array(2.5)}


def test_round_trip_is_bit_exact():
    src = _tensors()
    got, meta = nn.load_params(nn.save_params(src, {"note": "x"}))
    assert meta == {"note": "x"}
    assert list(got) == list(src)
    for k in src:
        assert got[k].shape == src[k].shape
        assert got[k].tobytes() == src[k].tobytes()


def test_every_truncation_is_rejected():
    blob = nn.save_params(_tensors())
    for cut in range(0, len(blob), 7):
        with pytest.raises(nn.CheckpointError):
            nn.load_params(blob[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(nn.CheckpointError, match="trailing"):
        nn.load_params(nn.save_params(_tensors()) + b"\0")


def test_bad_magic_and_version():
    blob = nn.save_params(_tensors())
    with pytest.raises(nn.CheckpointError, match="magic"):
        nn.load_params(b"XXXX" + blob[4:])
    bumped = blob[:4] + (nn.FORMAT_VERSION + 1).to_bytes(4, "little") + blob[8:]
    with pytest.raises(nn.CheckpointError, match="version"):
        nn.load_params(bumped)


def test_shape_manifest_mismatch():
    blob = nn.save_params(_tensors())
    with pytest.raises(nn.CheckpointError, match="manifest"):
        nn.load_params(blob, {"a.weight": (4, 3), "a.bias": (3,), "scalar": ()})
    with pytest.raises(nn.CheckpointError):
        nn.load_params(blob, {"a.weight": (3, 4)})


GOLDEN_SCRIPT = """
import sys, numpy as np
from ganem import nn
t, _ = nn.load_params(open(sys.argv[1], 'rb').read())
layer = nn.DenseLayer(t['w'], t['b'], 'tanh')
x = np.linspace(-1, 1, 12).reshape(4, 3)
sys.stdout.write(nn.mlp_forward([layer], x).value.tobytes().hex())
"""


def test_forward_identical_in_fresh_process(tmp_path):
    layer = nn.DenseLayer.create(3, 5, "tanh", np.random.default_rng(9))
    path = tmp_path / "layer.gemc"
    path.write_bytes(nn.save_params({"w": layer.weight, "b": layer.bias}))
    x = np.linspace(-1, 1, 12).reshape(4, 3)
    here = nn.mlp_forward([layer], x).value.tobytes().hex()
    out = subprocess.run([sys.executable, "-c", GOLDEN_SCRIPT, str(path)], capture_output=True, text=True, check=True)
    assert out.stdout == here
