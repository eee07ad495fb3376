import json
import struct

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reftr import numerics as nx
from reftr.errors import BadShape, DomainError, NaNInput, NonFiniteGradient, ShapeMismatch
from reftr.numerics import Tape, Tensor

RNG_POINTS = range(10)


def rand(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    npt.assert_array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)


def test_matmul_hand_product():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@pytest.mark.parametrize("seed", RNG_POINTS)
def test_matmul_grad(seed):
    assert nx.grad_check(lambda a, b: a @ b, [rand(seed, 3, 4), rand(seed + 100, 4, 2)]) < 1e-4


def test_batched_matmul_grad():
    assert nx.grad_check(lambda a, b: a @ b, [rand(1, 2, 3, 4), rand(2, 2, 4, 5)]) < 1e-4
    assert nx.grad_check(lambda a, b: a @ b, [rand(3, 2, 3, 4), rand(4, 4, 5)]) < 1e-4


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    npt.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_no_overflow():
    with nx.float64_mode():
        out = nx.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(NaNInput):
        nx.softmax(Tensor([np.nan, 0.0]))


@pytest.mark.parametrize("seed", RNG_POINTS)
def test_softmax_grad(seed):
    assert nx.grad_check(lambda x: nx.softmax(x), [rand(seed, 5)]) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = nx.softmax(Tensor(x, dtype=np.float32), axis=-1).data
    assert np.all(out >= 0)
    npt.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# -- elementwise family -------------------------------------------------------

def test_sigmoid_relu_definitions():
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5
    assert nx.relu(Tensor(-3.0)).item() == 0.0
    assert nx.relu(Tensor(3.0)).item() == 3.0


def test_sigmoid_extreme_inputs_finite():
    out = nx.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))


def _away_from_zero(x):
    return np.where(np.abs(x) < 0.05, 0.3, x)


UNARY = {
    "sigmoid": (nx.sigmoid, lambda x: x),
    "relu": (nx.relu, _away_from_zero),
    "gelu": (nx.gelu, lambda x: x),
    "tanh": (nx.tanh, lambda x: x),
    "exp": (nx.exp, lambda x: x),
    "log": (nx.log, lambda x: np.abs(x) + 0.5),
    "power": (lambda t: nx.power(t, 3.0), lambda x: x),
    "sqrt": (nx.sqrt, lambda x: np.abs(x) + 0.5),
    "scale": (lambda t: nx.scale(t, -2.5), lambda x: x),
    "abs": (nx.abs_, _away_from_zero),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", RNG_POINTS)
def test_unary_grad(name, seed):
    fn, prep = UNARY[name]
    assert nx.grad_check(fn, [prep(rand(seed, 2, 3))]) < 1e-4


BINARY = {
    "add": nx.add,
    "sub": nx.sub,
    "mul": nx.mul,
    "div": lambda a, b: nx.div(a, b * b + 1.0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", RNG_POINTS)
def test_binary_grad_with_trailing_broadcast(name, seed):
    fn = BINARY[name]
    assert nx.grad_check(fn, [rand(seed, 2, 3), rand(seed + 50, 3)]) < 1e-4
    assert nx.grad_check(fn, [rand(seed, 2, 3), rand(seed + 60, 2, 3)]) < 1e-4


def test_broadcast_restricted_to_trailing_dims():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 1)))
    Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    Tensor(np.ones((2, 3))) + Tensor(2.0)


def test_log_domain_error():
    with pytest.raises(DomainError):
        nx.log(Tensor([0.0, 1.0]))


def test_power_domain_error():
    with pytest.raises(DomainError):
        nx.power(Tensor([-1.0]), 0.5)


def test_shared_input_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape() as tape:
        y = (x * 3.0).sum()
    tape.backward(y)
    base = x.grad.copy()
    x.grad = None
    with Tape() as tape:
        y = ((x + x) * 3.0).sum()
    tape.backward(y)
    npt.assert_array_equal(x.grad, 2 * base)


def test_tape_runs_backward_once():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_no_tape_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert y.tape_node is None


def test_forward_bitwise_deterministic():
    a, b = rand(0, 8, 16).astype(np.float32), rand(1, 16, 4).astype(np.float32)
    r1 = nx.softmax(nx.gelu(Tensor(a) @ Tensor(b))).data
    r2 = nx.softmax(nx.gelu(Tensor(a) @ Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


def test_float32_is_preserved():
    x = Tensor(np.ones(3))
    assert (x * 0.5 + 1.0).dtype == np.float32
    assert nx.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).dtype == np.float32


# -- reductions / indexing ----------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_structural_grads(seed):
    x = rand(seed, 3, 4, 5)
    assert nx.grad_check(lambda t: t.sum(axis=1), [x]) < 1e-4
    assert nx.grad_check(lambda t: t.mean(axis=(0, 2)), [x]) < 1e-4
    assert nx.grad_check(lambda t: t.transpose(2, 0, 1).reshape(5, 12), [x]) < 1e-4
    assert nx.grad_check(lambda t: t[np.array([0, 2, 0])], [x]) < 1e-4
    assert nx.grad_check(lambda t: t[:, 1:3], [x]) < 1e-4
    assert nx.grad_check(lambda a, b: nx.concat([a, b], axis=1), [x, rand(seed + 9, 3, 2, 5)]) < 1e-4
    assert nx.grad_check(lambda a, b: nx.maximum(a, b), [x, rand(seed + 7, 3, 4, 5)]) < 1e-4
    assert nx.grad_check(lambda a, b: nx.minimum(a, b), [x, rand(seed + 7, 3, 4, 5)]) < 1e-4


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row():
    out = nx.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    npt.assert_allclose(out, 0.0, atol=1e-6)


def test_layer_norm_normalized_row():
    out = nx.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    npt.assert_allclose(out, [1.0, -1.0], atol=1e-5)


@pytest.mark.parametrize("seed", RNG_POINTS)
def test_layer_norm_grad(seed):
    err = nx.grad_check(lambda x, g, b: nx.layer_norm(x, g, b),
                        [rand(seed, 2, 8), 1.0 + 0.1 * rand(seed + 1, 8), rand(seed + 2, 8)])
    assert err < 1e-4


# -- conv / upsample ----------------------------------------------------------

def test_conv_identity_kernel():
    x = rand(0, 1, 3, 3).astype(np.float32)
    out = nx.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0).data
    npt.assert_array_equal(out, x)


def test_conv_counting_kernel():
    out = nx.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), pad=1).data
    npt.assert_array_equal(out[0, 1:3, 1:3], 9.0)
    assert out[0, 0, 0] == 4.0


def test_conv_output_size_formula():
    x = Tensor(np.zeros((2, 3, 9, 7)))
    k = Tensor(np.zeros((4, 3, 3, 3)))
    assert nx.conv2d(x, k, stride=2, pad=1).shape == (2, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        nx.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("seed", RNG_POINTS)
def test_conv_grad(seed):
    err = nx.grad_check(lambda x, k, b: nx.conv2d(x, k, b, stride=1, pad=1),
                        [rand(seed, 2, 5, 5), rand(seed + 1, 3, 2, 3, 3), rand(seed + 2, 3)])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_strided_batched_conv_grad(seed):
    err = nx.grad_check(lambda x, k: nx.conv2d(x, k, stride=2, pad=1),
                        [rand(seed, 2, 2, 6, 6), rand(seed + 1, 3, 2, 3, 3)])
    assert err < 1e-4


def test_upsample_blocks():
    out = nx.upsample2x_nearest(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data[0]
    npt.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_then_avgpool_is_identity():
    x = rand(3, 2, 3, 4).astype(np.float32)
    npt.assert_allclose(nx.avgpool2x(nx.upsample2x_nearest(Tensor(x))).data, x, rtol=1e-6)


@pytest.mark.parametrize("seed", RNG_POINTS)
def test_upsample_grad(seed):
    assert nx.grad_check(nx.upsample2x_nearest, [rand(seed, 2, 3, 3)]) < 1e-4
    assert nx.grad_check(nx.avgpool2x, [rand(seed, 2, 4, 4)]) < 1e-4


# -- grad_check itself --------------------------------------------------------

def test_grad_check_linear_exact():
    assert nx.grad_check(lambda x: x * 3.0, [rand(0, 4)]) < 1e-10


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_grad_check_non_finite():
    with pytest.raises(NonFiniteGradient):
        nx.grad_check(lambda x: nx.sqrt(x), [np.array([0.0, 1.0])], eps=1e-3)


# -- AdamW --------------------------------------------------------------------

def test_adamw_zero_grad_fixed_point():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = nx.AdamState.zeros_like([p])
    nx.adamw_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
    npt.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_descends_on_square():
    x = Tensor([1.0], requires_grad=True)
    state = nx.AdamState.zeros_like([x])
    nx.adamw_step([x], [2 * x.data], state, lr=0.1)
    assert x.data[0] < 1.0


def test_adamw_converges_on_quadratic():
    with nx.float64_mode():
        x = Tensor([1.0, -0.7], requires_grad=True)
    opt = nx.AdamW([{"params": [x], "lr": 0.05}], weight_decay=0.0)
    scales = np.array([1.0, 3.0])
    for _ in range(500):
        opt.zero_grad()
        with Tape() as tape:
            loss = ((x * x) * Tensor(scales)).sum()
        tape.backward(loss)
        opt.step()
    assert np.max(np.abs(x.data)) < 1e-3


def test_adamw_decay_is_decoupled():
    p = Tensor([2.0], requires_grad=True)
    state = nx.AdamState.zeros_like([p])
    nx.adamw_step([p], [np.zeros(1)], state, lr=0.1, weight_decay=0.5)
    npt.assert_allclose(p.data, [2.0 * (1 - 0.05)])
    assert state.m[0][0] == 0.0 and state.v[0][0] == 0.0


# -- Xavier -------------------------------------------------------------------

def test_xavier_variance():
    w = nx.xavier_init((100, 100), np.random.default_rng(0)).data
    assert abs(w.var() - 2.0 / 200) / (2.0 / 200) < 0.2
    assert np.abs(w).max() <= np.sqrt(6.0 / 200)


def test_xavier_deterministic():
    a = nx.xavier_init((7, 5), np.random.default_rng(3)).data
    b = nx.xavier_init((7, 5), np.random.default_rng(3)).data
    assert a.tobytes() == b.tobytes()


def test_xavier_bad_shape():
    with pytest.raises(BadShape):
        nx.xavier_init((10,), np.random.default_rng(0))


# -- checkpoint format ----------------------------------------------------------

def test_checkpoint_roundtrip_and_layout(tmp_path):
    arrays = {"b.w": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    nx.save_checkpoint(path, arrays, {"config": {"C": 4}})
    loaded, meta = nx.load_checkpoint(path)
    assert meta == {"config": {"C": 4}}
    for k in arrays:
        assert loaded[k].tobytes() == arrays[k].tobytes()
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    entry = {e["name"]: e for e in header["tensors"]}["b.w"]
    start = 8 + hlen + entry["offset"]
    npt.assert_array_equal(np.frombuffer(raw[start:start + 24], dtype="<f4"), np.arange(6))


def test_module_state_dict_roundtrip():
    rng = np.random.default_rng(0)
    a, b = nx.MLP(3, 4, 2, rng), nx.MLP(3, 4, 2, rng)
    b.load_state_dict(a.state_dict())
    x = Tensor(rand(0, 5, 3))
    assert a(x).data.tobytes() == b(x).data.tobytes()
