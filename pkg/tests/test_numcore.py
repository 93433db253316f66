import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacolab.numcore import (AdamState, CheckpointError, DimensionError, NonFiniteGradientError, RngStream, T,
                             Tensor, adam_step, backward, choice, forward_mlp, gaussian, grads_of, init_mlp,
                             load_checkpoint, mlp_layers, permutation, save_checkpoint, track, uniform)
from pacolab.numcore.checkpoint import MAGIC


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-7):
    err = np.abs(analytic - numeric)
    assert np.all(err <= rel * np.maximum(np.abs(numeric), np.abs(analytic)) + floor), (analytic, numeric)


def check_op(build, *shapes, seed=0):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(build(*leaves))
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(x if j == k else arrays[j]) for j in range(len(arrays))]
            return build(*args).item()
        assert_grad_close(leaves[k].grad, numeric_grad(f, a.copy()))


# ---------------------------------------------------------------- autodiff

def test_square_gradient_at_three():
    x = Tensor(3.0, requires_grad=True)
    backward(T.square(x))
    assert x.grad == pytest.approx(6.0)


def test_constant_loss_leaves_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.add(T.mul(T.sum(x), 0.0), 5.0)
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(T.square(x))


def test_shared_leaf_accumulates():
    x = Tensor(2.0, requires_grad=True)
    backward(T.add(T.mul(x, x), x))
    assert x.grad == pytest.approx(5.0)


OPS = {
    "add_broadcast": (lambda a, b: T.sum(T.square(T.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sum(T.square(T.sub(a, b))), [(2, 3), (2, 3)]),
    "mul_broadcast": (lambda a, b: T.sum(T.mul(a, b)), [(3, 4), (3, 1)]),
    "matmul": (lambda a, b: T.sum(T.tanh(T.matmul(a, b))), [(3, 4), (4, 2)]),
    "tanh": (lambda a: T.sum(T.tanh(a)), [(5,)]),
    "exp": (lambda a: T.mean(T.exp(a)), [(2, 3)]),
    "mean_axis": (lambda a: T.sum(T.square(T.mean(a, axis=0))), [(4, 3)]),
    "sum_axis": (lambda a: T.sum(T.square(T.sum(a, axis=1))), [(4, 3)]),
    "reshape": (lambda a: T.sum(T.square(T.reshape(a, (3, 2))) * np.arange(6.0).reshape(3, 2)), [(2, 3)]),
    "concat": (lambda a, b: T.sum(T.square(T.concat([a, b], axis=1)) * np.arange(10.0).reshape(2, 5)),
               [(2, 2), (2, 3)]),
    "log_softmax": (lambda a: T.sum(T.log_softmax(a) * np.arange(12.0).reshape(3, 4)), [(3, 4)]),
    "softmax_ll": (lambda a: T.sum(T.softmax_log_likelihood(a, np.array([0, 3, 1]))), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    build, shapes = OPS[name]
    for seed in range(5):
        check_op(build, *shapes, seed=seed)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 5))
def test_mlp_gradient_random_cases(seed, width, batch):
    rng = np.random.default_rng(seed)
    params = {"W0": rng.normal(size=(3, width)), "b0": rng.normal(size=width),
              "W1": rng.normal(size=(width, 2)), "b1": rng.normal(size=2)}
    x = rng.normal(size=(batch, 3))

    def loss_of(p):
        t = {k: Tensor(v) for k, v in p.items()}
        return T.mean(T.square(forward_mlp(mlp_layers(t), x))).item()

    tensors = track(params)
    backward(T.mean(T.square(forward_mlp(mlp_layers(tensors), x))))
    for k in params:
        def f(v, k=k):
            return loss_of({**params, k: v})
        assert_grad_close(tensors[k].grad, numeric_grad(f, params[k].copy()))


def test_mlp_zero_weights_give_zero_output():
    layers = [(np.zeros((3, 4)), None), (np.zeros((4, 2)), None)]
    out = forward_mlp(layers, np.random.default_rng(0).normal(size=(5, 3)))
    np.testing.assert_array_equal(out.data, np.zeros((5, 2)))


def test_mlp_identity_single_layer():
    x = np.array([[0.3, -1.2, 4.0]])
    out = forward_mlp([(np.eye(3), np.zeros(3))], x)
    np.testing.assert_array_equal(out.data, x)


def test_mlp_two_layer_hand_evaluation():
    W0 = np.array([[0.5, -1.0], [2.0, 0.3]])
    b0 = np.array([0.1, 0.2])
    W1 = np.array([[1.5], [-0.7]])
    b1 = np.array([0.05])
    out = forward_mlp([(W0, b0), (W1, b1)], np.array([[1.0, 0.0]])).item()
    h0, h1 = np.tanh(0.5 + 0.1), np.tanh(-1.0 + 0.2)
    assert out == pytest.approx(1.5 * h0 - 0.7 * h1 + 0.05, abs=1e-15)


def test_mlp_dimension_error_names_layer():
    with pytest.raises(DimensionError, match="layer 1"):
        forward_mlp([(np.zeros((3, 4)), None), (np.zeros((5, 2)), None)], np.zeros((1, 3)))


def test_init_mlp_shapes_and_names():
    p = init_mlp([3, 8, 2], RngStream(1), prefix="enc_")
    assert {k: v.shape for k, v in p.items()} == {"enc_W0": (3, 8), "enc_b0": (8,), "enc_W1": (8, 2),
                                                 "enc_b1": (2,)}


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    new, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert new["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_constant_gradient_update_tends_to_lr_sign():
    p, s = {"w": np.array([0.0, 0.0])}, AdamState()
    g = {"w": np.array([0.3, -2.0])}
    for _ in range(200):
        before = p["w"].copy()
        p, s = adam_step(p, g, s, lr=0.01)
    np.testing.assert_allclose(p["w"] - before, [-0.01, 0.01], rtol=1e-5)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(4)
    p, s = {"a": rng.normal(size=3)}, AdamState()
    m = v = np.zeros(3)
    ref = p["a"].copy()
    for k in range(1, 6):
        g = rng.normal(size=3)
        p, s = adam_step(p, {"a": g}, s, lr=0.05, betas=(0.8, 0.99), eps=1e-6)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 0.05 * (m / (1 - 0.8**k)) / (np.sqrt(v / (1 - 0.99**k)) + 1e-6)
    np.testing.assert_allclose(p["a"], ref, rtol=1e-13)


def test_adam_nonfinite_gradient_names_parameter():
    with pytest.raises(NonFiniteGradientError, match="bias"):
        adam_step({"bias": np.zeros(2)}, {"bias": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)


def test_adam_inputs_untouched():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert p["w"][0] == 1.0


def test_grads_of_fills_missing_with_zero():
    t = track({"a": np.ones(2)})
    np.testing.assert_array_equal(grads_of(t)["a"], np.zeros(2))


# ---------------------------------------------------------------- rng

def test_rng_is_deterministic():
    a = gaussian(RngStream(11, 3), 100)
    b = gaussian(RngStream(11, 3), 100)
    np.testing.assert_array_equal(a, b)


def test_rng_counter_advances_each_call():
    s = RngStream(11, 3)
    a, b = gaussian(s, 5), gaussian(s, 5)
    assert s.counter == 2
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(gaussian(RngStream(11, 3, counter=1), 5), b)


def test_rng_moments():
    x = gaussian(RngStream(5), 100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_distinct_streams_uncorrelated():
    root = RngStream(5)
    a, b = gaussian(root.split(1), 10_000), gaussian(root.split(2), 10_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_split_does_not_advance_parent():
    root = RngStream(9)
    root.split(4)
    assert root.counter == 0
    assert root.split(4) == root.split(4)
    assert root.split(4) != root.split(5)


@pytest.mark.parametrize("bad", [-1, 2**64])
def test_rng_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        RngStream(bad)


def test_uniform_permutation_choice():
    s = RngStream(2)
    u = uniform(s, 1000, -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
    assert sorted(permutation(s, 10)) == list(range(10))
    c = choice(s, 50, 20)
    assert len(set(c.tolist())) == 20 and c.max() < 50


# ---------------------------------------------------------------- checkpoint

shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)


@settings(max_examples=30, deadline=None)
@given(st.lists(shapes, min_size=1, max_size=4), st.integers(0, 1000))
def test_checkpoint_round_trip(tmp_path_factory, shape_list, seed):
    rng = np.random.default_rng(seed)
    params = {f"p{i}": rng.normal(size=s) for i, s in enumerate(shape_list)}
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, params, {"note": "hi", "n": seed})
    back, meta = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == np.shape(params[k])
        np.testing.assert_array_equal(back[k], params[k])
    assert meta == {"note": "hi", "n": seed}


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, {"w": np.array([1.5, -2.0])})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    assert raw[16 + hlen:] == struct.pack("<2d", 1.5, -2.0)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, {"w": np.zeros(4)})
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long")
