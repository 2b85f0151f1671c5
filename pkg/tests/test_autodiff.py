"""Reverse-mode engine tests: trivial identities, finite-difference
properties per primitive, stop-gradient exactness, checkpoint round-trips."""
import numpy as np
import pytest

from dgdf import autodiff as ad
from dgdf.errors import DataError


def test_sigmoid_tanh_at_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5
    assert ad.tanh(ad.Tensor(0.0)).item() == 0.0


def test_matmul_identity():
    a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, ad.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.values, a.values)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


def test_conv2d_trivial_cases():
    ones = ad.Tensor(np.ones((3, 3)))
    kern = ad.Tensor(np.ones((2, 2, 1)))
    bias = ad.Tensor(np.zeros(1))
    out = ad.conv2d(ones, kern, bias)
    np.testing.assert_array_equal(out.values, np.full((2, 2, 1), 4.0))

    delta = np.zeros((2, 2, 1))
    delta[0, 0, 0] = 1.0
    x = ad.Tensor(np.arange(16.0).reshape(4, 4))
    out = ad.conv2d(x, ad.Tensor(delta), bias)
    np.testing.assert_array_equal(out.values[:, :, 0], x.values[:3, :3])


def test_conv2d_kernel_too_large():
    with pytest.raises(ValueError, match="larger than input"):
        ad.conv2d(ad.Tensor(np.zeros((2, 2))), ad.Tensor(np.zeros((3, 3, 1))), ad.Tensor(np.zeros(1)))


def test_backward_sum_gives_ones():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ad.Tape():
        loss = ad.sum(x)
        ad.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sigmoid_linear_hand_derivative():
    # loss = sigmoid(w . x) at w = 0 has gradient 0.25 * x
    x_vals = np.array([0.5, -1.0, 2.0])
    w = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
    with ad.Tape():
        out = ad.sigmoid(ad.matmul(w, ad.Tensor(x_vals.reshape(3, 1))))
        ad.backward(ad.sum(out))
    np.testing.assert_allclose(w.grad, 0.25 * x_vals.reshape(1, 3), atol=1e-12)


def test_backward_rejects_nonscalar_and_double_consume():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.scale(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(y)
        loss = ad.sum(y)
        ad.backward(loss)
        with pytest.raises(ValueError, match="consumed"):
            ad.backward(loss)


def test_no_influence_leaf_has_zero_grad():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    unused = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        loss = ad.sum(ad.scale(x, 3.0))
        ad.backward(loss)
    assert unused.grad is None
    np.testing.assert_array_equal(unused.grad_array(), np.zeros(3))


PRIMITIVE_CASES = [
    ("add", lambda a, b: ad.sum(ad.add(a, b)), [(3, 2), (3, 2)]),
    ("add_broadcast", lambda a, b: ad.sum(ad.add(a, b)), [(3, 2), (2,)]),
    ("mul", lambda a, b: ad.sum(ad.mul(a, b)), [(4,), (4,)]),
    ("mul_broadcast", lambda a, b: ad.sum(ad.mul(a, b)), [(3, 2), (3, 1)]),
    ("scale", lambda a: ad.sum(ad.scale(a, -1.7)), [(5,)]),
    ("matmul", lambda a, b: ad.sum(ad.matmul(a, b)), [(2, 3), (3, 4)]),
    ("concat", lambda a, b: ad.sum(ad.mul(ad.concat([a, b], axis=0), ad.concat([b, a], axis=0))), [(2, 2), (2, 2)]),
    ("reshape", lambda a: ad.sum(ad.mul(ad.reshape(a, (6,)), ad.Tensor(np.arange(6.0)))), [(2, 3)]),
    ("sigmoid", lambda a: ad.sum(ad.sigmoid(a)), [(4,)]),
    ("tanh", lambda a: ad.sum(ad.tanh(a)), [(4,)]),
    ("leaky_relu", lambda a: ad.sum(ad.leaky_relu(a, 0.01)), [(6,)]),
    ("log", lambda a: ad.sum(ad.log(ad.add(ad.sigmoid(a), ad.Tensor(np.full(4, 0.1))))), [(4,)]),
    ("mean", lambda a: ad.mean(ad.mul(a, a)), [(5,)]),
    ("conv2d", lambda x, k, b: ad.sum(ad.conv2d(x, k, b)), [(2, 5, 4), (2, 3, 3), (3,)]),
    (
        "segment_sum",
        lambda a: ad.sum(
            ad.mul(ad.segment_sum(a, np.array([0, 1, 0, 2]), 3), ad.Tensor(np.arange(6.0).reshape(3, 2)))
        ),
        [(4, 2)],
    ),
    (
        "embedding_lookup",
        lambda t: ad.sum(ad.mul(ad.embedding_lookup(t, np.array([1, 1, 0])), ad.Tensor(np.arange(6.0).reshape(3, 2)))),
        [(3, 2)],
    ),
]


@pytest.mark.parametrize("name,fn,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    leaves = [ad.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    err = ad.check_gradients(fn, leaves, eps=1e-5)
    assert err < 1e-4, f"{name}: max relative error {err}"


def test_check_gradients_linear_is_exact():
    w = ad.Tensor(np.array([[2.0, -3.0, 0.5]]), requires_grad=True)
    err = ad.check_gradients(lambda t: ad.sum(ad.scale(t, 4.0)), [w], eps=1e-4)
    assert err < 1e-9


def test_check_gradients_rejects_bad_eps():
    w = ad.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="eps"):
        ad.check_gradients(lambda t: ad.sum(t), [w], eps=1e-2)


def test_stop_gradient_blocks_exactly():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.Tensor(np.array([3.0, 4.0]), requires_grad=True)
    with ad.Tape():
        blocked = ad.stop_gradient(ad.scale(x, 5.0))
        loss = ad.sum(ad.add(ad.mul(y, y), blocked))
        ad.backward(loss)
    assert x.grad is None
    np.testing.assert_array_equal(x.grad_array(), np.zeros(2))
    np.testing.assert_allclose(y.grad, 2.0 * y.values)


def test_stop_gradient_with_fd_on_live_leaves():
    x = ad.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    frozen = ad.Tensor(np.array([0.9]), requires_grad=True)

    def f(t):
        live = ad.tanh(t)
        return ad.sum(ad.mul(live, ad.stop_gradient(ad.scale(frozen, 2.0))))

    err = ad.check_gradients(f, [x], eps=1e-5)
    assert err < 1e-4


def test_clip_gradient_masks_outside():
    x = ad.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with ad.Tape():
        loss = ad.sum(ad.clip(x, 0.0, 1.0))
        ad.backward(loss)
    np.testing.assert_array_equal(x.grad, np.array([0.0, 1.0, 0.0]))


def test_forward_determinism():
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(4, 4))

    def run():
        x = ad.Tensor(vals.copy(), requires_grad=True)
        with ad.Tape():
            out = ad.sum(ad.sigmoid(ad.matmul(x, x)))
            ad.backward(out)
        return out.item(), x.grad.copy()

    a_val, a_grad = run()
    b_val, b_grad = run()
    assert a_val == b_val
    np.testing.assert_array_equal(a_grad, b_grad)


def test_params_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "params.bin"
    named = {
        "w": np.arange(6.0).reshape(2, 3),
        "b": np.array(1.5),
    }
    ad.save_params(path, named)
    loaded = ad.load_params(path)
    assert set(loaded) == {"w", "b"}
    np.testing.assert_array_equal(loaded["w"], named["w"])
    np.testing.assert_array_equal(loaded["b"], named["b"])


def test_params_checkpoint_rejects_shape_mismatch(tmp_path):
    path = tmp_path / "params.bin"
    ad.save_params(path, {"w": np.zeros((2, 3))})
    target = {"w": ad.Tensor(np.zeros((3, 2)))}
    with pytest.raises(DataError, match="shape mismatch"):
        ad.load_params_into(path, target)


def test_params_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(DataError, match="DGDF-PARAMS"):
        ad.load_params(path)
