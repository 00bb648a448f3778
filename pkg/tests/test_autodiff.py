import zlib

import numpy as np
import pytest

from fsrf import autodiff as ad
from fsrf.autodiff import NumericalDomainError, Tape, TapeError, Tensor, grad_check


def test_relu_sign_boundary():
    assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_softmax_symmetric():
    assert ad.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_overflow_safe():
    out = ad.softmax(Tensor([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0])


@pytest.mark.parametrize("x", [[1.0, 2.0, 3.0], [-0.5, 4.0, 1e-3], [1e-8, 0.0, 0.0]])
def test_cosine_distance_self_is_zero(x):
    assert abs(ad.cosine_distance(Tensor(x), Tensor(x)).item()) < 1e-12


def test_cosine_distance_zero_vector_floored():
    assert ad.cosine_distance(Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 1.0


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.square(x))
    grads = tape.backward(loss)
    assert grads[x].tolist() == [2.0, 4.0]
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = ad.mean(x)
    assert tape.backward(loss)[x].tolist() == [0.25] * 4


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.square(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_tape_single_use():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)
    with pytest.raises(TapeError):
        with tape:
            ad.sum_(x)


def test_no_recording_without_tape_or_grad():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        ad.exp(x)
    assert len(tape) == 0
    y = Tensor([1.0], requires_grad=True)
    with Tape() as outer:
        with ad.no_grad():
            ad.exp(y)
    assert len(outer) == 0


@pytest.mark.parametrize("fn", [ad.log, ad.sqrt])
def test_domain_errors(fn):
    with pytest.raises(NumericalDomainError):
        fn(Tensor([1.0, 0.0]))
    with pytest.raises(NumericalDomainError):
        fn(Tensor([-2.0]))


def test_non_finite_forward_is_error():
    with pytest.raises(NumericalDomainError):
        ad.exp(Tensor([1000.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_forward_op_dispatch():
    out = ad.forward_op("softmax", Tensor([[0.0, 0.0], [1.0, 1.0]]), axis=0)
    assert out.shape == (2, 2)
    with pytest.raises(ValueError):
        ad.forward_op("conv2d", Tensor([1.0]))


def test_grad_check_quadratic_exact():
    assert grad_check(lambda x: ad.sum_(ad.mul(x, x)), Tensor([3.0]), 1e-5) <= 1e-8


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        grad_check(lambda x: ad.sum_(x), Tensor([1.0]), 1e-2)


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# (name, scalar function of a tensor, input generator)
W = np.random.default_rng(99).standard_normal((3, 4))
V = np.random.default_rng(98).standard_normal((2, 3))
OP_CASES = [
    ("matmul", lambda x: ad.sum_(ad.mul(ad.matmul(x, Tensor(W)), Tensor(np.ones((2, 4)) * 0.3))), (2, 3)),
    ("matmul_batched", lambda x: ad.sum_(ad.square(ad.matmul(x, ad.transpose(x, (0, 2, 1))))), (2, 2, 3)),
    ("matmul_vec", lambda x: ad.sum_(ad.square(ad.matmul(x, Tensor(W)))), (3,)),
    ("add_broadcast", lambda x: ad.sum_(ad.square(ad.add(Tensor(V), ad.reshape(x, (3,))))), (3,)),
    ("sub", lambda x: ad.sum_(ad.square(ad.sub(x, Tensor(V)))), (2, 3)),
    ("mul", lambda x: ad.sum_(ad.mul(x, ad.exp(x))), (2, 3)),
    ("scalar_mul", lambda x: ad.sum_(ad.square(ad.scalar_mul(x, -2.5))), (2, 3)),
    ("relu", lambda x: ad.sum_(ad.mul(ad.relu(x), Tensor(V))), (2, 3)),
    ("exp", lambda x: ad.sum_(ad.exp(x)), (2, 3)),
    ("log", lambda x: ad.sum_(ad.log(x)), "pos"),
    ("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=-1), Tensor(V))), (2, 3)),
    ("softmax_axis0", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=0), Tensor(V))), (2, 3)),
    ("logsumexp", lambda x: ad.sum_(ad.logsumexp(x, axis=1)), (2, 3)),
    ("sum_axis", lambda x: ad.sum_(ad.square(ad.sum_(x, axis=0))), (2, 3)),
    ("mean_axis", lambda x: ad.sum_(ad.square(ad.mean(x, axis=1, keepdims=True))), (2, 3)),
    ("square", lambda x: ad.sum_(ad.square(x)), (2, 3)),
    ("sqrt", lambda x: ad.sum_(ad.sqrt(x)), "pos"),
    ("concat", lambda x: ad.sum_(ad.mul(ad.concat([x, ad.square(x)], axis=0), Tensor(np.ones((4, 3))))), (2, 3)),
    ("layer_norm", lambda x: ad.sum_(ad.mul(ad.layer_norm(x), Tensor(V))), (2, 3)),
    ("cosine_distance", lambda x: ad.sum_(ad.cosine_distance(x, Tensor(V))), (2, 3)),
    ("xlogx", lambda x: ad.sum_(ad.xlogx(x)), "pos"),
    ("transpose_reshape", lambda x: ad.sum_(ad.mul(ad.reshape(ad.transpose(x), (6,)), Tensor(np.arange(6.0)))), (2, 3)),
    ("take", lambda x: ad.sum_(ad.square(ad.take(x, (slice(None), -1)))), (2, 3)),
]


@pytest.mark.parametrize("name,fn,shape", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, fn, shape):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = _pos(rng, (2, 3)) if shape == "pos" else rng.standard_normal(shape)
        worst = max(worst, grad_check(fn, x, 1e-5))
    assert worst <= 1e-4, f"{name}: max relative error {worst}"


def test_backward_linearity():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 3)))

    def f1():
        return ad.sum_(ad.square(ad.matmul(x, w)))

    def f2():
        return ad.sum_(ad.exp(ad.scalar_mul(ad.matmul(x, w), 0.1)))

    grads = []
    for build in (f1, f2, lambda: ad.add(f1(), f2())):
        with Tape() as tape:
            loss = build()
        grads.append(tape.backward(loss, accumulate=False)[w])
    np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-13, atol=1e-13)


def test_gradient_accumulates_into_leaf():
    x = Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum_(ad.square(x))
        tape.backward(loss)
    assert x.grad.tolist() == [4.0, -4.0]


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 2))
    out1 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
    out2 = ad.softmax(ad.matmul(Tensor(a), Tensor(b))).data
    assert out1.tobytes() == out2.tobytes()


def test_shared_subexpression_gradient():
    # a node used twice must receive both contributions
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
        loss = ad.sum_(ad.mul(y, y))
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, 2 * np.exp(4.0))
