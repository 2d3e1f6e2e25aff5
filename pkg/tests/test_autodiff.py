import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpdlab import autodiff as ad
from fpdlab.autodiff import ShapeError, Tensor, backward, forward_op
from fpdlab.gradcheck import fd_mismatch, numeric_grad, run_suite


def scalarize(out, probe):
    return ad.sum_(ad.mul(out, Tensor(probe)))


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]), axis=-1)
    assert np.array_equal(out.values, [0.5, 0.5])


def test_gather_rows_duplicates(rng):
    table = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    out = ad.gather_rows(table, np.array([2, 2]))
    assert np.array_equal(out.values[0], table.values[2])
    assert np.array_equal(out.values[1], table.values[2])
    backward(ad.sum_(out))
    expected = np.zeros((4, 3))
    expected[2] = 2.0
    assert np.array_equal(table.grad, expected)


def test_matmul_shapes_and_fd(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    probe = rng.normal(size=(2, 4))
    out = ad.matmul(a, b)
    assert out.shape == (2, 4)
    backward(scalarize(out, probe))

    for t, other, left in ((a, b, True), (b, a, False)):
        def fn(vals):
            x = Tensor(vals)
            o = ad.matmul(x, Tensor(other.values)) if left else ad.matmul(Tensor(other.values), x)
            return float(scalarize(o, probe).values)

        numeric = numeric_grad(fn, t.values)
        assert np.abs(t.grad - numeric).max() < 1e-6 * max(1.0, np.abs(numeric).max())


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_stop_gradient_identity_and_zero_backward(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    sg = ad.stop_gradient(x)
    assert sg.values is x.values  # bit-exact forward
    loss = ad.sum_(ad.square(ad.sub(x, sg)))
    backward(loss)
    assert loss.item() == 0.0
    assert np.array_equal(x.grad, np.zeros(5))


def test_stop_gradient_additive_passthrough(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    c = Tensor(rng.normal(size=(4,)), requires_grad=True)
    y = ad.add(x, ad.stop_gradient(c))
    backward(ad.sum_(y))
    assert np.array_equal(x.grad, np.ones(4))
    assert np.array_equal(c.grad, np.zeros(4))


def test_ste_composite_forward_equals_hard(rng):
    # hard + (soft - sg(soft)) evaluates to the hard values
    table = rng.normal(size=(6, 3))
    tokens = np.array([1, 4, 4, 0])
    probs = Tensor(rng.dirichlet(np.ones(6), size=4), requires_grad=True)
    soft = ad.matmul(probs, Tensor(table))
    composite = ad.add(Tensor(table[tokens]), ad.sub(soft, ad.stop_gradient(soft)))
    np.testing.assert_allclose(composite.values, table[tokens], atol=1e-15)
    backward(ad.sum_(composite))
    # gradient w.r.t. the soft path is the identity map
    soft2 = ad.matmul(Tensor(probs.values, requires_grad=True), Tensor(table))
    backward(ad.sum_(soft2))
    np.testing.assert_array_equal(probs.grad, soft2._parents[0].grad)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        backward(ad.mul(x, 2.0))


def test_backward_sum_and_square(rng):
    x = Tensor(np.ones(3), requires_grad=True)
    backward(ad.sum_(x))
    assert np.array_equal(x.grad, [1, 1, 1])

    y = Tensor([1.0, 2.0], requires_grad=True)
    backward(ad.sum_(ad.square(y)))
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_backward_accumulates_on_repeat():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_(ad.square(x))
    backward(loss)
    backward(loss)
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_non_requires_grad_leaf_stays_zero(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    c = Tensor(rng.normal(size=3))
    backward(ad.sum_(ad.mul(x, c)))
    assert np.array_equal(c.grad, np.zeros(3))
    assert np.array_equal(x.grad, c.values)


def test_backward_deterministic(rng):
    vals = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        x = Tensor(vals, requires_grad=True)
        h = ad.gelu(ad.matmul(x, Tensor(vals.T)))
        loss = ad.mean_(ad.square(ad.layer_norm(h)))
        backward(loss)
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_mlp_matches_finite_differences(rng):
    """Random 3-layer MLP: every parameter gradient vs central differences."""
    sizes = [(5, 8), (8,), (8, 6), (6,), (6, 1), (1,)]
    params = [Tensor(rng.normal(scale=0.7, size=s), requires_grad=True) for s in sizes]
    x0 = rng.normal(size=(3, 5))

    def forward(tensors):
        h = Tensor(x0)
        for i in range(0, 6, 2):
            h = ad.add(ad.matmul(h, tensors[i]), tensors[i + 1])
            if i < 4:
                h = ad.gelu(h)
        return ad.mean_(h)

    loss = forward(params)
    backward(loss)
    for slot, p in enumerate(params):
        def fn(vals, slot=slot):
            trial = [Tensor(q.values) for q in params]
            trial[slot] = Tensor(vals)
            return float(forward(trial).values)

        numeric = numeric_grad(fn, p.values)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert (np.abs(p.grad - numeric) / denom).max() < 1e-4


def test_forward_op_dispatch(rng):
    out = forward_op("add", Tensor([1.0]), Tensor([2.0]))
    assert out.values[0] == 3.0
    with pytest.raises(ValueError, match="unknown operator id"):
        forward_op("conv2d", Tensor([1.0]))


def test_full_primitive_suite_passes():
    rows = run_suite()
    failed = [r.name for r in rows if not r.passed]
    assert not failed, f"primitives outside tolerance: {failed}"


def test_suite_catches_corruption():
    rows = run_suite(corrupt="mul")
    assert any(not r.passed for r in rows)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_softmax_rows_normalized(rows, cols, seed):
    vals = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
    out = ad.softmax(Tensor(vals), axis=-1).values
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_broadcast_grad_is_count(rows, cols, seed):
    vals = np.random.default_rng(seed).normal(size=(1, cols))
    x = Tensor(vals, requires_grad=True)
    backward(ad.sum_(ad.broadcast_to(x, (rows, cols))))
    assert np.array_equal(x.grad, np.full((1, cols), float(rows)))
