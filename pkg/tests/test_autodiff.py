import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import analytic_grad, numeric_grad, rel_err
from lvit import autodiff as ad
from lvit.autodiff import ComputeRecord, Parameter, RngState, Tensor
from lvit.errors import ContractError, GradCheckError, ParameterError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_grad_matches_finite_differences(nprng):
    a = Parameter("a", nprng.uniform(-1, 1, (3, 4)))
    b = Tensor(nprng.uniform(-1, 1, (4, 2)))
    (ga,) = analytic_grad(lambda: ad.matmul(a, b).sum(), a)
    num = numeric_grad(lambda: ad.matmul(a, b).sum().item(), a.data)
    assert rel_err(ga, num) < 1e-6


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform_on_equal_logits():
    np.testing.assert_array_equal(ad.softmax_lastaxis(Tensor([0.0, 0, 0, 0])).data, [0.25] * 4)


def test_softmax_shift_invariance(nprng):
    x = nprng.normal(size=(3, 5))
    a = ad.softmax_lastaxis(Tensor(x)).data
    b = ad.softmax_lastaxis(Tensor(x + 7.25)).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_softmax_direct_formula():
    e = [math.exp(1), math.exp(2), math.exp(3)]
    expected = [v / sum(e) for v in e]
    got = ad.softmax_lastaxis(Tensor([1.0, 2.0, 3.0])).data
    assert np.max(np.abs(got - expected)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    y = ad.softmax_lastaxis(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all((y > 0) & (y <= 1))


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_collapses_to_bias():
    x = Tensor(np.full((1, 5), 3.3))
    out = ad.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 5)))
    b = np.array([0.5, -1.0, 2.0, 0.0, 7.0])
    out = ad.layer_norm(x, Tensor(np.ones(5)), Tensor(b))
    np.testing.assert_array_equal(out.data[0], b)


def test_layer_norm_direct_formula():
    row = [1.0, 2.0, 3.0]
    mean = sum(row) / 3
    var = sum((v - mean) ** 2 for v in row) / 3
    expected = [(v - mean) / math.sqrt(var + 1e-5) for v in row]
    got = ad.layer_norm(Tensor(row), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5).data
    assert np.max(np.abs(got - expected)) < 1e-12


def test_layer_norm_rejects_wrong_gain_length():
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ParameterError):
        ad.layer_norm(Tensor(np.zeros(4)), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_pre_affine_moments(x):
    d = x.shape[-1]
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
    wide = x.var(axis=-1) >= 1e-3
    # normalised variance is var/(var+eps); within 1e-6 of 1 needs var >> eps
    ok = x.var(axis=-1) >= 10.0
    assert np.all(np.abs(y.var(axis=-1)[ok] - 1.0) < 1e-6)
    assert np.all(np.abs(y.var(axis=-1)[wide] - x.var(axis=-1)[wide]
                         / (x.var(axis=-1)[wide] + 1e-5)) < 1e-9)


# ---------------------------------------------------------------------------
# gelu / dropout
# ---------------------------------------------------------------------------

def test_gelu_anchor_values():
    assert ad.gelu(Tensor(0.0)).item() == 0.0
    assert abs(ad.gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    expected = 0.5 * (1 + math.tanh(0.7978845608028654 * (1 + 0.044715)))
    assert abs(ad.gelu(Tensor(1.0)).item() - expected) < 1e-12


def test_dropout_degenerate_cases_are_identity(nprng):
    x = Tensor(nprng.normal(size=(4, 4)))
    np.testing.assert_array_equal(ad.dropout(x, 0.0, RngState(1), True).data, x.data)
    np.testing.assert_array_equal(ad.dropout(x, 0.3, RngState(1), False).data, x.data)


def test_dropout_preserves_expectation():
    n, p = 10 ** 5, 0.3
    y = ad.dropout(Tensor(np.ones(n)), p, RngState(99), True).data
    # each survivor is 1/(1-p): per-element variance p/(1-p)
    se = math.sqrt(p / (1 - p) / n)
    assert abs(y.mean() - 1.0) < 3 * se
    assert set(np.unique(y)) <= {0.0, 1.0 / (1 - p)}


def test_dropout_rejects_rate_of_one():
    with pytest.raises(ParameterError):
        ad.dropout(Tensor(np.ones(3)), 1.0, RngState(0), True)


def test_dropout_masks_repeat_for_equal_seeds():
    a = ad.dropout(Tensor(np.ones(1000)), 0.3, RngState(5), True).data
    b = ad.dropout(Tensor(np.ones(1000)), 0.3, RngState(5), True).data
    c = ad.dropout(Tensor(np.ones(1000)), 0.3, RngState(6), True).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def test_reshape_keeps_row_major_order():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.reshape(x, (3, 2)).data.ravel(), np.arange(6.0))


def test_transpose_twice_is_identity(nprng):
    x = Tensor(nprng.normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(ad.swapaxes(ad.swapaxes(x, 0, 2), 0, 2).data, x.data)


def test_concat_rows():
    a, b = np.arange(6.0).reshape(2, 3), np.array([[9.0, 8, 7]])
    out = ad.concat([Tensor(a), Tensor(b)], axis=0).data
    assert out.shape == (3, 3)
    np.testing.assert_array_equal(out[:2], a)
    np.testing.assert_array_equal(out[2], b[0])


@pytest.mark.parametrize("call", [
    lambda: ad.reshape(Tensor(np.zeros(6)), (4, 2)),
    lambda: ad.swapaxes(Tensor(np.zeros((2, 2))), 0, 2),
    lambda: ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2)))], axis=0),
    lambda: ad.reduce_sum(Tensor(np.zeros((2, 2))), axis=2),
    lambda: ad.broadcast_to(Tensor(np.zeros(3)), (2, 4)),
    lambda: Tensor(np.zeros(3))[5],
])
def test_shape_errors(call):
    with pytest.raises(ShapeError):
        call()


def test_reductions():
    assert ad.reduce(Tensor(np.zeros((3, 3))), "sum").item() == 0.0
    assert ad.reduce(Tensor([1.0, 2.0, 3.0]), "mean").item() == 2.0


def test_mean_gradient_is_one_over_n(nprng):
    x = Parameter("x", nprng.normal(size=7))
    (g,) = analytic_grad(lambda: ad.reduce_mean(x), x)
    np.testing.assert_allclose(g, np.full(7, 1 / 7), rtol=0, atol=1e-15)
    num = numeric_grad(lambda: ad.reduce_mean(x).item(), x.data)
    assert rel_err(g, num) < 1e-8


# ---------------------------------------------------------------------------
# vector-Jacobian rules vs central differences
# ---------------------------------------------------------------------------

def _u(rng, *shape):
    return rng.uniform(-1, 1, shape)


VJP_CASES = {
    "add_broadcast": ([(3, 4), (4,)], lambda a, b: a + b),
    "sub_broadcast": ([(2, 1, 3), (4, 3)], lambda a, b: a - b),
    "mul_broadcast": ([(3, 4), (3, 1)], lambda a, b: a * b),
    "scale": ([(5,)], lambda a: a * -2.5),
    "matmul_batched": ([(2, 3, 4), (4, 5)], ad.matmul),
    "softmax": ([(3, 5)], ad.softmax_lastaxis),
    "layer_norm": ([(4, 6), (6,), (6,)], lambda x, g, b: ad.layer_norm(x, g, b)),
    "gelu": ([(3, 4)], ad.gelu),
    "reshape": ([(2, 6)], lambda a: ad.reshape(a, (3, 4))),
    "swapaxes": ([(2, 3, 4)], lambda a: ad.swapaxes(a, 0, 2)),
    "concat": ([(2, 3), (1, 3)], lambda a, b: ad.concat([a, b], axis=0)),
    "getitem": ([(3, 4, 5)], lambda a: a[..., 1, :]),
    "broadcast_to": ([(1, 3)], lambda a: ad.broadcast_to(a, (4, 3))),
    "sum_axis": ([(3, 4)], lambda a: ad.reduce_sum(a, axis=1)),
    "mean_axis": ([(3, 4)], lambda a: ad.reduce_mean(a, axis=0, keepdims=True)),
    "dropout": ([(6, 6)], lambda a: ad.dropout(a, 0.3, RngState(3), True)),
}


@pytest.mark.parametrize("name", sorted(VJP_CASES))
def test_vjp_matches_central_differences(name, nprng, weighted_sum):
    shapes, fn = VJP_CASES[name]
    params = [Parameter(f"x{i}", _u(nprng, *s)) for i, s in enumerate(shapes)]
    out_shape = fn(*params).shape
    head = weighted_sum(out_shape)
    grads = analytic_grad(lambda: head(fn(*params)), *params)
    for p, g in zip(params, grads):
        num = numeric_grad(lambda: head(fn(*params)).item(), p.data, eps=1e-5)
        assert rel_err(g, num) < 1e-6, p.name


def test_finiteness_sweep(nprng):
    x = Tensor(nprng.uniform(-300, 300, (4, 8)))
    d = x.shape[-1]
    outs = [ad.softmax_lastaxis(x), ad.gelu(x), ad.layer_norm(x, Tensor(np.ones(d)),
                                                               Tensor(np.zeros(d))),
            ad.matmul(x, ad.swapaxes(x, 0, 1)), ad.dropout(x, 0.5, RngState(0), True)]
    for out in outs:
        assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_linear_and_accumulation():
    w = Parameter("w", np.arange(6.0).reshape(2, 3))
    (g,) = analytic_grad(lambda: w.sum(), w)
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    (g,) = analytic_grad(lambda: w.sum() + w.sum(), w)
    np.testing.assert_array_equal(g, np.full((2, 3), 2.0))


def test_grad_is_zero_before_backward():
    w = Parameter("w", np.ones((2, 2)))
    assert w.grad.shape == w.shape
    np.testing.assert_array_equal(w.grad, 0.0)


def test_backward_twice_doubles_exactly(nprng):
    w = Parameter("w", nprng.normal(size=(3, 3)))
    x = Tensor(nprng.normal(size=(2, 3)))
    w.zero_grad()
    with ComputeRecord() as rec:
        loss = ad.softmax_lastaxis(ad.gelu(ad.matmul(x, w))).mean() * 3.0
    rec.backward(loss)
    once = w.grad.copy()
    w.zero_grad()
    ad.backward(rec, loss)
    ad.backward(rec, loss)
    assert np.array_equal(w.grad, 2 * once)


def test_backward_visits_entries_once_in_reverse(nprng):
    w = Parameter("w", nprng.normal(size=3))
    with ComputeRecord() as rec:
        loss = (ad.gelu(w) * 2.0).sum()
    assert [e.op for e in rec.entries] == ["gelu", "scale", "sum"]
    assert [e.output.node_id for e in rec.entries] == [0, 1, 2]
    seen = []
    for e in rec.entries:
        inner = e.vjp
        e.vjp = lambda g, inner=inner, op=e.op: (seen.append(op), inner(g))[1]
    rec.backward(loss)
    assert seen == ["sum", "scale", "gelu"]


def test_backward_rejects_non_scalar_and_foreign_loss():
    w = Parameter("w", np.ones(3))
    with ComputeRecord() as rec:
        y = ad.gelu(w)
    with pytest.raises(ContractError, match="scalar"):
        rec.backward(y)
    with ComputeRecord():
        other = w.sum()
    with pytest.raises(ContractError, match="not produced"):
        rec.backward(other)


def test_ops_outside_a_record_are_not_taped():
    w = Parameter("w", np.ones(3))
    y = w.sum()
    assert y.node_id is None
    with pytest.raises(ContractError):
        ComputeRecord().backward(y)


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

def test_grad_check_quadratic_form(nprng):
    a = nprng.normal(size=(3, 3))
    a = Tensor(a @ a.T)
    x = Parameter("x", nprng.normal(size=(3, 1)))
    err = ad.grad_check(lambda: ad.matmul(ad.swapaxes(x, 0, 1), ad.matmul(a, x)).sum(), [x])
    assert err < 1e-8


def test_grad_check_constant_function():
    x = Parameter("x", np.ones(4))
    c = Tensor(np.ones(4))
    assert ad.grad_check(lambda: (x * 0.0).sum() + c.sum(), [x]) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_names_parameter_with_non_finite_gradient():
    x = Parameter("bad_param", np.array([1.0]))

    def loss():
        # non-finite numeric derivative: huge values overflow at x +- eps
        return (ad.gelu(x * 1e308) * 1e308).sum()

    with pytest.raises(GradCheckError, match="bad_param"):
        ad.grad_check(loss, [x])


def test_fault_injection_is_detected(nprng):
    x = Parameter("x", nprng.normal(size=4))
    with ad.inject_backward_fault("gelu", 1.1):
        err = ad.grad_check(lambda: ad.gelu(x).sum(), [x])
    assert err > 1e-3
    assert ad.grad_check(lambda: ad.gelu(x).sum(), [x]) < 1e-8


# ---------------------------------------------------------------------------
# RngState
# ---------------------------------------------------------------------------

def test_rng_streams_are_reproducible_and_distinct():
    assert np.array_equal(RngState(42).raw(8), RngState(42).raw(8))
    assert not np.array_equal(RngState(42).raw(8), RngState(43).raw(8))
    assert not np.array_equal(RngState(42, 1).raw(8), RngState(42, 0).raw(8))


def test_rng_known_philox_words():
    # Philox4x64-10, key (7, 0), counter starting at zero
    assert RngState(7).raw(3).tolist() == [
        16086915834549238692, 5448529601018347655, 7749434361382612120]


def test_rng_distributions():
    rng = RngState(0)
    u = rng.uniform((20000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    z = rng.normal((20000,))
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
    t = rng.truncated_normal((20000,), std=0.02)
    assert np.all(np.abs(t) <= 0.04)
    e = rng.exponential((20000,))
    assert e.min() >= 0 and abs(e.mean() - 1) < 0.03


@given(st.integers(1, 60), st.integers(0, 2 ** 64 - 1))
def test_permutation_is_a_permutation(n, seed):
    assert sorted(RngState(seed).permutation(n)) == list(range(n))
