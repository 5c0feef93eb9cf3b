import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradoracle import analytic_grads, finite_difference_grads, gradcheck, max_relative_error
from xsmoe import numerics as nm
from xsmoe.errors import ContractError, NumericalAbort, ShapeError
from xsmoe.numerics import Tensor
from xsmoe.optim import Adam

SEEDS = list(range(20))


# -- forward values ----------------------------------------------------------

def test_gelu_at_origin_is_exactly_zero():
    assert nm.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_exact_erf_pinned_values():
    # x * Phi(x) with Phi the standard normal CDF, pinned from a 40-digit
    # erf evaluation: GELU(1) = 0.841345, GELU(-1) = -0.158655 (6 dp)
    out = nm.gelu(Tensor([1.0, -1.0, 0.5])).data
    assert out[0] == pytest.approx(0.841345, abs=5e-7)
    assert out[1] == pytest.approx(-0.158655, abs=5e-7)
    assert out[2] == pytest.approx(0.345731, abs=5e-7)


def test_softmax_uniform_logits():
    np.testing.assert_allclose(nm.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=16))
@settings(max_examples=100, deadline=None)
def test_softmax_is_probability_simplex(logits):
    out = nm.softmax(Tensor(logits)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-6


# -- backward: closed-form cases ----------------------------------------------

def test_linear_map_gradient():
    # loss = sum(W @ x): dW[r][c] == x[c] for every row r
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 1)))
    loss = nm.tensor_sum(nm.matmul(w, x))
    nm.backward(loss)
    np.testing.assert_allclose(w.grad, np.tile(x.data.T, (3, 1)), rtol=1e-6)


def test_symmetric_two_class_cross_entropy_gradient():
    # equal logits, true class 0: grad = [p0 - 1, p1] = [-0.5, 0.5]
    logits = Tensor([[1.7, 1.7]], requires_grad=True)
    loss = nm.neg(nm.mean(nm.gather_rows(nm.log_softmax(logits, axis=1), [0])))
    nm.backward(loss)
    np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]], atol=1e-6)


def test_backward_on_frozen_only_graph_is_noop():
    w = Tensor(np.ones((2, 2)), requires_grad=False)
    x = Tensor(np.ones((2, 2)), requires_grad=False)
    loss = nm.mean(nm.matmul(w, x))
    assert not loss.requires_grad
    nm.backward(loss)  # must not raise
    assert w.grad is None and x.grad is None
    assert len(nm.graph()) == 0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nm.backward(nm.gelu(x))


def test_no_grad_disables_recording():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with nm.no_grad():
        out = nm.matmul(w, w)
    assert not out.requires_grad
    assert len(nm.graph()) == 0


def test_graph_cleared_after_backward():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = nm.mean(nm.matmul(w, w))
    assert len(nm.graph()) > 0
    nm.backward(loss)
    assert len(nm.graph()) == 0


# -- shape contract errors -----------------------------------------------------

def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match="matmul"):
        nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_embedding_lookup_range_check():
    with pytest.raises(ShapeError):
        nm.embedding_lookup(Tensor(np.ones((3, 2))), [0, 3])


# -- dropout -------------------------------------------------------------------

def test_dropout_rate_zero_is_identity():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    assert nm.dropout(x, 0.0, np.random.default_rng(0), training=True) is x


def test_dropout_eval_mode_is_identity():
    x = Tensor(np.ones((4, 4)))
    assert nm.dropout(x, 0.5, np.random.default_rng(0), training=False) is x


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(7)
    x = Tensor(np.ones((400, 50)), requires_grad=True)
    out = nm.dropout(x, 0.25, rng, training=True)
    kept = out.data[out.data > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75, rtol=1e-6)
    assert abs(out.data.mean() - 1.0) < 0.02
    nm.backward(nm.mean(out))
    # gradient flows only through kept units, with the same scaling
    assert np.all((x.grad > 0) == (out.data > 0))


# -- finite-difference gradient checks ------------------------------------------

def _case_primitive_battery(rng):
    """One composite touching every differentiable primitive."""
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    gain = Tensor(rng.normal(1.0, 0.1, size=5), requires_grad=True)
    bias = Tensor(rng.normal(size=5), requires_grad=True)
    table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    idx = rng.integers(0, 6, size=(3,))
    cols = rng.integers(0, 5, size=(3,))
    params = [a, b, c, gain, bias, table]

    def closure():
        x = nm.matmul(a, b)                                   # matmul
        x = nm.add(x, c)                                      # add
        x = nm.layer_norm(x, gain, bias)                      # layer-norm
        x = nm.gelu(x)                                        # GELU
        y = nm.softmax(x, axis=1)                             # softmax
        z = nm.log(nm.add(y, Tensor(np.full((3, 5), 0.1))))   # log
        z = nm.mul(z, nm.exp(nm.scale(x, 0.1)))               # mul, exp, scale
        z = nm.concat([z, nm.neg(z)], axis=1)                 # concat, neg
        z = nm.slice_axis(z, 1, 2, 8)                         # slice
        z = nm.reshape(nm.transpose(z, (1, 0)), (3, 6))       # transpose, reshape
        e = nm.embedding_lookup(table, idx)                   # lookup
        n = nm.l2_norm(nm.sub(e, Tensor(np.ones((3, 3)))))    # l2-norm, sub
        picked = nm.gather_rows(nm.log_softmax(z, axis=1), cols)  # log_softmax, gather
        return nm.add(nm.mean(z), nm.add(nm.mean(picked),
                      nm.add(nm.tensor_sum(nm.scale(n, 0.01)), nm.mean(e))))

    return params, closure


def test_gradcheck_primitive_battery_twenty_seeds():
    gradcheck(_case_primitive_battery, SEEDS)


def _case_three_layer_ffn(rng):
    sizes = [(6, 5), (7, 6), (1, 7)]
    x = Tensor(rng.normal(size=(4, 5)))
    params = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True) for s in sizes]

    def closure():
        h = x
        for w in params[:-1]:
            h = nm.gelu(nm.linear(h, w))
        return nm.mean(nm.linear(h, params[-1]))

    return params, closure


def test_gradcheck_random_ffn_twenty_seeds():
    gradcheck(_case_three_layer_ffn, SEEDS)


def _case_expert_router_mixture(rng):
    """Composed network: expert FFNs -> router softmax -> mixture -> loss."""
    d, dp, n = 5, 3, 4
    h = Tensor(rng.normal(size=(n, d)))
    backbone = Tensor(rng.normal(size=(n, d)))
    w_down = [Tensor(rng.normal(size=(dp, d)) * 0.3, requires_grad=True) for _ in range(2)]
    w_up = [Tensor(rng.normal(size=(d, dp)) * 0.3, requires_grad=True) for _ in range(2)]
    router = Tensor(rng.normal(size=(3, d)) * 0.3, requires_grad=True)
    params = w_down + w_up + [router]

    def closure():
        alpha = nm.softmax(nm.linear(h, router), axis=1)
        mix = nm.mul(nm.slice_axis(alpha, 1, 0, 1), backbone)
        for j in range(2):
            z = nm.add(nm.linear(nm.gelu(nm.linear(h, w_down[j])), w_up[j]), h)
            mix = nm.add(mix, nm.mul(nm.slice_axis(alpha, 1, j + 1, j + 2), z))
        return nm.mean(nm.mul(mix, mix))

    return params, closure


def test_gradcheck_expert_router_mixture_twenty_seeds():
    gradcheck(_case_expert_router_mixture, SEEDS)


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_fresh_state_leaves_params_unchanged():
    p = Tensor([1.5, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.001)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_single_step_hand_evaluated():
    # g=1, step 1: m_hat = v_hat = 1 exactly, so the update is lr/(1+eps)
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-6)


def test_adam_moment_decay_moves_params_with_zero_gradient():
    # hand-evaluated recursion: after one g=1 step, a g=0 step still moves
    # the parameter because the first moment has not decayed to zero
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    after_first = float(p.data[0])
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    m2 = 0.9 * 0.1 + 0.0
    v2 = 0.999 * 0.001 + 0.0
    m_hat = m2 / (1 - 0.9**2)
    v_hat = v2 / (1 - 0.999**2)
    expected_delta = 0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0] != after_first
    # float32 moment buffers limit agreement with the float64 hand formula
    assert after_first - p.data[0] == pytest.approx(expected_delta, rel=1e-4)


def test_adam_never_registers_frozen_tensors():
    frozen = Tensor([1.0], requires_grad=False)
    live = Tensor([1.0], requires_grad=True)
    opt = Adam([frozen, live], lr=0.1)
    assert frozen not in opt.params and live in opt.params
    frozen.grad = np.ones(1, dtype=np.float32)  # even a stray grad is ignored
    live.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert frozen.data[0] == 1.0
    assert live.data[0] != 1.0


def test_adam_aborts_on_nan_gradient():
    p = Tensor([1.0], requires_grad=True)
    p.name = "w"
    opt = Adam([p], lr=0.1)
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NumericalAbort, match="w"):
        opt.step()


def test_adam_step_count_strictly_increments():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for expected in (1, 2, 3):
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert opt.step_count == expected


# -- dtype switch -----------------------------------------------------------------

def test_using_dtype_context():
    with nm.using_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_finite_checks_flag():
    nm.set_finite_checks(True)
    with pytest.raises(ContractError, match="log"):
        nm.log(Tensor([-1.0]))
