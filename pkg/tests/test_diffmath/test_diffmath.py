from __future__ import annotations

import numpy as np
import pytest

from igpode import diffmath as dm
from igpode.adam import AdamState
from igpode.adam import adam_step
from igpode.diffmath import Tape
from igpode.errors import ContractError
from igpode.errors import DecompositionError
from igpode.errors import DimensionError
from igpode.errors import NonFiniteError

# --------------------------------------------------------------------------------
# Matrix product and Cholesky
# --------------------------------------------------------------------------------


def test_matmul_identity():
    tape = Tape()
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = tape.constant(np.eye(2)) @ tape.constant(b)
    np.testing.assert_array_equal(out.numpy(), b)


def test_matmul_row_times_column():
    tape = Tape()
    out = tape.constant([[1.0, 2.0]]) @ tape.constant([[3.0], [4.0]])
    np.testing.assert_array_equal(out.numpy(), [[11.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    tape = Tape()
    out = (tape.constant(a) @ tape.constant(b)).numpy()
    naive = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            for k in range(5):
                naive[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(out - naive)) < 1e-12


def test_matmul_shape_mismatch():
    tape = Tape()
    with pytest.raises(DimensionError):
        tape.constant(np.ones((2, 3))) @ tape.constant(np.ones((2, 3)))


def test_cholesky_reconstructs():
    a = np.array([[4.0, 2.0], [2.0, 3.0]])
    tape = Tape()
    l = dm.cholesky(tape.constant(a), jitter=0.0).numpy()
    assert np.max(np.abs(l @ l.T - a)) < 1e-12
    assert np.allclose(np.triu(l, 1), 0.0)


def test_cholesky_identity():
    tape = Tape()
    l = dm.cholesky(tape.constant(np.eye(3)), jitter=0.0)
    np.testing.assert_array_equal(l.numpy(), np.eye(3))


def test_cholesky_indefinite():
    tape = Tape()
    with pytest.raises(DecompositionError):
        dm.cholesky(tape.constant([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_with_jitter_reconstructs(rng):
    x = rng.normal(size=(4, 4))
    a = x @ x.T + np.eye(4)
    tape = Tape()
    l = dm.cholesky(tape.constant(a), jitter=1e-5).numpy()
    assert np.max(np.abs(l @ l.T - (a + 1e-5 * np.eye(4)))) < 1e-10


# --------------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------------


def test_grad_square():
    tape = Tape()
    x = tape.param("x", 3.0)
    assert dm.grad(tape, x * x)["x"] == pytest.approx(6.0)


def test_grad_softplus_at_zero():
    tape = Tape()
    x = tape.param("x", 0.0)
    assert dm.grad(tape, dm.softplus(x))["x"] == pytest.approx(0.5)


def test_grad_non_scalar_loss():
    tape = Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ContractError):
        dm.grad(tape, x * 2.0)


def test_grad_unused_parameter_is_zero():
    tape = Tape()
    x = tape.param("x", 2.0)
    tape.param("y", np.ones(2))
    grads = dm.grad(tape, x * x)
    np.testing.assert_array_equal(grads["y"], np.zeros(2))


def test_grad_needs_recording_tape():
    tape = Tape(record=False)
    x = tape.param("x", 1.0)
    with pytest.raises(ContractError):
        dm.grad(tape, x * x)


def test_audit_tape_flags_nan():
    tape = Tape(audit=True)
    x = tape.param("x", -1.0)
    with pytest.raises(NonFiniteError):
        dm.log(x)


GRAD_CASES = {
    "exp": (lambda a, b: dm.exp(a).sum(), (3, 2), None),
    "log": (lambda a, b: dm.log(a * a + 1.0).sum(), (3, 2), None),
    "tanh": (lambda a, b: dm.tanh(a).sum(), (3, 2), None),
    "sigmoid": (lambda a, b: dm.sigmoid(a).sum(), (3, 2), None),
    "softplus": (lambda a, b: dm.softplus(a).sum(), (3, 2), None),
    "elu": (lambda a, b: dm.elu(a + 0.05).sum(), (3, 2), None),
    "sqrt": (lambda a, b: dm.sqrt(a * a + 1.0).sum(), (4,), None),
    "cos_sin": (lambda a, b: (dm.cos(a) * dm.sin(a)).sum(), (4,), None),
    "add_broadcast": (lambda a, b: ((a + b) * (a + b)).sum(), (2, 3, 4), (4,)),
    "sub_broadcast": (lambda a, b: ((a - b) ** 2.0).sum(), (2, 3, 4), (3, 1)),
    "mul_broadcast": (lambda a, b: (a * b).sum(), (2, 3), (1, 3)),
    "div_broadcast": (lambda a, b: (a / (b * b + 1.0)).sum(), (2, 3), (3,)),
    "mean_axis": (lambda a, b: (a.mean(axis=1) ** 2.0).sum(), (3, 4), None),
    "sum_keepdims": (
        lambda a, b: (a.sum(axis=0, keepdims=True) * b).sum(),
        (3, 2),
        (1, 2),
    ),
    "matmul_batched": (lambda a, b: dm.tanh(a @ b).sum(), (2, 3, 4), (4, 2)),
    "transpose": (
        lambda a, b: (dm.transpose(a, (1, 0, 2)) * b).sum(),
        (2, 3, 4),
        (3, 2, 4),
    ),
    "concat_slice": (
        lambda a, b: (dm.concat([a, b], axis=1)[:, 1:] ** 2.0).sum(),
        (2, 3),
        (2, 2),
    ),
    "take": (lambda a, b: (dm.take(a, [0, 2, 0], axis=1) ** 2.0).sum(), (2, 3), None),
    "stack": (lambda a, b: (dm.stack([a, b], axis=1) ** 3.0).sum(), (2, 3), (2, 3)),
    "cholesky": (
        lambda a, b: (dm.cholesky(a @ a.T + 3.0 * np.eye(3), 0.0) * b).sum(),
        (3, 3),
        (3, 3),
    ),
    "solve_triangular": (
        lambda a, b: (
            dm.solve_triangular(dm.cholesky(a @ a.T + 3.0 * np.eye(3), 0.0), b) ** 2.0
        ).sum(),
        (3, 3),
        (3, 2),
    ),
    "solve_upper": (
        lambda a, b: dm.solve_triangular(
            dm.cholesky(a @ a.T + 3.0 * np.eye(3), 0.0).T, b, lower=False
        ).sum(),
        (3, 3),
        (3,),
    ),
}


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_op_gradients_match_finite_differences(
    case, rng, numeric_grad, assert_grads_close
):
    fn, shape_a, shape_b = GRAD_CASES[case]
    values = {"a": rng.normal(size=shape_a)}
    if shape_b is not None:
        values["b"] = rng.normal(size=shape_b)

    def evaluate(vals):
        tape = Tape(record=False)
        a = tape.param("a", vals["a"])
        b = tape.param("b", vals["b"]) if "b" in vals else None
        return fn(a, b).item()

    tape = Tape()
    a = tape.param("a", values["a"])
    b = tape.param("b", values["b"]) if "b" in values else None
    analytic = dm.grad(tape, fn(a, b))
    assert_grads_close(analytic, numeric_grad(evaluate, values))


# --------------------------------------------------------------------------------
# Elementwise values, reductions and shapes
# --------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "op, x, expected",
    [
        (dm.exp, 0.0, 1.0),
        (dm.exp, 1.0, np.e),
        (dm.exp, -np.inf, 0.0),
        (dm.log, 1.0, 0.0),
        (dm.log, np.e, 1.0),
        (dm.log, 0.5, np.log(0.5)),
        (dm.tanh, 0.0, 0.0),
        (dm.tanh, 50.0, 1.0),
        (dm.tanh, -0.5, np.tanh(-0.5)),
        (dm.sigmoid, 0.0, 0.5),
        (dm.sigmoid, 800.0, 1.0),
        (dm.sigmoid, -800.0, 0.0),
        (dm.softplus, 0.0, np.log(2.0)),
        (dm.softplus, 800.0, 800.0),
        (dm.softplus, -800.0, 0.0),
    ],
)
def test_elementwise_values(op, x, expected):
    tape = Tape()
    assert op(tape.constant(x)).item() == pytest.approx(expected, rel=1e-12, abs=1e-300)


def test_broadcast_over_leading_axes():
    tape = Tape()
    a = tape.constant(np.ones((2, 3, 2)))
    b = tape.constant([10.0, 20.0])
    np.testing.assert_array_equal((a + b).numpy()[1, 2], [11.0, 21.0])
    np.testing.assert_array_equal((a - b).numpy()[0, 0], [-9.0, -19.0])
    np.testing.assert_array_equal((a * b).numpy()[1, 1], [10.0, 20.0])
    np.testing.assert_array_equal((b / (a * 2.0)).numpy()[0, 1], [5.0, 10.0])


def test_broadcast_mismatch():
    tape = Tape()
    with pytest.raises(DimensionError):
        tape.constant(np.ones((2, 3))) + tape.constant(np.ones(2))


def test_reductions():
    tape = Tape()
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    assert x.sum().item() == 15.0
    np.testing.assert_array_equal(x.sum(axis=0).numpy(), [3.0, 5.0, 7.0])
    np.testing.assert_array_equal(x.mean(axis=1).numpy(), [1.0, 4.0])
    assert x.mean(axis=1, keepdims=True).shape == (2, 1)


def test_triangular_solve():
    tape = Tape()
    l = tape.constant([[2.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(
        dm.solve_triangular(l, np.array([2.0, 3.0])).numpy(), [1.0, 2.0]
    )
    np.testing.assert_allclose(
        dm.solve_triangular(l.T, np.array([3.0, 2.0]), lower=False).numpy(),
        [0.5, 2.0],
    )
    with pytest.raises(DimensionError):
        dm.solve_triangular(l, np.ones(3))


def test_transpose_concat_slice():
    tape = Tape()
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(x.T.numpy(), np.arange(6.0).reshape(2, 3).T)
    joined = dm.concat([x, x], axis=0)
    assert joined.shape == (4, 3)
    np.testing.assert_array_equal(joined[2:, 1].numpy(), [1.0, 4.0])
    with pytest.raises(DimensionError):
        dm.concat([x, tape.constant(np.ones((1, 2)))], axis=0)


def test_reshape_mismatch():
    tape = Tape()
    with pytest.raises(DimensionError):
        tape.constant(np.ones(6)).reshape(4, 2)


def test_mixing_tapes():
    a, b = Tape(), Tape()
    with pytest.raises(ContractError):
        a.constant(1.0) + b.constant(1.0)


def test_gaussian_is_seedable():
    first = dm.gaussian(dm.make_rng(7), (3, 4))
    second = dm.gaussian(dm.make_rng(7), (3, 4))
    other = dm.gaussian(dm.make_rng(8), (3, 4))
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, other)
    assert first.shape == (3, 4)


def test_gaussian_moments():
    draws = dm.gaussian(dm.make_rng(0), 20000)
    assert abs(draws.mean()) < 4.0 / np.sqrt(20000)
    assert draws.std() == pytest.approx(1.0, abs=0.03)


def test_not_recording_tape_keeps_no_nodes():
    tape = Tape(record=False)
    x = tape.param("x", np.ones(3))
    y = dm.exp(x).sum()
    assert len(tape) == 0
    assert y.item() == pytest.approx(3.0 * np.e)


# --------------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    params = {"p": np.array([1.0, -2.0])}
    new, state = adam_step(AdamState(lr=0.1), params, {"p": np.zeros(2)})
    np.testing.assert_array_equal(new["p"], params["p"])
    assert state.step == 1


def test_adam_moves_against_gradient():
    params, state = {"p": np.array([0.0])}, AdamState(lr=0.01)
    for _ in range(50):
        params, state = adam_step(state, params, {"p": np.array([2.5])})
    assert params["p"][0] < 0.0


def test_adam_first_step():
    new, _ = adam_step(AdamState(lr=0.1), {"p": np.array(0.0)}, {"p": np.array(1.0)})
    assert float(new["p"]) == pytest.approx(-0.1, rel=1e-6)


def test_adam_rejects_nan():
    state = AdamState(lr=0.1)
    params = {"p": np.zeros(2)}
    with pytest.raises(NonFiniteError):
        adam_step(state, params, {"p": np.array([0.0, np.nan])})
    assert state.step == 0
    np.testing.assert_array_equal(params["p"], np.zeros(2))


def test_adam_key_mismatch():
    with pytest.raises(ContractError):
        adam_step(AdamState(lr=0.1), {"p": np.zeros(1)}, {"q": np.zeros(1)})
