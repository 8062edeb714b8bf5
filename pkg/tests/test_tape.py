import numpy as np
import pytest

from latticeseg import tape
from latticeseg.errors import InvalidInputError
from latticeseg.tape import backward, constant, grad_check, parameter, record
from oracles import central_difference, max_rel_error

UNARY = {
    "relu": (tape.relu, lambda x: np.where(x > 0, 1.0, 0.0)),
    "tanh": (tape.tanh, lambda x: 1 - np.tanh(x) ** 2),
    "exp": (tape.exp, np.exp),
    "square": (tape.square, lambda x: 2 * x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_derivatives_closed_form(rng, name):
    fn, deriv = UNARY[name]
    x = rng.normal(size=(4, 3))
    x[np.abs(x) < 1e-3] = 0.5
    p = parameter(x)
    (g,) = backward(fn(p).sum(), wrt=[p])
    np.testing.assert_allclose(g, deriv(x), rtol=1e-12)


def test_log_sqrt_closed_form(rng):
    x = rng.uniform(0.5, 2.0, size=5)
    p = parameter(x)
    (g,) = backward((tape.log(p) + tape.sqrt(p)).sum(), wrt=[p])
    np.testing.assert_allclose(g, 1 / x + 0.5 / np.sqrt(x))


def test_broadcast_gradients_unbroadcast(rng):
    a = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=(3,)))
    c = parameter(rng.normal(size=(4, 1)))
    ga, gb, gc = backward(((a + b) * c - b / (c * c + 1)).sum(), wrt=[a, b, c])
    assert ga.shape == (4, 3) and gb.shape == (3,) and gc.shape == (4, 1)

    def f(bv):
        return float(np.sum((a.data + bv) * c.data - bv / (c.data**2 + 1)))

    np.testing.assert_allclose(gb, central_difference(f, b.data.copy()), rtol=1e-6)


def test_matmul_and_transpose(rng):
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a, b = parameter(A), parameter(B)
    ga, gb = backward((a @ b).T.sum(), wrt=[a, b])
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ B.T)
    np.testing.assert_allclose(gb, A.T @ np.ones((3, 2)))


def test_take_accumulates_repeated_rows(rng):
    a = parameter(rng.normal(size=(3, 2)))
    (g,) = backward(a[np.array([0, 0, 2])].sum(), wrt=[a])
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_concat_pad_reshape(rng):
    a = parameter(rng.normal(size=(2, 3)))
    b = parameter(rng.normal(size=(2, 1)))
    out = tape.pad_rows(tape.concat([a, b], axis=1), 4).reshape(8, 2)
    P = rng.normal(size=(8, 2))
    ga, gb = backward((out * P).sum(), wrt=[a, b])
    full = P.reshape(4, 4)[:2]
    np.testing.assert_allclose(ga, full[:, :3])
    np.testing.assert_allclose(gb, full[:, 3:])


def test_softmax_family(rng):
    S = rng.normal(size=(5, 4))
    P = rng.normal(size=(5, 4))
    for fn in (tape.softmax, tape.log_softmax):
        p = parameter(S)
        (g,) = backward((fn(p) * P).sum(), wrt=[p])
        want = central_difference(lambda s: float(np.sum(fn(constant(s)).data * P)), S.copy())
        assert max_rel_error(g, want) < 1e-7
    np.testing.assert_allclose(np.exp(tape.log_softmax(constant(S)).data).sum(1), 1.0)


def test_norm_zero_gradient_at_origin():
    p = parameter(np.zeros((2, 3)))
    (g,) = backward(tape.norm(p, axis=1).sum(), wrt=[p])
    np.testing.assert_array_equal(g, 0.0)


def test_mean_and_axis_sum(rng):
    x = rng.normal(size=(3, 4))
    p = parameter(x)
    (g,) = backward(p.mean(axis=0).sum() + p.sum(axis=1, keepdims=True).mean(), wrt=[p])
    np.testing.assert_allclose(g, np.full((3, 4), 1 / 3 + 1 / 3))


def test_backward_requires_scalar():
    with pytest.raises(InvalidInputError):
        backward(parameter(np.ones(2)) * 2)


def test_unreachable_gets_zero_and_leaves_accumulate():
    a, b = parameter(np.ones(2)), parameter(np.ones(3))
    ga, gb = backward((a * 3).sum(), wrt=[a, b])
    np.testing.assert_array_equal(gb, 0)
    np.testing.assert_array_equal(a.grad, 3)
    backward((a * 3).sum())
    np.testing.assert_array_equal(a.grad, 6)
    tape.zero_grad([a])
    assert a.grad is None


def test_shared_subexpression(rng):
    x = parameter(rng.normal(size=3))
    y = x * x
    (g,) = backward((y + y * y).sum(), wrt=[x])
    np.testing.assert_allclose(g, 2 * x.data + 4 * x.data**3)


def test_constants_record_no_graph():
    out = record(np.ones(2), (constant(np.ones(2)),), lambda g: (g,), "noop")
    assert not out.requires_grad and out.parents == ()


class TestGradCheck:
    def test_passes_on_correct_op(self, rng):
        rep = grad_check(lambda a, b: tape.tanh(a @ b).sum(),
                         [rng.normal(size=(3, 2)), rng.normal(size=(2, 2))])
        assert rep.passed and rep.max_error < 1e-8

    def test_detects_wrong_vjp(self, rng):
        def bad_square(a):
            return record(a.data**2, (a,), lambda g: (g * a.data,), "bad_square")

        rep = grad_check(lambda a: bad_square(a).sum(), [rng.normal(size=4) + 3])
        assert not rep.passed and rep.max_error > 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_reports_nan_with_op_name(self):
        rep = grad_check(lambda a: tape.log(a).sum(), [np.array([-1.0, 2.0])])
        assert not rep.passed
        assert "log" in rep.message

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_first_nonfinite_names_op(self):
        a = parameter(np.array([0.0, 1.0]))
        out = (tape.log(a) * 2).sum()
        assert tape.first_nonfinite(out).op == "log"

    def test_subset_probing(self, rng):
        rep = grad_check(lambda a: (a * a).sum(), [rng.normal(size=(50,))], max_entries=5)
        assert rep.passed and len(rep.errors) == 1
