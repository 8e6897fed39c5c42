import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snu_rnnt import numerics as nx
from snu_rnnt.cells import CellConfig, init_params
from snu_rnnt.gradcheck import cell_loss_fn
from snu_rnnt.numerics import NonFiniteError, ShapeError, Value


def leaf(arr, name="x"):
    return Value(np.asarray(arr, dtype=float), name=name, requires_grad=True)


def test_sigmoid_of_zero_is_half():
    out = nx.apply("sigmoid", Value(np.zeros(5)))
    assert np.array_equal(out.value, np.full(5, 0.5))


def test_identity_matvec_leaves_operand_unchanged():
    x = np.random.default_rng(0).normal(size=7)
    out = nx.apply("matvec", Value(np.eye(7)), Value(x))
    assert np.array_equal(out.value, x)


@pytest.mark.parametrize("seed", range(5))
def test_log_softmax_normalizes(seed):
    v = np.random.default_rng(seed).normal(scale=5.0, size=11)
    out = nx.log_softmax(Value(v))
    assert abs(np.exp(out.value).sum() - 1.0) <= 1e-12


def test_gradient_of_inner_product():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=4), "a"), leaf(rng.normal(size=4), "b")
    grads = nx.backward(nx.total(nx.mul(a, b)))
    assert np.array_equal(grads["a"], b.value)
    assert np.array_equal(grads["b"], a.value)


def test_sigmoid_derivative_at_zero():
    x = leaf(0.0)
    nx.backward(nx.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_two_step_ssnu_unroll_matches_finite_differences():
    rng = np.random.default_rng(2)
    cfg = CellConfig.from_name("sSNU R", 3, 4)
    params = init_params(cfg, rng)
    params["b"] = rng.normal(size=4)
    f = cell_loss_fn(cfg, rng.normal(size=(2, 3)), rng.normal(size=(2, 4)))
    report = nx.finite_difference_check(f, params, step=1e-5, tol=1e-6)
    assert report.passed, report


def test_quadratic_form_is_exact_under_central_differences():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    A = A + A.T

    def f(p):
        x = p["x"]
        return nx.total(nx.mul(x, nx.matvec(Value(A), x)))

    report = nx.finite_difference_check(f, {"x": rng.normal(size=5)}, step=1e-3, tol=1e-9)
    assert report.max_rel_error <= 1e-9


def test_report_names_worst_parameter():
    def f(p):
        # analytic gradient of "b" is deliberately wrong: stop it via a constant copy
        b_const = Value(p["b"].value)
        return nx.total(nx.add(nx.mul(p["a"], p["a"]), nx.mul(b_const, b_const)))

    report = nx.finite_difference_check(f, {"a": np.ones(3), "b": np.ones(3)}, tol=1e-6)
    assert not report.passed
    assert report.worst_param == "b"


def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    root = nx.total(nx.mul(x, x))
    nx.backward(root)
    first = x.grad.copy()
    nx.backward(root)
    assert np.array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_is_linear_in_the_root():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 3))
    x = leaf(rng.normal(size=3))
    r1 = nx.total(nx.sigmoid(nx.matvec(Value(w), x)))
    r2 = nx.total(nx.tanh(x))
    nx.backward(nx.add(r1, r2))
    joint = x.grad.copy()
    x.zero_grad()
    nx.backward(r1)
    nx.backward(r2)
    assert np.allclose(joint, x.grad, rtol=1e-14, atol=1e-15)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    cfg = CellConfig.from_name("sSNU-o R", 4, 6)
    params = init_params(cfg, rng)
    xs, w = rng.normal(size=(5, 4)), rng.normal(size=(5, 6))
    f = cell_loss_fn(cfg, xs, w)
    vals = [f({k: Value(v) for k, v in params.items()}).value for _ in range(2)]
    assert vals[0].tobytes() == vals[1].tobytes()


def test_record_is_topologically_ordered():
    x = leaf([1.0, 2.0])
    y = nx.sigmoid(nx.mul(x, x))
    record = nx.computation_record(nx.total(y))
    position = {id(n): i for i, n in enumerate(record)}
    for node in record:
        for parent in node.parents:
            assert position[id(parent)] < position[id(node)]


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        nx.add(Value(np.ones(3)), Value(np.ones(4)))
    with pytest.raises(ShapeError):
        nx.matvec(Value(np.ones((3, 2))), Value(np.ones(3)))
    with pytest.raises(ShapeError):
        # no implicit broadcasting
        nx.mul(Value(np.ones((2, 3))), Value(np.ones(3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        nx.scale(Value(np.array([1e308])), 10.0)


def test_backward_requires_scalar_root():
    with pytest.raises(ShapeError):
        nx.backward(nx.sigmoid(leaf([1.0, 2.0])))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with nx.no_grad():
        y = nx.sigmoid(x)
    assert not y.requires_grad and y.parents == ()


def test_multiplication_ledger():
    w, x = Value(np.ones((4, 3))), Value(np.ones(3))
    with nx.count_multiplications() as c:
        y = nx.matvec(w, x)           # 12
        z = nx.mul(y, y)              # 4
        z = nx.scale(z, 0.5)          # 4
        nx.sigmoid(nx.add(z, nx.one_minus(y)))  # 0
    assert c.total == 20
    assert c.by_op == {"matvec": 12, "mul": 4, "scale": 4}


def test_float32_is_opt_in():
    assert nx.get_default_dtype() is np.float64
    with nx.default_dtype("float32"):
        assert Value([1.0]).value.dtype == np.float32
        assert nx.sigmoid(Value([0.0])).value.dtype == np.float32
    assert Value([1.0]).value.dtype == np.float64


_ELEMENTWISE = ["add", "sub", "mul"]
_UNARY = ["sigmoid", "tanh", "identity", "one_minus", "log_softmax", "flip"]


@settings(max_examples=25, deadline=None)
@given(op=st.sampled_from(_ELEMENTWISE + _UNARY + ["matvec", "scale"]),
       rows=st.integers(1, 8), cols=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_op_gradients_match_finite_differences(op, rows, cols, seed):
    rng = np.random.default_rng(seed)
    if op in _ELEMENTWISE:
        inputs = {"a": rng.normal(size=(rows, cols)), "b": rng.normal(size=(rows, cols))}
        fn = lambda p: nx.apply(op, p["a"], p["b"])  # noqa: E731
        shape = (rows, cols)
    elif op == "matvec":
        inputs = {"W": rng.normal(size=(rows, cols)), "x": rng.normal(size=cols)}
        fn = lambda p: nx.matvec(p["W"], p["x"])  # noqa: E731
        shape = (rows,)
    elif op == "scale":
        inputs = {"a": rng.normal(size=(rows, cols))}
        fn = lambda p: nx.scale(p["a"], -1.7)  # noqa: E731
        shape = (rows, cols)
    else:
        inputs = {"a": rng.normal(size=(rows, cols))}
        fn = lambda p: nx.apply(op, p["a"])  # noqa: E731
        shape = (rows, cols)
    weights = Value(rng.normal(size=shape))
    report = nx.finite_difference_check(lambda p: nx.total(nx.mul(fn(p), weights)),
                                        inputs, step=1e-5, tol=1e-6)
    assert report.passed, report
