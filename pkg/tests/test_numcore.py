import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dgcnflow.numcore import (
    AdamState,
    ComputationRecord,
    ContractError,
    DeterminismError,
    EmptyRecordError,
    NumericDomainError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    concat,
    forward,
    global_norm_clip,
    gradcheck,
    take,
)

# (op, input shapes, attrs); inputs drawn away from the relu/abs kink
CASES = [
    ("add", [(3, 4), (4,)], {}),
    ("sub", [(3, 4), (3, 1)], {}),
    ("mul", [(2, 3, 4), (3, 4)], {}),
    ("neg", [(3, 4)], {}),
    ("matmul", [(3, 4), (4, 2)], {}),
    ("matmul", [(2, 3, 4), (4, 5)], {}),
    ("matmul", [(2, 3, 4), (2, 4, 5)], {}),
    ("matmul", [(3, 4), (2, 4, 5)], {}),
    ("matmul", [(2, 1, 3, 4), (2, 4, 2)], {}),
    ("sigmoid", [(3, 4)], {}),
    ("tanh", [(3, 4)], {}),
    ("relu", [(3, 4)], {}),
    ("square", [(3, 4)], {}),
    ("abs", [(3, 4)], {}),
    ("reshape", [(3, 4)], {"shape": (2, 6)}),
    ("transpose", [(2, 3, 4)], {"axes": (2, 0, 1)}),
    ("sum", [(3, 4)], {"axis": 0, "keepdims": False}),
    ("sum", [(3, 4)], {"axis": None, "keepdims": False}),
    ("mean", [(2, 3, 4)], {"axis": (0, 2), "keepdims": True}),
    ("getitem", [(4, 5)], {"index": (slice(1, 3), slice(None))}),
    ("getitem", [(4, 5)], {"index": (np.array([0, 2, 2]),)}),
    ("take", [(4, 3)], {"indices": np.array([0, 3, 3, 1]), "axis": 0}),
    ("concat", [(2, 3), (4, 3)], {"axis": 0}),
]


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _jvp_check(op, shapes, attrs, seed, h=1e-5):
    rng = np.random.default_rng(seed)
    xs = [_away_from_zero(rng, s) for s in shapes]
    vs = [rng.normal(size=s) for s in shapes]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = forward(op, ts, **attrs)
    u = rng.normal(size=out.shape)
    backward((out * Tensor(u)).sum())
    analytic = sum(float(np.sum(t.grad * v)) for t, v in zip(ts, vs))

    def f(sign):
        probe = [Tensor(x + sign * h * v) for x, v in zip(xs, vs)]
        return float(np.sum(forward(op, probe, **attrs).data * u))

    numeric = (f(1) - f(-1)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@pytest.mark.parametrize("op,shapes,attrs", CASES, ids=[f"{c[0]}-{k}" for k, c in enumerate(CASES)])
def test_jvp_matches_central_differences_100_trials(op, shapes, attrs):
    worst = max(_jvp_check(op, shapes, attrs, seed) for seed in range(100))
    assert worst < 1e-6


def test_forward_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    assert Tensor(0.0).sigmoid().item() == 0.5
    assert np.array_equal(Tensor([-1.5, 0.0, 2.25]).relu().data, [0.0, 0.0, 2.25])


def test_forward_errors():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(NumericDomainError):
        Tensor([1.0, np.nan]).tanh()
    with pytest.raises(NumericDomainError):
        Tensor([np.inf]) + Tensor([1.0])
    with pytest.raises(ContractError):
        forward("no-such-op", [Tensor(1.0)])


def test_forward_records_only_with_grad():
    a = Tensor([1.0, 2.0])
    assert (a * a).node is None
    w = Tensor([1.0, 2.0], requires_grad=True)
    out = w * a
    assert out.node is not None and out.node.op == "mul"


def test_backward_examples():
    w = Tensor([3.0], requires_grad=True)
    backward((w * w).sum())
    assert np.array_equal(w.grad, [6.0])

    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(w.sum())
    assert np.array_equal(w.grad, np.ones((2, 3)))

    x = Tensor(0.0, requires_grad=True)
    backward(x.sigmoid() * Tensor(1.0))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_backward_errors():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * w)
    with pytest.raises(EmptyRecordError):
        backward(Tensor([1.0, 2.0]).sum())


def test_record_topological_and_replay_bit_exact():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)))
    loss = ((x @ w).tanh() * (x @ w).sigmoid() + Tensor(1.0)).square().mean()
    rec = ComputationRecord.trace(loss)
    assert rec.is_topological()
    assert rec.nodes[-1] is loss.node
    values = rec.replay()
    for node in rec.nodes:
        assert np.array_equal(values[id(node)], node.output.data)
    rec.nodes.reverse()
    assert not rec.is_topological()


def test_backward_deterministic_and_accumulates_exactly_twice():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(3, 4))
    x = rng.normal(size=(6, 3))

    def run(acc=1):
        w = Tensor(data.copy(), requires_grad=True)
        for _ in range(acc):
            loss = (Tensor(x) @ w).tanh().square().sum()
            backward(loss)
        return loss.data, w.grad

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)
    _, g_twice = run(2)
    assert np.array_equal(g_twice, 2 * g1)


def test_shared_subexpression_gradient():
    w = Tensor([2.0], requires_grad=True)
    y = w * w
    backward((y + y * w).sum())  # d/dw (w^2 + w^3) = 2w + 3w^2
    assert w.grad[0] == pytest.approx(4 + 12)


def test_concat_and_take_helpers():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 2)), requires_grad=True)
    c = concat([a, b], axis=0)
    assert c.shape == (3, 2)
    t = take(c, [2, 0, 0], axis=0)
    backward(t.sum())
    assert np.array_equal(a.grad, [[2, 2], [0, 0]])
    assert np.array_equal(b.grad, [[1, 1]])


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_activation_ranges(x):
    assert (Tensor(x).relu().data >= 0).all()
    s = Tensor(x).sigmoid().data
    assert ((s >= 0) & (s <= 1)).all()
    t = Tensor(x).tanh().data
    assert ((t >= -1) & (t <= 1)).all()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-15, 15)))
def test_open_ranges_for_moderate_inputs(x):
    s = Tensor(x).sigmoid().data
    assert ((s > 0) & (s < 1)).all()
    t = Tensor(x).tanh().data
    assert ((t > -1) & (t < 1)).all()


def test_adam_zero_grad_leaves_params():
    w = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState.for_params([w])
    w.grad = np.zeros(2)
    adam_step(state, [w])
    assert np.array_equal(w.data, [1.0, -2.0])
    assert np.array_equal(state.m[0], [0, 0]) and np.array_equal(state.v[0], [0, 0])
    assert state.step == 1


def _scalar_adam(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(w)
    return out


def test_adam_first_step_is_lr():
    w = Tensor([1.0], requires_grad=True)
    state = AdamState.for_params([w])
    w.grad = np.array([1.0])
    adam_step(state, [w])
    assert w.data[0] == pytest.approx(1 - 0.001, abs=1e-10)
    assert w.data[0] == pytest.approx(_scalar_adam(1.0, [1.0])[0], abs=1e-15)
    assert np.array_equal(w.grad, [1.0])


def test_adam_second_identical_step_not_larger():
    w = Tensor([0.5], requires_grad=True)
    state = AdamState.for_params([w])
    vals = [0.5]
    for _ in range(2):
        w.grad = np.array([0.7])
        adam_step(state, [w])
        vals.append(w.data[0])
    assert abs(vals[2] - vals[1]) <= abs(vals[1] - vals[0]) + 1e-12
    oracle = _scalar_adam(0.5, [0.7, 0.7])
    assert vals[1:] == pytest.approx(oracle, abs=1e-15)


def test_adam_matches_scalar_oracle_over_many_steps():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=50)
    w = Tensor([0.3], requires_grad=True)
    state = AdamState.for_params([w], lr=0.01)
    for g in grads:
        w.grad = np.array([g])
        adam_step(state, [w])
    assert state.step == 50
    assert w.data[0] == pytest.approx(_scalar_adam(0.3, grads, lr=0.01)[-1], rel=1e-12)


def test_adam_errors_name_parameter():
    w = Tensor([1.0], requires_grad=True, name="head.w")
    state = AdamState.for_params([w])
    with pytest.raises(ContractError, match="head.w"):
        adam_step(state, [w])
    w.grad = np.ones(1)
    other = Tensor(np.ones(3), requires_grad=True, name="wide")
    other.grad = np.ones(3)
    with pytest.raises(ContractError, match="wide"):
        adam_step(state, [other])


def test_global_norm_clip():
    a = Tensor([0.0], requires_grad=True)
    b = Tensor([0.0], requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert global_norm_clip([a, b], 1.0) == pytest.approx(5.0)
    assert a.grad[0] == pytest.approx(0.6) and b.grad[0] == pytest.approx(0.8)
    global_norm_clip([a, b], 10.0)
    assert a.grad[0] == pytest.approx(0.6)


def test_gradcheck_quadratic_is_tight():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    A = Tensor(rng.normal(size=(4, 3)))
    rep = gradcheck(lambda: (A @ w).square().sum(), [w], h=1e-5)
    assert rep.passed
    assert rep.worst[1] < 1e-8


def test_gradcheck_constant_loss():
    w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    rep = gradcheck(lambda: w.sum() * Tensor(0.0), [w])
    assert rep.errors == {"w": 0.0}
    assert np.array_equal(w.grad, [0.0, 0.0])


def test_gradcheck_detects_wrong_gradient():
    w = Tensor([0.4, -0.3], requires_grad=True, name="w")

    def loss():
        out = (w * w).sum()
        # the recorded graph says d/dw = 2w; the value is secretly w^2 + w
        return out + Tensor(float(w.data.sum()))

    rep = gradcheck(loss, [w])
    assert not rep.passed
    assert rep.worst[0] == "w"


def test_gradcheck_nondeterminism():
    w = Tensor([1.0], requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(DeterminismError):
        gradcheck(lambda: (w * Tensor(rng.normal(size=1))).sum(), [w])
    with pytest.raises(ContractError):
        gradcheck(lambda: w.sum(), [w], h=0.0)
