"""Op-suite forward semantics, adjoint correctness, Adam, and grad_check."""

import numpy as np
import pytest

from mmchain.errors import ContractViolation, DomainError, NumericError
from mmchain.optim import AdamState, adam_step, grad_check
from mmchain.tensor import (
    Tape,
    Tensor,
    add,
    affine,
    attend,
    backward,
    bce_with_logits_loss,
    concat,
    concat_affine,
    cross_entropy_loss,
    embedding_lookup,
    exp,
    log,
    log_softmax,
    matmul,
    mse_loss,
    mul,
    nll_of_probs_loss,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    rnn_tanh_cell,
    sigmoid,
    slice_,
    softmax,
    sub,
    tanh,
    time_reverse,
    zero_grad,
)


def scalarize(t):
    """Random fixed projection to a scalar so any op output can be a loss."""
    rng = np.random.default_rng(t.data.size)
    w = rng.normal(size=t.data.shape)
    return reduce_sum(mul(t, Tensor(w)))


def fd_check(build_loss, params, tol=1e-4, step=1e-5):
    report = grad_check(build_loss, params, step=step, tol=tol)
    assert report.passed, "\n".join(report.lines())


# ---------------------------------------------------------------------------
# forward semantics


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-12)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, np.eye(3) @ a)
    assert np.allclose(out.data, a)


def test_square_derivative():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = reduce_sum(mul(x, x))
    backward(y, tape)
    assert np.allclose(x.grad, [6.0], atol=1e-12)


def test_softmax_rows_sum_to_one():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-50, 50, size=(4, 7))
        out = softmax(Tensor(x))
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) <= 1e-9)


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ContractViolation, match="matmul"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))


def test_embedding_id_out_of_range():
    with pytest.raises(ContractViolation):
        embedding_lookup(Tensor(np.zeros((4, 2))), [0, 4])


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])


# ---------------------------------------------------------------------------
# losses against independent references


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)), requires_grad=True)
    loss = cross_entropy_loss(logits, np.array([0, 1, 3]))
    assert np.isclose(float(loss.data), np.log(4.0), atol=1e-12)


def test_cross_entropy_confident_limit():
    logits = np.full((2, 5), -1e3)
    logits[0, 2] = 1e3
    logits[1, 0] = 1e3
    loss = cross_entropy_loss(Tensor(logits), np.array([2, 0]))
    assert float(loss.data) < 1e-9


def test_cross_entropy_matches_scalar_reference():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5))
    targets = rng.integers(0, 5, size=3)
    # scalar-by-scalar reference
    total = 0.0
    for i in range(3):
        row = logits[i]
        z = 0.0
        for v in row:
            z += np.exp(v - row.max())
        total += -(row[targets[i]] - row.max() - np.log(z))
    ref = total / 3
    loss = cross_entropy_loss(Tensor(logits), targets)
    assert np.isclose(float(loss.data), ref, atol=1e-12)


def test_cross_entropy_all_masked_is_error():
    with pytest.raises(ContractViolation):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 1]), mask=[False, False])


def test_mse_identity_and_offset():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 4))
    assert float(mse_loss(Tensor(a), Tensor(a)).data) == 0.0
    assert np.isclose(float(mse_loss(Tensor(a + 1.0), Tensor(a)).data), 1.0, atol=1e-12)


def test_mse_matches_reference_loop():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(4)) / 16
    assert np.isclose(float(mse_loss(Tensor(a), Tensor(b)).data), ref, atol=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ContractViolation):
        mse_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


# ---------------------------------------------------------------------------
# backward contracts


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor([2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        y = reduce_sum(mul(x, x))
        _ = mul(unused, 2.0)  # recorded but not part of the loss
    backward(y, tape)
    assert np.array_equal(unused.grad, [0.0])


def test_constant_loss_yields_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        _ = mul(x, 3.0)
        loss = reduce_sum(Tensor([4.0]))  # constant: no grad path to x
        loss2 = add(loss, 0.0)
    backward(loss2, tape)
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractViolation):
        backward(y, tape)


def test_composite_matches_finite_differences_tightly():
    rng = np.random.default_rng(5)
    params = {
        "w": Tensor(rng.normal(size=(4, 3)) * 0.5, requires_grad=True),
        "b": Tensor(rng.normal(size=3) * 0.1, requires_grad=True),
    }
    x = Tensor(rng.normal(size=(2, 4)))

    def loss_fn():
        return reduce_sum(tanh(affine(x, params["w"], params["b"])))

    report = grad_check(loss_fn, params, step=1e-5, tol=1e-6)
    assert report.passed, "\n".join(report.lines())


def test_repeated_backward_on_rerecorded_graph_is_bit_identical():
    rng = np.random.default_rng(9)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3)))

    def run():
        zero_grad([w])
        with Tape() as tape:
            loss = reduce_mean(sigmoid(matmul(x, w)))
        backward(loss, tape)
        return w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_two_losses_on_one_tape_sum_adjoints():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        l1 = reduce_sum(mul(x, x))  # d/dx = 4
        l2 = reduce_sum(mul(x, 3.0))  # d/dx = 3
    backward(l1, tape)
    backward(l2, tape)
    assert np.allclose(x.grad, [4.0 + 3.0])


def test_gradient_accumulation_of_summed_losses():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        total = add(reduce_sum(mul(x, x)), reduce_sum(mul(x, 3.0)))
    backward(total, tape)
    assert np.allclose(x.grad, [7.0])


# ---------------------------------------------------------------------------
# adjoints of every op against finite differences, many seeds


OP_CASES = [
    ("add", lambda p: scalarize(add(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("add_broadcast", lambda p: scalarize(add(p["a"], p["b"])), {"a": (3, 4), "b": (4,)}),
    ("sub", lambda p: scalarize(sub(p["a"], p["b"])), {"a": (2, 3), "b": (2, 3)}),
    ("mul", lambda p: scalarize(mul(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}),
    ("matmul", lambda p: scalarize(matmul(p["a"], p["b"])), {"a": (3, 4), "b": (4, 2)}),
    (
        "matmul_batched",
        lambda p: scalarize(matmul(p["a"], p["b"])),
        {"a": (2, 3, 4), "b": (4, 2)},
    ),
    ("tanh", lambda p: scalarize(tanh(p["a"])), {"a": (3, 3)}),
    ("sigmoid", lambda p: scalarize(sigmoid(p["a"])), {"a": (3, 3)}),
    ("relu", lambda p: scalarize(relu(add(p["a"], 0.3))), {"a": (3, 3)}),
    ("exp", lambda p: scalarize(exp(p["a"])), {"a": (3, 3)}),
    ("log", lambda p: scalarize(log(add(mul(p["a"], p["a"]), 0.5))), {"a": (3, 3)}),
    ("softmax", lambda p: scalarize(softmax(p["a"])), {"a": (3, 5)}),
    ("log_softmax", lambda p: scalarize(log_softmax(p["a"])), {"a": (3, 5)}),
    (
        "concat",
        lambda p: scalarize(concat([p["a"], p["b"]], axis=1)),
        {"a": (2, 3), "b": (2, 2)},
    ),
    ("slice", lambda p: scalarize(slice_(p["a"], (slice(None), slice(1, 3)))), {"a": (3, 4)}),
    ("reshape", lambda p: scalarize(reshape(p["a"], (2, 6))), {"a": (3, 4)}),
    ("reduce_sum", lambda p: reduce_sum(p["a"]), {"a": (3, 4)}),
    ("reduce_sum_axis", lambda p: scalarize(reduce_sum(p["a"], axis=1)), {"a": (3, 4)}),
    ("reduce_mean", lambda p: reduce_mean(p["a"]), {"a": (3, 4)}),
    ("reduce_mean_axis", lambda p: scalarize(reduce_mean(p["a"], axis=0)), {"a": (3, 4)}),
    (
        "embedding",
        lambda p: scalarize(embedding_lookup(p["a"], np.array([0, 2, 2, 1]))),
        {"a": (4, 3)},
    ),
    (
        "affine",
        lambda p: scalarize(affine(p["x"], p["w"], p["b"])),
        {"x": (3, 4), "w": (4, 2), "b": (2,)},
    ),
    (
        "concat_affine",
        lambda p: scalarize(concat_affine(p["x"], p["y"], p["w"], p["b"])),
        {"x": (3, 2), "y": (3, 3), "w": (5, 2), "b": (2,)},
    ),
    (
        "rnn_cell",
        lambda p: scalarize(rnn_tanh_cell(p["x"], p["h"], p["wx"], p["wh"], p["b"])),
        {"x": (2, 3), "h": (2, 4), "wx": (3, 4), "wh": (4, 4), "b": (4,)},
    ),
    (
        "attend",
        lambda p: scalarize(attend(p["s"], p["q"])),
        {"s": (2, 5, 3), "q": (2, 3)},
    ),
    (
        "time_reverse",
        lambda p: scalarize(time_reverse(p["a"], np.array([3, 2]))),
        {"a": (2, 4, 3)},
    ),
    (
        "cross_entropy",
        lambda p: cross_entropy_loss(p["a"], np.array([[1, 0], [2, 3]]), [[1, 1], [1, 0]]),
        {"a": (2, 2, 5)},
    ),
    (
        "nll_of_probs",
        lambda p: nll_of_probs_loss(softmax(p["a"]), np.array([1, 0, 2])),
        {"a": (3, 4)},
    ),
    (
        "mse",
        lambda p: mse_loss(p["a"], p["b"], mask=[True, False, True]),
        {"a": (3, 4), "b": (3, 4)},
    ),
    (
        "bce_logits",
        lambda p: bce_with_logits_loss(
            p["a"], np.array([[1.0, 0.0], [0.0, 1.0]]), pos_weight=3.0
        ),
        {"a": (2, 2)},
    ),
]


@pytest.mark.parametrize("name,build,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
@pytest.mark.parametrize("seed", range(20))
def test_op_adjoints_match_finite_differences(name, build, shapes, seed):
    rng = np.random.default_rng(seed)
    params = {
        k: Tensor(rng.normal(size=shape) * 0.7, requires_grad=True)
        for k, shape in shapes.items()
    }
    fd_check(lambda: build(params), params)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_leaves_params_unchanged():
    p = {"w": Tensor(np.ones((3, 3)), requires_grad=True)}
    p["w"].grad = np.zeros((3, 3))
    before = p["w"].data.copy()
    adam_step(p, AdamState(lr=1e-4))
    assert np.max(np.abs(p["w"].data - before)) < 1e-12


def test_adam_first_step_magnitude():
    for g in (1.0, -2.5, 1e3):
        p = {"w": Tensor(np.full(4, 0.7), requires_grad=True)}
        p["w"].grad = np.full(4, g)
        state = AdamState(lr=1e-4)
        before = p["w"].data.copy()
        adam_step(p, state)
        delta = np.abs(p["w"].data - before)
        assert np.all(delta >= 0.999 * state.lr)
        assert np.all(delta <= state.lr)
        assert state.t == 1


def test_adam_nan_gradient_aborts_without_partial_update():
    p = {
        "a": Tensor(np.ones(3), requires_grad=True),
        "b": Tensor(np.ones(3), requires_grad=True),
    }
    p["a"].grad = np.ones(3)
    p["b"].grad = np.array([1.0, np.nan, 1.0])
    state = AdamState(lr=1e-2)
    before_a = p["a"].data.copy()
    with pytest.raises(NumericError):
        adam_step(p, state)
    assert np.array_equal(p["a"].data, before_a)
    assert state.t == 0


def test_adam_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(123)
        p = {"w": Tensor(rng.normal(size=(4, 4)), requires_grad=True)}
        state = AdamState(lr=3e-3)
        for _ in range(5):
            p["w"].grad = rng.normal(size=(4, 4))
            adam_step(p, state)
        return p["w"].data.copy()

    assert np.array_equal(run(), run())


def test_adam_grad_shape_mismatch():
    p = {"w": Tensor(np.ones((2, 2)), requires_grad=True)}
    p["w"].grad = np.ones(3)
    with pytest.raises(ContractViolation):
        adam_step(p, AdamState())


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_quadratic_is_clean():
    p = {"theta": Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}

    def loss_fn():
        return reduce_sum(mul(p["theta"], p["theta"]))

    report = grad_check(loss_fn, p, tol=1e-6)
    assert report.passed
    assert report.max_rel_err <= 1e-6


def test_grad_check_flags_corrupted_adjoint():
    from mmchain.tensor import _make

    def bad_square(t):
        # forward x^2 but adjoint claims d/dx = x (off by a factor of 2)
        def bwd(g):
            from mmchain.tensor import _accum

            _accum(t, g * t.data)

        return _make("bad_square", t.data * t.data, (t,), bwd)

    p = {"theta": Tensor(np.array([1.5, -0.5]), requires_grad=True)}

    def loss_fn():
        return reduce_sum(bad_square(p["theta"]))

    report = grad_check(loss_fn, p, tol=1e-4)
    assert not report.passed
    assert all(c.flagged for c in report.checks)


def test_grad_check_detects_nondeterministic_loss():
    state = {"calls": 0}
    p = {"theta": Tensor(np.array([1.0]), requires_grad=True)}

    def loss_fn():
        state["calls"] += 1
        return reduce_sum(mul(p["theta"], float(state["calls"])))

    with pytest.raises(ContractViolation):
        grad_check(loss_fn, p)
