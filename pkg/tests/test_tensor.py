import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoidet import tensor as tz
from hoidet.errors import DegenerateInputError, EvaluationError, ShapeError


def test_matmul_identity():
    b = np.arange(9, dtype=float).reshape(3, 3)
    out = tz.matmul(np.eye(3), b)
    np.testing.assert_array_equal(out.array, b)


def test_matmul_zero():
    b = np.arange(6, dtype=float).reshape(2, 3)
    out = tz.matmul(np.zeros((2, 2)), b)
    np.testing.assert_array_equal(out.array, np.zeros((2, 3)))


def test_matmul_hand_expanded():
    # dot products expanded by hand: [[19,22],[43,50]]
    out = tz.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.array, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        tz.matmul(np.zeros((2, 3)), np.zeros((4, 5)))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_softmax_symmetry():
    out = tz.softmax(np.zeros(3)).array
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_softmax_dominance_no_overflow():
    out = tz.softmax(np.array([1000.0, 0.0, 0.0])).array
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-300)


def test_softmax_scalar_oracle():
    # independent scalar-exponentiation oracle
    x = [1.0, 2.0, 3.0]
    denom = sum(math.exp(v) for v in x)
    want = [math.exp(v) / denom for v in x]
    np.testing.assert_allclose(tz.softmax(np.array(x)).array, want, atol=1e-12)
    np.testing.assert_allclose(want, [0.09003057, 0.24472847, 0.66524096],
                               atol=1e-7)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.standard_normal((4, 7)) * rng.uniform(0.1, 50)
        s = tz.softmax(x).array
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(s >= 0.0) and np.all(s <= 1.0)


def test_cosine_identity_and_orthogonal():
    u = np.array([0.3, -1.2, 2.0])
    assert tz.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-12)
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.0, 1.0])
    assert tz.cosine_similarity(e1, e2).item() == 0.0
    assert tz.cosine_similarity(np.array([1.0, 1.0]),
                                np.array([1.0, 0.0])).item() == \
        pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_cosine_scale_invariance():
    rng = np.random.default_rng(7)
    for _ in range(100):
        u = rng.standard_normal(5)
        v = rng.standard_normal(5)
        a, b = rng.uniform(1e-3, 1e3, size=2)
        base = tz.cosine_similarity(u, v).item()
        scaled = tz.cosine_similarity(a * u, b * v).item()
        assert abs(base - scaled) < 1e-12


def test_cosine_zero_norm_raises():
    with pytest.raises(DegenerateInputError, match="row 0"):
        tz.cosine_similarity(np.zeros(3), np.ones(3))


def test_cosine_matrix_matches_vector_version():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((5, 6))
    m = tz.cosine_matrix(a, b).array
    for i in range(4):
        for j in range(5):
            assert m[i, j] == pytest.approx(
                tz.cosine_similarity(a[i], b[j]).item(), abs=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_layer_norm_normalizes(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 8)) * rng.uniform(0.5, 10)
    y = tz.layer_norm(x, np.ones(8), np.zeros(8)).array
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def _check(f, x, tol=1e-4, eps=1e-5):
    assert tz.gradient_check(f, x, eps) < tol


def test_gradient_check_quadratic_exact():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    assert tz.gradient_check(lambda t: tz.vsum(tz.mul(t, t)), x) < 1e-8


def test_gradient_check_softmax_cross_entropy():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 6))
    _check(lambda t: tz.vsum(tz.ce_rows(t, [1, 0, 5, 2])), x)


def _primitive_cases(rng):
    # constants are drawn once so the checked functions are deterministic
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))
    w = rng.standard_normal((3, 2))
    r3 = rng.standard_normal((2, 2, 3))
    c33 = tz.const(rng.standard_normal((3, 3)))
    c22 = tz.const(rng.standard_normal((2, 2)))
    c321 = tz.const(rng.standard_normal((3, 2, 1)))
    c126 = tz.const(rng.standard_normal((1, 2, 6)))
    c223 = tz.const(rng.standard_normal((2, 2, 3)))
    cb = tz.const(b)
    cr3 = tz.const(r3)
    labels = (b > 0).astype(float)
    return [
        (lambda t: tz.vsum(tz.matmul(t, tz.const(w))), a),
        (lambda t: tz.vsum(tz.matmul(cr3, t)), w),
        (lambda t: tz.vsum(tz.matmul(t, tz.transpose_last2(cr3))), r3),
        (lambda t: tz.vsum(tz.add(t, cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.add_row(t, tz.const(b[0])), cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.add_mat(t, tz.const(a)), c223)), r3),
        (lambda t: tz.vsum(tz.mul(tz.scale(t, -2.5), cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.add_const(t, 1.5), cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.relu(t), cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.sigmoid(t), cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.softmax(t), cb)), a),
        (lambda t: tz.vsum(tz.mul(
            tz.layer_norm(t, tz.const(np.abs(b[0]) + 0.5),
                          tz.const(b[1])), cb)), a),
        (lambda t: tz.vsum(tz.mul(tz.transpose_last2(t),
                                  tz.const(a.T.copy()))), a),
        (lambda t: tz.vsum(tz.mul(tz.reshape(t, (3, 2)), tz.const(w))), a),
        (lambda t: tz.vsum(tz.mul(tz.concat([t, cb], axis=1),
                                  tz.const(np.hstack([a, b])))), a),
        (lambda t: tz.vsum(tz.mul(tz.take_rows(t, [1, 1, 0]), c33)), a),
        (lambda t: tz.vsum(tz.mul(tz.index0(t, 1), c22)),
         rng.standard_normal((3, 2, 2))),
        (lambda t: tz.vsum(tz.mul(tz.col(t, 1), tz.const(b[:, 0].copy()))), a),
        (lambda t: tz.vsum(tz.mul(tz.split_heads(t, 3), c321)), a),
        (lambda t: tz.vsum(tz.mul(tz.merge_heads(t, 2), c126)),
         rng.standard_normal((2, 2, 3))),
        (lambda t: tz.vsum(tz.cosine_matrix(t, tz.const(w.T.copy() + 2.0))), a),
        (lambda t: tz.vsum(tz.ce_rows(t, [2, 0])), a),
        (lambda t: tz.bce_with_logits(t, labels), a),
        (lambda t: tz.l1_to_const(t, b + 0.1), a),
    ]


def test_gradients_all_primitives_100_seeds():
    # every forward primitive against central differences
    for seed in range(100):
        for i, (f, x) in enumerate(_primitive_cases(np.random.default_rng(seed))):
            err = tz.gradient_check(f, x)
            assert err < 1e-4, f"seed {seed} case {i}: {err}"


def test_diamond_graph_accumulates():
    # x feeds two branches; adjoints must sum
    x = np.array([1.0, -2.0, 3.0])
    tape = tz.GradientTape()
    leaf = tape.leaf(x)
    out = tz.add(tz.vsum(tz.mul(leaf, leaf)), tz.vsum(tz.scale(leaf, 3.0)))
    g = tape.gradients(out)[leaf]
    np.testing.assert_allclose(g, 2 * x + 3.0, atol=1e-12)


def test_replay_is_bitwise_identical():
    rng = np.random.default_rng(5)
    tape = tz.GradientTape()
    x = tape.leaf(rng.standard_normal((4, 4)))
    h = tz.softmax(tz.matmul(x, tz.const(rng.standard_normal((4, 4)))))
    tz.vsum(tz.layer_norm(h, tz.const(np.ones(4)), tz.const(np.zeros(4))))
    replayed = tape.replay_outputs()
    recorded = tape.recorded_outputs()
    assert len(replayed) == len(recorded) > 0
    for a, b in zip(replayed, recorded):
        assert a.tobytes() == b.tobytes()


def test_backward_visits_each_record_once():
    calls = []
    orig = tz.OPS["mul"].backward

    def counting(g, rec):
        calls.append(rec.op)
        return orig(g, rec)

    tz.OPS["mul"].backward = counting
    try:
        tape = tz.GradientTape()
        x = tape.leaf(np.ones(3))
        y = tz.mul(x, x)
        z = tz.mul(y, y)
        tape.gradients(tz.vsum(z))
    finally:
        tz.OPS["mul"].backward = orig
    assert len(calls) == 2


def test_rank_limit():
    with pytest.raises(ShapeError):
        tz.const(np.zeros((2, 2, 2, 2)))


def test_mixing_tapes_rejected():
    t1, t2 = tz.GradientTape(), tz.GradientTape()
    a = t1.leaf(np.ones(2))
    b = t2.leaf(np.ones(2))
    with pytest.raises(ValueError):
        tz.add(a, b)


def test_gradient_check_nonfinite_raises():
    def f(t):
        return tz.scale(tz.vsum(t), math.inf)

    with pytest.raises(EvaluationError):
        tz.gradient_check(f, np.ones(3))


def test_forward_outputs_finite_on_random_chains():
    rng = np.random.default_rng(9)
    for _ in range(25):
        x = rng.standard_normal((3, 4)) * rng.uniform(0.1, 100)
        y = tz.softmax(tz.layer_norm(tz.relu(tz.const(x)),
                                     tz.const(np.ones(4)),
                                     tz.const(np.zeros(4))))
        assert np.all(np.isfinite(y.array))


def test_tensor_flat_data_row_major():
    t = tz.const([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(t.flat_data, [1.0, 2.0, 3.0, 4.0])
    assert math.prod(t.shape) == t.flat_data.size
