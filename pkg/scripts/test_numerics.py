"""
Test script for the gradient tape and its primitives
"""
import sys
import os

import numpy as np
import pytest

# Add repository root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import numerics as nx
from core.error_handler import NonFiniteError, NumericsError
from core.numerics import Adam, Tape, Tensor


def _scalar(fn, arrays, weights):
    with nx.float64_shadow():
        tensors = [Tensor(a) for a in arrays]
        out = fn(*tensors)
        return float((out.data.astype(np.float64) * weights).sum())


def _analytic(fn, arrays, weights):
    with nx.float64_shadow():
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*leaves)
            loss = nx.sum_all(nx.mul(out, Tensor(weights)))
        return tape.backward(loss, leaves)


def _numeric(fn, arrays, weights, eps=1e-6):
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            g[idx] = (_scalar(fn, plus, weights) - _scalar(fn, minus, weights)) / (2 * eps)
        grads.append(g)
    return grads


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _check(fn, shapes, cases=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        arrays = [rng.normal(size=s) for s in shapes]
        with nx.float64_shadow():
            out_shape = fn(*[Tensor(a) for a in arrays]).shape
        weights = rng.normal(size=out_shape)
        for a, n in zip(_analytic(fn, arrays, weights), _numeric(fn, arrays, weights)):
            worst = max(worst, _relative_error(a, n))
    assert worst < 1e-4, f"worst relative error {worst}"


# ===========================
# FINITE-DIFFERENCE CHECKS
# ===========================

def test_add_sub_mul_gradients():
    _check(nx.add, [(2, 3), (2, 3)])
    _check(nx.add, [(2, 3), (3,)])
    _check(nx.sub, [(2, 3), (3,)])
    _check(nx.mul, [(2, 3), (2, 3)])
    _check(nx.mul, [(4, 3), (3,)])


def test_matmul_gradients():
    _check(nx.matmul, [(2, 3), (3, 4)])
    _check(nx.matmul, [(2, 2, 3), (3, 2)])
    _check(nx.matmul, [(2, 2, 3), (2, 3, 2)])


def test_nonlinearity_gradients():
    _check(nx.gelu, [(3, 4)])
    _check(nx.tanh, [(3, 4)])
    _check(lambda x: nx.softmax(x, axis=-1), [(2, 5)])
    _check(lambda x: nx.layer_norm(x, 1e-5), [(3, 6)])


def test_loss_and_shape_gradients():
    _check(nx.mse_loss, [(3, 2), (3, 2)])
    _check(lambda x: nx.scale(x, -2.5), [(2, 3)])
    _check(lambda x: nx.reshape(x, (3, 2)), [(2, 3)])
    _check(lambda x: nx.transpose(x, (0, 2, 1)), [(2, 3, 4)])
    _check(lambda x: nx.narrow(x, 1, 1, 2), [(3, 4)])
    _check(lambda x: nx.mean(x, 1), [(2, 3, 4)])
    _check(nx.sum_all, [(2, 3)])


# ===========================
# TAPE SEMANTICS
# ===========================

def test_reused_tensor_accumulates():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = nx.add(x, x)
        loss = nx.sum_all(y)
    (g,) = tape.backward(loss, [x])
    assert np.allclose(g, [2.0, 2.0])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = nx.sum_all(x)
    gx, gu = tape.backward(loss, [x, unused])
    assert np.allclose(gx, 1.0)
    assert gu.shape == (2, 2) and not gu.any()


def test_backward_on_empty_tape_is_an_error():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        pass
    with pytest.raises(NumericsError):
        tape.backward(x, [x])


def test_non_scalar_loss_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = nx.scale(x, 2.0)
    with pytest.raises(NumericsError):
        tape.backward(y, [x])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with nx.no_grad():
            y = nx.scale(x, 3.0)
    assert len(tape) == 0
    assert not y.requires_grad


def test_non_finite_output_raises():
    x = Tensor(np.array([1.0, 2.0]))
    with pytest.raises(NonFiniteError):
        nx.scale(x, np.inf)


def test_shape_mismatch_raises():
    with pytest.raises(NumericsError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(NumericsError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
    with pytest.raises(NumericsError):
        nx.layer_norm(Tensor(np.ones((2, 3))), eps=0.0)


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_float64_shadow_switches_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with nx.float64_shadow():
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# ===========================
# OPTIMIZER
# ===========================

def test_adam_first_step_matches_closed_form():
    p = {'w': np.array([1.0, -2.0], dtype=np.float32)}
    g = {'w': np.array([0.5, -0.25], dtype=np.float32)}
    opt = Adam(lr=0.1)
    out = opt.step(p, g)
    # first bias-corrected step moves each weight by lr * sign(g)
    assert np.allclose(out['w'], [0.9, -1.9], atol=1e-6)
    assert opt.t == 1
    assert opt.m['w'].dtype == np.float32


def test_adam_state_roundtrip():
    p = {'w': np.ones(3, dtype=np.float32)}
    opt = Adam(lr=0.01)
    for _ in range(3):
        p = opt.step(p, {'w': np.arange(3, dtype=np.float32)})
    twin = Adam()
    twin.load_state_dict(opt.state_dict(), opt.m, opt.v)
    a = opt.step(p, {'w': np.ones(3, dtype=np.float32)})
    b = twin.step(p, {'w': np.ones(3, dtype=np.float32)})
    assert np.array_equal(a['w'], b['w'])


def test_adam_rejects_bad_inputs():
    with pytest.raises(NumericsError):
        Adam(lr=0.0)
    with pytest.raises(NumericsError):
        nx.sgd_adam_step(np.ones(2), np.ones(3), np.zeros(2), np.zeros(2), 1, 0.1)


def main():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
    print(f"\n📊 Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
