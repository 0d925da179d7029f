import numpy as np

from rtr.optim import Adam
from rtr.tensor import Tensor


def _param(value, grad=None):
    p = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
    if grad is not None:
        p.grad = np.asarray(grad, dtype=np.float32)
    return p


def _adam_oracle(p, g, steps, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    p = np.asarray(p, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_single_step_matches_hand_formula():
    p = _param([1.0, -2.0], grad=[0.5, 0.25])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    expected = _adam_oracle([1.0, -2.0], np.array([0.5, 0.25]), 1)
    assert np.allclose(p.data, expected, atol=1e-6)


def test_three_steps_constant_grad():
    p = _param([1.0], grad=[0.5])
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(3):
        p.grad = np.asarray([0.5], dtype=np.float32)
        opt.step()
    expected = _adam_oracle([1.0], np.array([0.5]), 3)
    assert np.allclose(p.data, expected, atol=1e-6)


def test_zero_grad_from_fresh_state_is_noop():
    p = _param([3.0], grad=[0.0])
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(4):
        p.grad = np.zeros(1, dtype=np.float32)
        opt.step()
    assert np.array_equal(p.data, np.asarray([3.0], dtype=np.float32))


def test_missing_grad_treated_as_zeros():
    p = _param([3.0])
    q = _param([1.0], grad=[1.0])
    opt = Adam({"p": p, "q": q}, lr=0.1)
    opt.step()
    assert np.array_equal(p.data, np.asarray([3.0], dtype=np.float32))
    assert not np.array_equal(q.data, np.asarray([1.0], dtype=np.float32))


def test_zero_grad_clears_buffers():
    p = _param([1.0], grad=[1.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.zero_grad()
    assert p.grad is None


def test_state_roundtrip_continues_bit_exact():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3).astype(np.float32) for _ in range(6)]

    def run(n_first, n_total, carry_state):
        p = _param(np.ones(3))
        opt = Adam({"p": p}, lr=0.05)
        for g in grads[:n_first]:
            p.grad = g.copy()
            opt.step()
        if carry_state:
            state = {k: v.copy() for k, v in opt.state_arrays().items()}
            p2 = _param(p.data.copy())
            opt2 = Adam({"p": p2}, lr=0.05)
            opt2.load_state_arrays(state)
            p, opt = p2, opt2
        for g in grads[n_first:n_total]:
            p.grad = g.copy()
            opt.step()
        return p.data

    direct = run(6, 6, carry_state=False)
    resumed = run(3, 6, carry_state=True)
    assert np.array_equal(direct, resumed)


def test_state_arrays_include_step_count():
    p = _param([1.0], grad=[1.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    opt.step()
    state = opt.state_arrays()
    assert int(state["opt.steps"]) == 2
