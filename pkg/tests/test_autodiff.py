import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaca import autodiff as ad
from vaca.autodiff import Adam, NonFiniteError, Parameter, TapeError, Tensor


def numeric_grad(f, params, eps=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p.data[idx]
            p.data[idx] = old + eps
            up = f().item()
            p.data[idx] = old - eps
            down = f().item()
            p.data[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_match(f, params, rel=1e-3, floor=1e-6):
    for p in params:
        p.grad = None
    f().backward()
    for p, num in zip(params, numeric_grad(f, params)):
        err = np.abs(p.grad - num)
        assert np.all(err <= rel * np.maximum(np.abs(num), np.abs(p.grad)) + floor), (p.grad, num)


def test_forward_examples():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    m = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_square_gradient():
    w = Parameter(3.0)
    (w * w).backward()
    assert w.grad == 6.0


@pytest.mark.parametrize("x", [-1.0, 0.0])
def test_relu_gradient_at_and_below_kink_is_zero(x):
    w = Parameter(x)
    ad.relu(w).backward()
    assert w.grad == 0.0


def test_gradients_accumulate_until_cleared():
    w = Parameter(2.0)
    (w * 3.0).backward()
    (w * 3.0).backward()
    assert w.grad == 6.0
    w.zero_grad()
    assert w.grad is None


def test_backward_rejects_non_scalar_and_off_tape():
    w = Parameter(np.ones(3))
    with pytest.raises(TapeError):
        (w * 2.0).backward()
    with pytest.raises(TapeError):
        (Tensor(1.0) * 2.0).backward()


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(1000.0))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_random_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    ws = [Parameter(rng.normal(size=s)) for s in [(4, 6), (6, 5), (5, 1)]]
    bs = [Parameter(rng.normal(size=(1, s))) for s in (6, 5, 1)]
    x = Tensor(rng.normal(size=(7, 4)))

    def f():
        h = ad.relu(x @ ws[0] + bs[0])
        h = ad.tanh(h @ ws[1] + bs[1])
        return ad.mean(ad.sigmoid(h @ ws[2] + bs[2]))

    assert_grads_match(f, ws + bs)


def test_op_zoo_gradients():
    rng = np.random.default_rng(1)
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.uniform(0.5, 2.0, size=(1, 4)))
    c = Parameter(rng.normal(size=(2, 3, 4)))
    idx = np.array([2, 0, 2, 1])

    def f():
        t = ad.concat([a, b * 2.0], axis=0)  # (4, 4)
        t = ad.take(t, idx, axis=0) / b + ad.log(b) - b**1.5
        s = ad.segment_sum(t, [1, 0, 1, 1], 2)  # (2, 4)
        u = ad.broadcast_to(ad.reshape(s, (2, 1, 4)), (2, 3, 4)) * c
        v = ad.log_softmax(u, axis=-1) + ad.softplus(u) - ad.exp(u * 0.1)
        w = ad.logsumexp(ad.transpose(v, (2, 0, 1)), axis=0)
        return ad.tsum(w[:, 1:]) + ad.tsum(u[0, :, ::2])

    assert_grads_match(f, [a, b, c])


def test_batched_matmul_broadcast_gradients():
    rng = np.random.default_rng(2)
    x = Parameter(rng.normal(size=(5, 3, 4)))
    shared = Parameter(rng.normal(size=(1, 4, 2)))
    assert_grads_match(lambda: ad.tsum(ad.tanh(ad.matmul(x, shared))), [x, shared])


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = Parameter(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(4, 3)))

    def f():
        return ad.tsum(ad.tanh(x @ w))

    def g():
        return ad.tsum(ad.sigmoid(x @ w) ** 2)

    f().backward()
    gf = w.grad
    w.zero_grad()
    g().backward()
    gg = w.grad
    w.zero_grad()
    (f() * a + g() * b).backward()
    np.testing.assert_allclose(w.grad, a * gf + b * gg, rtol=1e-10, atol=1e-12)


def test_adam_first_step_moves_by_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 1e-3])
    Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-7)


@pytest.mark.parametrize("lr, grad", [(0.005, 0.0), (0.0, 1.0)])
def test_adam_no_move(lr, grad):
    p = Parameter(np.array([1.5]))
    p.grad = np.array([grad])
    Adam([p], lr=lr).step()
    assert p.data[0] == 1.5


def test_no_grad_builds_no_tape():
    w = Parameter(2.0)
    with ad.no_grad():
        y = w * 3.0
    assert not y.requires_grad


def test_glorot_bounds():
    w = ad.glorot(np.random.default_rng(0), (3, 10, 6))
    assert np.abs(w).max() <= np.sqrt(6 / 16)


class _Tiny(ad.Module):
    def __init__(self, rng):
        super().__init__()
        self.w = Parameter(rng.normal(size=(2, 3)))
        self.inner = _Leaf(rng)


class _Leaf(ad.Module):
    def __init__(self, rng):
        super().__init__()
        self.b = Parameter(rng.normal(size=(3,)))


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    m = _Tiny(np.random.default_rng(0))
    assert [n for n, _ in m.named_parameters()] == ["w", "inner.b"]
    ad.save_checkpoint(tmp_path / "ck.bin", m.state_dict(), {"k": 1})
    state, meta = ad.load_checkpoint(tmp_path / "ck.bin")
    assert meta == {"k": 1}
    for name, value in m.state_dict().items():
        assert state[name].tobytes() == value.tobytes()
    m2 = _Tiny(np.random.default_rng(9))
    m2.load_state_dict(state)
    assert m2.w.data.tobytes() == m.w.data.tobytes()


def test_load_state_rejects_mismatch():
    m = _Tiny(np.random.default_rng(0))
    with pytest.raises(KeyError):
        m.load_state_dict({"w": np.zeros((2, 3))})
    bad = m.state_dict()
    bad["w"] = np.zeros((3, 2))
    with pytest.raises(ValueError):
        m.load_state_dict(bad)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        ad.load_checkpoint(tmp_path / "x.bin")
