import numpy as np
import pytest

from glyrag import autodiff as ad
from glyrag import nn
from glyrag.autodiff import Tensor


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def scalar_attention(x, wq, wk, wv, wo):
    """Loop-level multi-head self-attention over one sequence (oracle)."""
    T = x.shape[0]
    heads = []
    for q_w, k_w, v_w in zip(wq, wk, wv):
        dh = q_w.shape[1]
        q = [[sum(x[t, i] * q_w[i, j] for i in range(x.shape[1])) for j in range(dh)] for t in range(T)]
        k = [[sum(x[t, i] * k_w[i, j] for i in range(x.shape[1])) for j in range(dh)] for t in range(T)]
        v = [[sum(x[t, i] * v_w[i, j] for i in range(x.shape[1])) for j in range(dh)] for t in range(T)]
        out = []
        for t in range(T):
            scores = np.array([sum(q[t][j] * k[s][j] for j in range(dh)) / np.sqrt(dh) for s in range(T)])
            w = _softmax(scores)
            out.append([sum(w[s] * v[s][j] for s in range(T)) for j in range(dh)])
        heads.append(np.array(out))
    cat = np.concatenate(heads, axis=1)
    return cat @ wo


def test_mha_single_token_is_value_output_projection():
    rng = np.random.default_rng(0)
    mha = nn.MultiHeadAttention(8, 2, rng)
    x = rng.normal(size=(1, 1, 8))
    out = mha(Tensor(x)).data[0, 0]
    cat = np.concatenate([x[0, 0] @ w.data for w in mha.w_v])
    assert np.allclose(out, cat @ mha.w_o.data, atol=1e-12)


def test_mha_identical_keys_return_shared_value():
    rng = np.random.default_rng(1)
    mha = nn.MultiHeadAttention(4, 1, rng)
    kv = np.tile(rng.normal(size=4), (1, 3, 1))
    q = rng.normal(size=(1, 2, 4))
    out = mha(Tensor(q), Tensor(kv)).data
    expected = kv[0, 0] @ mha.w_v[0].data @ mha.w_o.data
    assert np.allclose(out[0, 0], expected) and np.allclose(out[0, 1], expected)


def test_mha_two_token_two_head_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    mha = nn.MultiHeadAttention(4, 2, rng)
    x = rng.normal(size=(2, 4))
    ref = scalar_attention(x, [w.data for w in mha.w_q], [w.data for w in mha.w_k],
                           [w.data for w in mha.w_v], mha.w_o.data)
    assert np.allclose(mha(Tensor(x[None])).data[0], ref, atol=1e-12)


def test_mha_indivisible_width():
    with pytest.raises(ValueError):
        nn.MultiHeadAttention(10, 4, np.random.default_rng(0))


def test_mha_gradient():
    rng = np.random.default_rng(3)
    mha = nn.MultiHeadAttention(6, 2, rng)
    x = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 3, 6)))
    assert ad.grad_check(lambda: ad.sum(ad.mul(mha(x), w)), [x] + mha.parameters()) < 1e-5


def test_lstm_zero_weights_keep_zero_state():
    rng = np.random.default_rng(0)
    lstm = nn.LSTM(3, 4, 2, rng)
    for p in lstm.parameters():
        p.data[...] = 0.0
    out, finals = lstm(Tensor(rng.normal(size=(2, 5, 3))))
    assert np.all(out.data == 0) and all(np.all(h.data == 0) for h, _ in finals)


def test_lstm_single_step_equals_cell():
    rng = np.random.default_rng(1)
    lstm = nn.LSTM(3, 2, 1, rng)
    x = rng.normal(size=(1, 1, 3))
    out, _ = lstm(Tensor(x))
    w_ih, w_hh, b = (t.data for t in lstm.cells[0])
    gates = x[0, 0] @ w_ih + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, _, g, o = sig(gates[0:2]), sig(gates[2:4]), np.tanh(gates[4:6]), sig(gates[6:8])
    h = o * np.tanh(i * g)
    assert np.allclose(out.data[0, 0], h, atol=1e-14)


def test_lstm_forget_bias_is_one():
    lstm = nn.LSTM(3, 4, 2, np.random.default_rng(0))
    for _, _, b in lstm.cells:
        assert np.all(b.data[4:8] == 1.0)


def test_lstm_gradient():
    rng = np.random.default_rng(4)
    lstm = nn.LSTM(2, 2, 2, rng)
    x = Tensor(rng.normal(size=(1, 3, 2)), requires_grad=True)

    def f():
        out, _ = lstm(x)
        return ad.sum(ad.square(out))

    assert ad.grad_check(f, [x] + lstm.parameters()) < 1e-4


def test_mlp_and_linear_gradient():
    rng = np.random.default_rng(5)
    mlp = nn.MLP([4, 6, 3], rng)
    x = Tensor(rng.normal(size=(5, 4)))
    assert ad.grad_check(lambda: ad.mean(ad.square(mlp(x))), mlp.parameters()) < 1e-5


def test_linear_against_loop():
    rng = np.random.default_rng(6)
    lin = nn.Linear(3, 2, rng)
    x = rng.normal(size=3)
    expected = [sum(x[i] * lin.weight.data[i, j] for i in range(3)) + lin.bias.data[j] for j in range(2)]
    assert np.allclose(lin(Tensor(x[None])).data[0], expected)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = nn.AdamState()
    nn.adam_step([p], [np.zeros(2)], state, lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    nn.adam_step([p], [np.array([3.0, -0.01])], nn.AdamState(), lr=0.1)
    assert np.allclose(p.data, [0.9, 1.1], atol=1e-6)


def test_adam_converges_on_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.Adam([x], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        ad.square(ad.sub(x, 5.0)).backward()
        opt.step()
    assert abs(x.data[0] - 5.0) < 0.1


def test_module_state_roundtrip_and_checksum():
    rng = np.random.default_rng(7)
    a, b = nn.MLP([3, 4, 2], rng), nn.MLP([3, 4, 2], rng)
    assert a.checksum() != b.checksum()
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()
