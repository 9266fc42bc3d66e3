import math

import numpy as np
import pytest

import seqdn.diffcompute as dc
from seqdn.diffcompute import Tensor
from seqdn.encoder import GRU, GRUEncoder, embed_sequence, gru_forward, left_pad, score_items


def small(n_items=12, seed=0):
    return GRUEncoder(n_items, d_emb=6, d_hidden=5, n_layers=2, rng=np.random.default_rng(seed))


def run(enc, seqs, keep=None):
    idx = left_pad(seqs)
    T, B = idx.shape
    x = embed_sequence(idx.reshape(-1), enc.item_emb)
    mask = (idx != 0).astype(float) if keep is None else keep
    if keep is not None:
        x = dc.mul_rows(x, Tensor(keep.reshape(-1)))
    return enc.encode(x, B, mask)


def test_left_pad():
    out = left_pad([[1, 2, 3], [4]], length=4)
    assert out.tolist() == [[0, 0], [1, 0], [2, 0], [3, 4]]
    assert left_pad([[1, 2, 3, 4, 5]], length=2).tolist() == [[4], [5]]


def test_padding_row_is_zero_and_out_of_range_rejected():
    enc = small()
    assert np.all(enc.item_emb.data[0] == 0)
    with pytest.raises(IndexError):
        embed_sequence([13], enc.item_emb)


def test_repeated_gather_grad_counts():
    table = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    dc.backward(dc.sum_(embed_sequence([2, 2], table)))
    assert np.array_equal(table.grad[2], 2 * np.ones(3))
    assert np.all(table.grad[[0, 1, 3]] == 0)


def test_zero_input_zero_state_fixed_point():
    gru = GRU(3, 4, 2, np.random.default_rng(1))
    out = gru_forward(Tensor(np.zeros((5, 3))), gru, batch=1)
    # zero biases: z = r = 0.5, candidate = tanh(0) = 0, so h stays 0
    for h in out.h:
        assert np.all(h.data == 0)


def test_masked_step_holds_state():
    enc = small()
    keep = np.array([[1.0], [0.0], [1.0]])
    out = run(enc, [[3, 7, 5]], keep)
    assert np.array_equal(out.h[1].data, out.h[0].data)
    ref = run(enc, [[3, 5]])
    assert np.allclose(out.e2.data, ref.e2.data, atol=1e-12)


def test_padding_is_neutral():
    enc = small()
    a = run(enc, [[4, 2, 9]])
    b = run(enc, [[4, 2, 9], [1, 1, 1, 1, 1, 1]])
    assert np.allclose(a.e2.data[0], b.e2.data[0], atol=1e-12)


def test_prefix_states_consistent():
    enc = small()
    full = run(enc, [[1, 2, 3, 4]])
    pre = run(enc, [[1, 2]])
    assert np.allclose(full.h[1].data, pre.e2.data, atol=1e-12)


def test_every_parameter_receives_gradient():
    enc = small()
    out = run(enc, [[1, 2, 3], [4, 5, 6]])
    loss = dc.softmax_cross_entropy(enc.logits(out.e2), np.array([0, 1]))
    dc.backward(loss)
    for name, p in enc.named_parameters().items():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_zero_state_gives_uniform_cross_entropy():
    enc = small(n_items=9)
    enc.head_b.data[:] = 0.0
    logits = enc.logits(Tensor(np.zeros((1, 5))))
    assert logits.shape == (1, 9)
    loss = dc.softmax_cross_entropy(logits, np.array([4]))
    assert abs(loss.item() - math.log(9)) < 1e-9


def test_score_columns_follow_item_index():
    table = Tensor(np.vstack([np.zeros(3), np.eye(3)]))
    W = Tensor(np.eye(3))
    b = Tensor(np.zeros(3))
    s = score_items(Tensor(np.array([0.0, 0.0, 5.0])), table, W, b)
    assert int(np.argmax(s.data)) + 1 == 3


def test_padding_row_unchanged_by_training():
    enc = small()
    params = list(enc.named_parameters().values())
    state = dc.AdamState(lr=0.1)
    for _ in range(3):
        out = run(enc, [[1, 2], [3, 4, 5]])
        dc.backward(dc.softmax_cross_entropy(enc.logits(out.e2), np.array([2, 5])))
        enc.freeze_padding_grad()
        dc.adam_step(params, state)
    assert np.all(enc.item_emb.data[0] == 0)


def test_gru_gradcheck_small():
    from gradcheck import check

    gru = GRU(2, 3, 1, np.random.default_rng(2))
    names = list(gru.named_parameters())
    arrays = [gru.named_parameters()[n].data.copy() for n in names]
    x = np.random.default_rng(3).normal(size=(6, 2))
    mask = np.array([[1, 1], [0, 1], [1, 1]], dtype=float)

    def build(*ps):
        for n, p in zip(names, ps):
            layer, key = n.split(".")[1:]
            gru.layers[int(layer[1:]) - 1][key] = p
        out = gru_forward(Tensor(x), gru, mask=mask, batch=2)
        return dc.sum_(dc.mul(out.stacked(), Tensor(np.linspace(-1, 1, 18).reshape(6, 3))))

    assert check(build, arrays) < 1e-4
