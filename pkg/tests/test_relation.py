import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import relation_oracle
from relcollab.relation import (
    batch_mean, compute_relation, flatten_channels, gram, load_relation, normalize_rows, save_relation,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_batch_mean_identity_for_single_sample():
    x = torch.randn(1, 3, 4, 4)
    assert torch.equal(batch_mean(x), x)


def test_batch_mean_symmetric_pair_cancels():
    x = torch.randn(1, 3, 4, 4)
    assert torch.count_nonzero(batch_mean(torch.cat([x, -x]))) == 0


def test_batch_mean_of_two():
    x, y = torch.randn(2, 1, 3, 5, 5, dtype=torch.float64)
    out = batch_mean(torch.cat([x, y]))
    assert torch.allclose(out, (x + y) / 2, atol=1e-7)


def test_flatten_layout():
    a = flatten_channels(t([[[[1, 2], [3, 4]]]]))
    assert a.tolist() == [[1, 2, 3, 4]]


def test_flatten_round_trip_and_multisets():
    x = torch.randn(1, 3, 2, 2, 2)
    a = flatten_channels(x)
    assert torch.equal(a.reshape(x.shape), x)
    for c in range(3):
        assert sorted(a[c].tolist()) == sorted(x[0, c].flatten().tolist())


def test_flatten_requires_single_map():
    with pytest.raises(ValueError):
        flatten_channels(torch.zeros(2, 1, 2, 2))


def test_gram_examples():
    assert torch.equal(gram(torch.eye(2)), torch.eye(2))
    assert gram(t([[1, 1], [1, 0]])).tolist() == [[2, 1], [1, 1]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_gram_symmetric_psd(c, n, seed):
    a = torch.from_numpy(np.random.default_rng(seed).normal(size=(c, n)))
    g = gram(a)
    assert (g - g.T).abs().max() < 1e-6
    assert torch.linalg.eigvalsh(g).min() > -1e-6


def test_gram_scale_covariance():
    a = torch.randn(4, 9, dtype=torch.float64)
    assert torch.allclose(gram(3.0 * a), 9.0 * gram(a))


def test_normalize_rows_examples():
    assert torch.equal(normalize_rows(torch.eye(3)), torch.eye(3))
    r = normalize_rows(t([[2, 1], [1, 1]]))
    expected = t([[2 / np.sqrt(5), 1 / np.sqrt(5)], [1 / np.sqrt(2), 1 / np.sqrt(2)]])
    assert torch.allclose(r, expected, atol=1e-12)


def test_zero_row_policy_and_gradient():
    g = t([[0, 0, 0], [0, 2, 1], [0, 1, 3]]).requires_grad_()
    r = normalize_rows(g)
    assert r[0].abs().sum() == 0
    assert torch.allclose(r[1:].norm(dim=1), torch.ones(2, dtype=torch.float64))
    r.sum().backward()
    assert torch.isfinite(g.grad).all()
    assert g.grad[0].abs().sum() == 0


def test_relation_orthogonal_channels_is_identity():
    f = torch.zeros(1, 3, 3, 3, dtype=torch.float64)
    f[0, 0, 0, 0], f[0, 1, 1, 1], f[0, 2, 2, 2] = 1.0, 2.0, 5.0
    assert torch.allclose(compute_relation(f), torch.eye(3, dtype=torch.float64))


def test_relation_duplicate_channels_give_equal_rows():
    f = torch.randn(2, 3, 4, 4)
    f[:, 1] = f[:, 0]
    r = compute_relation(f)
    assert torch.equal(r[0], r[1])


def test_relation_matches_oracle():
    f = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert np.abs(compute_relation(f).numpy() - relation_oracle(f.numpy())).max() < 1e-6


def test_relation_rows_unit_norm():
    r = compute_relation(torch.randn(2, 5, 6, 6, dtype=torch.float64))
    assert (r.norm(dim=1) - 1).abs().max() < 1e-6


def test_per_sample_variant_differs_but_is_average():
    f = torch.randn(3, 4, 5, 5, dtype=torch.float64)
    per = compute_relation(f, per_sample=True)
    manual = sum(compute_relation(f[i:i + 1]) for i in range(3)) / 3
    assert torch.allclose(per, manual)


def test_relation_gradcheck():
    f = torch.randn(2, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 3, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: (compute_relation(x) * w).sum(), (f,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_save_load_relation(tmp_path):
    r = compute_relation(torch.randn(2, 4, 3, 3))
    save_relation(tmp_path / "rg_aux", r, stage="bottleneck", step=7)
    arr, side = load_relation(tmp_path / "rg_aux")
    assert side == {"C": 4, "stage": "bottleneck", "step": 7}
    assert np.allclose(arr, r.numpy())
