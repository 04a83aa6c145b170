import numpy as np
import pytest

from voxelkp import autograd as ag
from voxelkp.sparse import SparseTensor, canonical_sort
from voxelkp.ssk import SSK, SSKBlock, SskConfig, sparse_gap

from conftest import grad_check, leaf, random_sparse, rel_err
from oracles import ssk_oracle


def test_gap_examples():
    f = np.array([[1.5, -2.0, 3.0]])
    t = SparseTensor(f, np.array([[0, 1, 1, 1]]), (3, 3, 3), 1)
    np.testing.assert_array_equal(sparse_gap(t).value, f)
    t = SparseTensor(np.vstack([f, -f]), np.array([[0, 1, 1, 1], [0, 2, 1, 1]]), (3, 3, 3), 1)
    np.testing.assert_array_equal(sparse_gap(t).value, np.zeros((1, 3)))


def test_gap_grouped_mean_oracle():
    rng = np.random.default_rng(0)
    t = random_sparse(rng, (6, 6, 6), 0.1, 4, batch=3)
    # uneven counts per sample
    keep = np.concatenate([np.flatnonzero(t.indices[:, 0] == b)[: 5 + 7 * b] for b in range(3)])
    keep.sort()
    t = SparseTensor(t.values[keep], t.indices[keep], t.spatial_shape, 3)
    got = sparse_gap(t).value
    for b in range(3):
        rows = t.values[t.indices[:, 0] == b]
        assert np.array_equal(got[b], rows.mean(axis=0))


def test_gap_empty_sample():
    t = SparseTensor(np.ones((1, 2)), np.array([[0, 0, 0, 0]]), (2, 2, 2), 2)
    with pytest.raises(ValueError, match="no active voxels"):
        sparse_gap(t)


def test_gap_sort_invariant():
    rng = np.random.default_rng(1)
    t = random_sparse(rng, (5, 5, 5), 0.3, 3, batch=2)
    perm = rng.permutation(t.num_active)
    shuffled = SparseTensor(t.values[perm], t.indices[perm], t.spatial_shape, 2)
    np.testing.assert_allclose(sparse_gap(shuffled).value, sparse_gap(canonical_sort(shuffled)).value,
                               rtol=1e-12)


def _model(channels=4, seed=0):
    return SSK(SskConfig(channels), np.random.default_rng(seed), dtype=np.float64)


def test_squeeze_dim():
    assert SskConfig(64).squeeze_dim == 16
    assert SskConfig(2).squeeze_dim == 1
    with pytest.raises(ValueError):
        SskConfig(8, [3])


def test_saturated_selection():
    rng = np.random.default_rng(2)
    m = _model()
    m.expand[0].weight.value[:] = 0
    m.expand[0].bias.value[:] = 50.0
    m.expand[1].weight.value[:] = 0
    m.expand[1].bias.value[:] = -50.0
    t = random_sparse(rng, (5, 5, 5), 0.2, 4)
    out = m(t)
    branch0 = m.branches[0](t).values
    np.testing.assert_allclose(out.values, branch0 / 2, rtol=1e-12, atol=1e-14)


def test_identical_branches():
    rng = np.random.default_rng(3)
    m = SSK(SskConfig(4, [3, 3]), rng, dtype=np.float64)
    m.branches[1].weight.value[:] = m.branches[0].weight.value
    m.branches[1].bias.value[:] = m.branches[0].bias.value
    t = random_sparse(rng, (5, 5, 5), 0.3, 4)
    out = m(t)
    np.testing.assert_allclose(out.values, m.branches[0](t).values / 2, rtol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_straight_line_oracle(training):
    rng = np.random.default_rng(4)
    m = _model(seed=5)
    m.train(training)
    m.squeeze_bn.running_mean[:] = rng.standard_normal(1)
    m.squeeze_bn.running_var[:] = 0.5
    idx = np.array([[0, 1, 1, 1], [0, 2, 1, 1], [0, 1, 3, 2], [1, 2, 2, 2], [1, 0, 0, 0]])
    t = canonical_sort(SparseTensor(rng.standard_normal((5, 4)), idx, (4, 4, 4), 2))
    ref, w_ref = ssk_oracle(m, t.indices, t.values, t.spatial_shape, t.batch_size, training)
    _, w = m.selection_weights(t)
    out = m(t)
    np.testing.assert_array_equal(out.indices, t.indices)
    assert rel_err(out.values, ref) <= 1e-6
    assert rel_err(w.value, w_ref) <= 1e-6


def test_selection_weights_simplex():
    rng = np.random.default_rng(6)
    m = _model(8, seed=7)
    t = random_sparse(rng, (6, 6, 6), 0.2, 8, batch=3)
    _, w = m.selection_weights(t)
    w = w.value
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all((w > 0) & (w < 1))


def test_ssk_gradcheck():
    rng = np.random.default_rng(8)
    m = _model(3, seed=9)
    t = random_sparse(rng, (4, 4, 4), 0.25, 3, batch=2)
    x = leaf(t.values)
    proj = rng.standard_normal(t.values.shape)
    err = grad_check(lambda: ag.total_sum(ag.mul(m(t.replace_features(x)).features, proj)),
                     [x, *m.parameters()])
    assert err <= 1e-3


def test_block_preserves_active_set():
    rng = np.random.default_rng(10)
    blk = SSKBlock(SskConfig(4), rng, dtype=np.float64)
    t = random_sparse(rng, (6, 6, 6), 0.2, 4)
    out = blk(t)
    np.testing.assert_array_equal(out.indices, t.indices)
    assert np.all(out.values >= 0)
    with pytest.raises(ValueError):
        blk(random_sparse(rng, (6, 6, 6), 0.2, 3))
