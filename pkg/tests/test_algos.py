import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ringfed import nn
from ringfed.algos import (ClientUpdate, ExchangeConfig, Plain, Prox, Scaffold, ScaffoldState,
                           fedavg_aggregate, local_train, ring_exchange, scaffold_server_update)
from ringfed.data import ClientShard, epoch_key, sample_batch
from ringfed.errors import ConfigurationError, ProtocolError


def upd(cid, *values, n=1, control=None):
    return ClientUpdate(cid, np.array(values, dtype=float), n, control)


@pytest.fixture
def setup(toy2):
    model = nn.MLP(2, 4, 2)
    shard = ClientShard(3, np.arange(0, 40), seed=9)
    return model, toy2, shard, nn.init_params(model, 1)


# -- local_train ------------------------------------------------------------

def test_single_batch_single_epoch_is_one_sgd_step(setup):
    model, ds, shard, w0 = setup
    out = local_train(model, ds, w0, shard, 1, nn.OptimizerState(0.1), batch_size=len(shard))
    idx = next(sample_batch(shard, len(shard), epoch_key(0, shard.client_id, 0, 0, 0, 1)))
    expected = nn.sgd_step(w0, nn.backward(model, w0, ds.features[idx], ds.labels[idx]), nn.OptimizerState(0.1))
    assert out.params.tobytes() == expected.tobytes()
    assert out.num_examples == 40 and out.client_id == 3


def test_local_train_does_not_mutate_start(setup):
    model, ds, shard, w0 = setup
    before = w0.copy()
    local_train(model, ds, w0, shard, 2, nn.OptimizerState(0.1, momentum=0.9), batch_size=7)
    assert np.array_equal(w0, before)


def test_prox_zero_mu_equals_plain(setup):
    model, ds, shard, w0 = setup
    a = local_train(model, ds, w0, shard, 3, nn.OptimizerState(0.1, 0.9), 8, Plain(), seed=4)
    b = local_train(model, ds, w0, shard, 3, nn.OptimizerState(0.1, 0.9), 8, Prox(0.0), seed=4)
    assert a.params.tobytes() == b.params.tobytes()


def test_prox_pulls_toward_start(setup):
    model, ds, shard, w0 = setup
    plain = local_train(model, ds, w0, shard, 5, nn.OptimizerState(0.2), 8, Plain())
    prox = local_train(model, ds, w0, shard, 5, nn.OptimizerState(0.2), 8, Prox(5.0))
    assert np.linalg.norm(prox.params - w0) < np.linalg.norm(plain.params - w0)


def test_scaffold_zero_controls_equals_plain(setup):
    model, ds, shard, w0 = setup
    zeros = np.zeros_like(w0)
    a = local_train(model, ds, w0, shard, 1, nn.OptimizerState(0.1), len(shard), Plain())
    b = local_train(model, ds, w0, shard, 1, nn.OptimizerState(0.1), len(shard), Scaffold(zeros, zeros))
    assert a.params.tobytes() == b.params.tobytes()
    # one full-batch step: refreshed control is that step's gradient
    np.testing.assert_allclose(b.control, (w0 - b.params) / 0.1, rtol=1e-12)


def test_scaffold_correction_shifts_updates(setup):
    model, ds, shard, w0 = setup
    c = np.full_like(w0, 0.5)
    zeros = np.zeros_like(w0)
    a = local_train(model, ds, w0, shard, 1, nn.OptimizerState(0.1), len(shard), Scaffold(zeros, zeros))
    b = local_train(model, ds, w0, shard, 1, nn.OptimizerState(0.1), len(shard), Scaffold(c, zeros))
    np.testing.assert_allclose(a.params - b.params, 0.05, rtol=1e-9)


def test_local_train_rejects_zero_epochs(setup):
    model, ds, shard, w0 = setup
    with pytest.raises(ConfigurationError):
        local_train(model, ds, w0, shard, 0, nn.OptimizerState(0.1), 4)


def test_split_periods_match_one_long_call(setup):
    model, ds, shard, w0 = setup
    long = local_train(model, ds, w0, shard, 6, nn.OptimizerState(0.1, 0.9), 7, seed=2, round_index=1,
                       epochs_per_period=6)
    opt = nn.OptimizerState(0.1, 0.9)
    w = w0
    for p in range(3):
        w = local_train(model, ds, w, shard, 2, opt, 7, seed=2, round_index=1, period=p, epochs_per_period=2).params
    assert w.tobytes() == long.params.tobytes()


# -- fedavg_aggregate -----------------------------------------------------

def test_fedavg_examples():
    assert fedavg_aggregate([upd(0, 1.0), upd(1, 3.0)])[0] == 2.0
    assert fedavg_aggregate([upd(5, 7.0), upd(1, 2.0), upd(0, 0.0)])[0] == 3.0
    v = np.array([0.1, -2.5, 1e-3])
    assert np.array_equal(fedavg_aggregate([ClientUpdate(i, v.copy(), 1) for i in range(3)]), v)


def test_fedavg_weighted():
    out = fedavg_aggregate([upd(0, 1.0, n=1), upd(1, 4.0, n=3)], weighted=True)
    assert out[0] == pytest.approx(3.25)


def test_fedavg_errors():
    with pytest.raises(ProtocolError):
        fedavg_aggregate([])
    with pytest.raises(ProtocolError):
        fedavg_aggregate([upd(0, 1.0), upd(1, 1.0, 2.0)])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=st.floats(-1e6, 1e6)),
       st.randoms(use_true_random=False))
def test_fedavg_bounded_and_permutation_invariant(mat, rnd):
    updates = [ClientUpdate(i, row.copy(), 1) for i, row in enumerate(mat)]
    shuffled = updates[:]
    rnd.shuffle(shuffled)
    a, b = fedavg_aggregate(updates), fedavg_aggregate(shuffled)
    assert a.tobytes() == b.tobytes()
    tol = 1e-9 * (1 + np.abs(mat).max())
    assert np.all(a >= mat.min(axis=0) - tol) and np.all(a <= mat.max(axis=0) + tol)


# -- ring_exchange --------------------------------------------------------

def scalars(*v):
    return [np.array([x], dtype=float) for x in v]


def test_ring_exchange_hand_example():
    # new[1] = .5*0 + .5*2, new[2] = .5*2 + .5*4, new[0] = .5*4 + .5*0
    out = ring_exchange(scalars(0, 2, 4), 0.5)
    assert [o[0] for o in out] == [2.0, 1.0, 3.0]


def test_ring_exchange_gamma_extremes():
    vs = scalars(1.5, -2.0, 7.25, 0.0)
    assert [o[0] for o in ring_exchange(vs, 0.0)] == [1.5, -2.0, 7.25, 0.0]
    assert [o[0] for o in ring_exchange(vs, 1.0)] == [0.0, 1.5, -2.0, 7.25]


def test_ring_exchange_sequential_cascades():
    # in place: w1 = .5*0 + .5*2 = 1; w2 = .5*1 + .5*4 = 2.5; w0 = .5*2.5 + .5*0 = 1.25
    out = ring_exchange(scalars(0, 2, 4), 0.5, semantics="sequential")
    assert [o[0] for o in out] == [1.25, 1.0, 2.5]


def test_ring_exchange_degenerate_and_invalid(caplog):
    with caplog.at_level("INFO"):
        out = ring_exchange(scalars(3.0), 0.5)
    assert out[0][0] == 3.0 and "skipped" in caplog.text
    with pytest.raises(ConfigurationError):
        ring_exchange(scalars(1, 2), 1.5)


def test_ring_exchange_leaves_inputs_untouched():
    vs = scalars(1, 2, 3)
    ring_exchange(vs, 0.3)
    ring_exchange(vs, 0.3, semantics="sequential")
    assert [v[0] for v in vs] == [1, 2, 3]


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 7), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)),
       st.floats(0, 1))
def test_ring_exchange_conserves_mass(mat, gamma):
    out = np.array(ring_exchange(list(mat), gamma))
    scale = np.abs(mat).sum(axis=0) + 1e-300
    assert np.all(np.abs(out.sum(axis=0) - mat.sum(axis=0)) <= 1e-12 * scale)


def test_exchange_config_validation():
    assert ExchangeConfig(0.5, (3, 1, 2)).ring_order == (3, 1, 2)
    with pytest.raises(ConfigurationError):
        ExchangeConfig(-0.1, (0, 1))
    with pytest.raises(ConfigurationError):
        ExchangeConfig(0.5, (0, 0))


# -- SCAFFOLD server ------------------------------------------------------

def test_scaffold_server_zero_deltas():
    state = ScaffoldState(np.array([0.2]), {0: np.array([0.1])})
    x = np.array([1.0])
    new_x, new_state = scaffold_server_update(state, [upd(0, 1.0, control=np.array([0.1]))], x, 10)
    assert new_x[0] == 1.0 and new_state.server_control[0] == pytest.approx(0.2)


def test_scaffold_server_single_client_reduces_to_its_params():
    state = ScaffoldState.zeros(2)
    x = np.array([1.0, -1.0])
    new_x, _ = scaffold_server_update(state, [upd(4, 0.3, 0.7, control=np.zeros(2))], x, 1, lr_server=1.0)
    np.testing.assert_allclose(new_x, [0.3, 0.7], rtol=1e-15)


def test_scaffold_server_two_client_recursion():
    # x = 1, c = 0, N = 4 clients; clients 0, 1 return y = 0.4, 0.8 with controls 0.3, -0.1 (old: 0)
    # x' = 1 + ((0.4 - 1) + (0.8 - 1)) / 2 = 0.6;  c' = 0 + (2/4) * (0.3 - 0.1) / 2 = 0.05
    state = ScaffoldState.zeros(1)
    ups = [upd(0, 0.4, control=np.array([0.3])), upd(1, 0.8, control=np.array([-0.1]))]
    new_x, new_state = scaffold_server_update(state, ups, np.array([1.0]), 4)
    assert new_x[0] == pytest.approx(0.6, abs=1e-15)
    assert new_state.server_control[0] == pytest.approx(0.05, abs=1e-15)
    assert new_state.client_controls[0][0] == 0.3 and new_state.client_controls[1][0] == -0.1
    # second round: client 0 again with y = 0.6 and control 0.2
    # x'' = 0.6 + 1.0 * (0.6 - 0.6) = 0.6;  c'' = 0.05 + (1/4) * (0.2 - 0.3) = 0.025
    x2, s2 = scaffold_server_update(new_state, [upd(0, 0.6, control=np.array([0.2]))], new_x, 4)
    assert x2[0] == pytest.approx(0.6) and s2.server_control[0] == pytest.approx(0.025)


def test_scaffold_server_requires_controls():
    with pytest.raises(ProtocolError):
        scaffold_server_update(ScaffoldState.zeros(1), [upd(0, 1.0)], np.array([0.0]), 2)
    with pytest.raises(ProtocolError):
        scaffold_server_update(ScaffoldState.zeros(1), [], np.array([0.0]), 2)
