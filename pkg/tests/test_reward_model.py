import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acrl import nn
from acrl import reward_model as rm
from acrl.core import DomainError
from acrl.envs import ProfileEnv


def const_net(value, n_in=2):
    return nn.Network((n_in, 1), (np.zeros((n_in, 1)), np.array([float(value)])))


def toy_dataset(n=60, seed=0):
    rng = np.random.default_rng(seed)
    ds = rm.LabeledDataset(2)
    for i in range(n):
        x = rng.uniform(-1, 1, 2)
        ds.add(x, x[0] ** 2 - x[1], key=("toy", i))
    return ds


FAST = rm.ModelHyper(hidden=(8,), epochs=20, batch_size=16, lr=1e-2)


def test_predict_mean_and_std_examples():
    c = rm.from_networks([const_net(1), const_net(2), const_net(3)])
    x = np.array([0.3, -0.2])
    assert rm.predict_mean(c, x) == 2.0
    assert rm.predict_std(c, x) == pytest.approx(np.sqrt(2 / 3), abs=1e-12)
    same = rm.from_networks([const_net(1.5)] * 3)
    assert rm.predict_std(same, x) == 0.0 and rm.predict_mean(same, x) == 1.5
    shifted = rm.from_networks([const_net(1 + 7), const_net(2 + 7), const_net(3 + 7)])
    assert rm.predict_std(shifted, x) == pytest.approx(rm.predict_std(c, x), abs=1e-12)


def test_committee_order_invariant_bitwise():
    nets = [nn.init_network([3, 5, 1], s) for s in range(3)]
    x = np.random.default_rng(0).normal(size=(10, 3))
    a = rm.from_networks(nets)
    b = rm.from_networks(nets[::-1])
    assert np.array_equal(rm.predict_mean(a, x), rm.predict_mean(b, x))
    assert np.array_equal(rm.predict_std(a, x), rm.predict_std(b, x))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6))
def test_std_nonnegative_and_zero_iff_equal(values):
    c = rm.from_networks([const_net(v) for v in values])
    s = rm.predict_std(c, np.zeros(2))
    assert s >= 0
    if len(set(values)) == 1:
        assert s == 0
    else:
        assert s > 0


def test_std_survives_underflowing_deviations():
    for values in ([0.0, 9.141485729831697e-250], [0.0, 5e-324], [1e-200, -1e-200, 1e-200]):
        c = rm.from_networks([const_net(v) for v in values])
        assert rm.predict_std(c, np.zeros(2)) > 0


def test_single_member_equals_forward():
    net = nn.init_network([2, 4, 1], 9)
    c = rm.from_networks([net])
    x = np.random.default_rng(1).normal(size=(5, 2))
    assert np.array_equal(rm.predict_mean(c, x), nn.forward(net, x)[:, 0])


def test_build_committee_members_differ_and_deterministic():
    ds = toy_dataset()
    a = rm.build_committee(ds, k=3, hyper=FAST, seed=4)
    b = rm.build_committee(ds, k=3, hyper=FAST, seed=4)
    assert a.k == 3
    assert all(m.equals(n) for m, n in zip(a.members, b.members))
    for i in range(3):
        for j in range(i + 1, 3):
            assert not a.members[i].equals(a.members[j])


def test_degenerate_committee_is_single_trained_net():
    ds = toy_dataset()
    c = rm.build_committee(ds, k=1, split_fraction=1.0, hyper=FAST, seed=2)
    x, y = ds.arrays()
    shift, scale = y.mean(axis=0), y.std(axis=0)
    net = nn.init_network((2, 8, 1), ((2, 0), 1))
    net, _ = nn.train(net, x, (y - shift) / scale, FAST.epochs, FAST.batch_size, FAST.lr, ((2, 0), 2))
    expected = nn.forward(net, x)[:, 0] * scale[0] + shift[0]
    assert np.allclose(rm.predict_mean(c, x), expected, atol=1e-12)


def test_retrain_without_new_rows_matches_fresh_build():
    ds = toy_dataset()
    c = rm.build_committee(ds, k=3, hyper=FAST, seed=6)
    again = rm.retrain(c, rm.member_datasets(ds, 3), FAST, 6)
    assert all(m.equals(n) for m, n in zip(c.members, again.members))


def test_splits_partition_initial_rows():
    tr = rm.train_indices(120, 100, 0.8, 3)
    va = rm.validation_indices(100, 0.8, 3)
    assert len(va) == 20 and set(tr[:80]).isdisjoint(va)
    assert set(tr[:80]) | set(va) == set(range(100))
    assert list(tr[80:]) == list(range(100, 120))


def test_append_acquired_isolation():
    base = rm.member_datasets(toy_dataset(10), 3)
    same = rm.append_acquired(base, [[], [], []])
    assert [len(d) for d in same] == [10, 10, 10]
    rows = [(("new", i), np.ones(2) * i, float(i)) for i in range(4)]
    grown = rm.append_acquired(base, [[], rows, []])
    assert [len(d) for d in grown] == [10, 14, 10]
    assert grown[1].count(rm.ACQUIRED) == 4 and len(base[1]) == 10
    many = [[(("m", j, i), np.zeros(2), 0.0) for i in range(400)] for j in range(3)]
    assert [len(d) for d in rm.append_acquired(base, many)] == [410] * 3
    with pytest.raises(DomainError):
        rm.append_acquired(base, [[]])


def test_dataset_dedup_and_csv_round_trip(tmp_path):
    ds = rm.LabeledDataset(2, 2)
    assert ds.add([1, 2], [0.1, 0.2], key="a")
    assert not ds.add([1, 2], [0.1, 0.2], key="a")
    ds.add([3, 4], [1 / 3, 2 / 3], rm.ACQUIRED, key="b")
    path = tmp_path / "d.csv"
    ds.write_csv(path)
    ds.add([5, 6], [0.5, 0.6], rm.ACQUIRED, key="c")
    ds.write_csv(path, start=2)
    back = rm.LabeledDataset.read_csv(path)
    assert np.array_equal(back.arrays()[0], ds.arrays()[0])
    assert np.array_equal(back.arrays()[1], ds.arrays()[1])
    assert back.provenance == ds.provenance
    assert path.read_text().splitlines()[0] == "f0,f1,label0,label1,provenance"
    with pytest.raises(DomainError):
        ds.add([1.0], [0.0, 0.0])


def test_retraining_on_shifted_rows_reduces_their_error():
    env = ProfileEnv(d=2, constraint=(0.0035, 0.0035), init_constraint=(0.0015, 0.0025))
    rng = nn.make_rng(0)
    init = rm.LabeledDataset(env.feature_dim)
    for s in env.sample_initial(300, rng):
        init.add(env.encode(s), env.oracle_fn(s), key=s._key)
    hyper = rm.ModelHyper(hidden=(32, 32), epochs=60, batch_size=32, lr=3e-3)
    c = rm.build_committee(init, k=3, hyper=hyper, seed=0)
    shifted = []
    for _ in range(120):
        s = env.reset(rng)
        for _ in range(int(rng.integers(0, env.horizon))):
            s = env.step(s, int(rng.integers(1, env.n_actions)))
        shifted.append(s)
    uniq = {s._key: s for s in shifted}
    states = list(uniq.values())
    train_states, held = states[::2], states[1::2]
    rows = [(s._key, env.encode(s), env.oracle_fn(s)) for s in train_states]
    datasets = rm.append_acquired(rm.member_datasets(init, 3), [rows] * 3)
    c2 = rm.retrain(c, datasets, hyper, 1)
    xh = np.vstack([env.encode(s) for s in held])
    yh = np.array([env.oracle_fn(s) for s in held])
    before = np.mean((rm.predict_mean(c, xh) - yh) ** 2)
    after = np.mean((rm.predict_mean(c2, xh) - yh) ** 2)
    assert after < before


def test_fine_tune_continues_from_members():
    ds = toy_dataset()
    c = rm.build_committee(ds, k=2, hyper=FAST, seed=1)
    tuned = rm.retrain(c, rm.member_datasets(ds, 2),
                       rm.ModelHyper(**{**FAST.__dict__, "fine_tune": True, "fine_tune_steps": 5}), 2)
    assert tuned.version == c.version + 1
    x = ds.arrays()[0]
    assert np.max(np.abs(rm.predict_mean(tuned, x) - rm.predict_mean(c, x))) < 0.5


def test_committee_checkpoint_round_trip(tmp_path):
    c = rm.build_committee(toy_dataset(), k=3, hyper=FAST, seed=0)
    back = rm.load_committee(rm.save_committee(c, tmp_path))
    x = toy_dataset(5, 9).arrays()[0]
    assert np.array_equal(rm.predict_mean(back, x), rm.predict_mean(c, x))
