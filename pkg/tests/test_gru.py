import numpy as np
import pytest

from kgaml.predict.gru import GruModel, make_windows, train_gru, windows_ending_at

from oracles import gru_gradcheck


def test_window_counts():
    F = np.arange(20.0).reshape(10, 2)
    assert len(make_windows(F, window_len=4, stride=2)) == 4
    assert make_windows(F[:3], window_len=4, stride=1) == []
    w = make_windows(F, np.arange(10), window_len=5, stride=5)
    assert np.array_equal(np.concatenate([s for s, _ in w]), F)
    assert [lab for _, lab in w] == [4, 9]
    with pytest.raises(ValueError):
        make_windows(F, window_len=0)


def test_windows_ending_at_pads_left():
    F = np.arange(1.0, 7.0).reshape(3, 2)
    W = windows_ending_at(F, [0, 2], 2)
    assert np.array_equal(W[0], [[0, 0], [1, 2]])
    assert np.array_equal(W[1], [[3, 4], [5, 6]])


def test_gradcheck():
    assert gru_gradcheck(hidden=4, window=3) < 1e-3


def test_no_signal_learns_base_rate():
    X = np.zeros((40, 4, 3))
    y = np.array([1.0, 0.0] * 20)
    m = train_gru((X, y), hidden_dim=4, epochs=200, lr=0.05, balance=False)
    assert np.allclose(m.predict_proba(X), 0.5, atol=0.02)


def test_sum_sign_task_and_monotone_loss():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 6, 2))
    y = (X[:, :, 0].sum(axis=1) > 0).astype(float)
    m = train_gru((X, y), hidden_dim=8, epochs=200, lr=0.05, seed=1)
    acc = ((m.predict_proba(X) >= 0.5) == y).mean()
    assert acc >= 0.95
    assert all(b <= a for a, b in zip(m.epoch_losses, m.epoch_losses[1:]))


def test_deterministic_and_io(tmp_path):
    rng = np.random.default_rng(3)
    windows = [(rng.normal(size=(3, 2)), i % 2) for i in range(10)]
    a = train_gru(windows, hidden_dim=4, epochs=5, seed=9)
    b = train_gru(windows, hidden_dim=4, epochs=5, seed=9)
    X = np.stack([s for s, _ in windows])
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X))
    back = GruModel.load(a.save(tmp_path / "g.bin"))
    assert np.array_equal(back.predict_proba(X), a.predict_proba(X))
    p = a.predict_proba(X)
    assert ((p > 0) & (p < 1)).all()
