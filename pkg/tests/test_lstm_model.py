from datetime import datetime, timedelta

import numpy as np
import pytest

from flowseq import nn_core
from flowseq.aggregate import RULES, SequenceUnit, Windows, class_weights, windows
from flowseq.ingest import DatasetSplit, FlowRecord, InternalNetworks
from flowseq.lstm_model import (
    ScoreSet, TrainConfig, accuracy, bootstrap, cell_windows, feature_vocab, fit_cell, run_grid,
    score_tokens, train, validation_size,
)
from flowseq.tokens import UNK
from oracles import OVERFIT_CFG, repeating_windows

TINY = nn_core.ModelConfig(vocab_size=0, embed_dim=4, hidden1=3, hidden2=3, dense_dim=4)


def tiny(V):
    return nn_core.ModelConfig(vocab_size=V, embed_dim=4, hidden1=3, hidden2=3, dense_dim=4)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_validation_size():
    assert validation_size(450_000, 0.1) == 45_000
    assert validation_size(10, 0.01) == 1
    assert validation_size(2, 0.9) == 1


@pytest.mark.slow
def test_overfit_oracle():
    ex = repeating_windows(200)
    params, hist = train(ex, None, OVERFIT_CFG, nn_core.ModelConfig(vocab_size=7))
    assert accuracy(params, ex) >= 0.99
    assert min(hist.train_loss) < 0.05
    assert hist.train_loss[-1] < hist.train_loss[0]


def test_training_is_deterministic_and_keeps_best():
    ex = repeating_windows(60)
    cfg = TrainConfig(epochs=4, batch_size=16, seed=3)
    p1, h1 = train(ex, class_weights(ex.targets), cfg, tiny(7))
    p2, h2 = train(ex, class_weights(ex.targets), cfg, tiny(7))
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    for k in p1:
        assert np.array_equal(p1[k], p2[k])
    assert (h1.n_train, h1.n_val) == (54, 6)
    assert h1.best_epoch == int(np.argmin(h1.val_loss)) + 1


def test_early_stopping():
    ex = repeating_windows(40)
    # a huge learning rate makes validation loss bounce
    cfg = TrainConfig(epochs=30, batch_size=8, learning_rate=1.0, early_stop_patience=1)
    _, hist = train(ex, None, cfg, tiny(7))
    assert len(hist.train_loss) < 30
    assert hist.val_loss[-1] >= min(hist.val_loss[:-1])


def test_train_needs_two_examples():
    with pytest.raises(ValueError):
        train(repeating_windows(1), None, TrainConfig(), tiny(7))


def test_score_tokens_values():
    params = nn_core.init_params(tiny(5), np.random.default_rng(0))
    ex = Windows(np.array([[0] * 9 + [2], [0] * 8 + [2, 3], [0] * 9 + [4]]),
                 np.array([3, UNK, 2]), np.array([10, 11, 12]))
    labels = {10: "BENIGN", 11: "BENIGN", 12: "X"}
    s = score_tokens(params, ex, labels)
    probs = nn_core.forward(params, ex.contexts)[0]
    assert s.scores[0] == -probs[0, 3] and s.scores[2] == -probs[2, 2]
    assert s.scores[1] == 0.0 and not np.signbit(s.scores[1])
    assert s.labels == ["BENIGN", "BENIGN", "X"]
    assert np.all((s.scores >= -1) & (s.scores <= 0))
    again = score_tokens(params, ex, labels, batch_size=1)
    assert np.array_equal(again.scores, s.scores)


def test_score_of_known_probability():
    params = nn_core.init_params(tiny(4), np.random.default_rng(0))
    for name in params:
        params[name][...] = 0.0
    params["dense_out.b"][...] = np.log([0.05, 0.05, 0.8, 0.1])
    s = score_tokens(params, Windows(np.zeros((1, 10), int), np.array([2]), np.array([0])), {0: "BENIGN"})
    assert s.scores[0] == pytest.approx(-0.8, abs=1e-12)


def test_scoreset_roundtrip(tmp_path):
    s = ScoreSet(np.array([3, 1]), np.array([-0.25, -1 / 3]), ["BENIGN", "PortScan"], "ports", "dyad", 2)
    s.save(tmp_path / "s.csv")
    t = ScoreSet.load(tmp_path / "s.csv")
    assert np.array_equal(t.refs, s.refs) and np.array_equal(t.scores, s.scores)
    assert (t.labels, t.feature, t.rule, t.replica) == (s.labels, "ports", "dyad", 2)


def test_bootstrap_same_size_and_ordered():
    ex = repeating_windows(50)
    b = bootstrap(ex, np.random.default_rng(0))
    assert len(b) == 50
    assert np.all(np.diff(b.refs) >= 0)
    assert set(b.refs.tolist()) < set(ex.refs.tolist())


def _split():
    t0 = datetime(2017, 7, 3, 9)
    hosts = ["192.168.10.2", "192.168.10.3", "8.8.8.8"]
    rng = np.random.default_rng(0)

    def make(day, start, n, label="BENIGN"):
        out = []
        for i in range(n):
            src, dst = rng.choice(hosts, 2, replace=False)
            out.append(FlowRecord(start + i, t0 + timedelta(days=day, seconds=7 * i), str(src), str(dst),
                                  50000, int(rng.choice([80, 443])), 6, int(rng.integers(100, 5000)), label))
        return tuple(out)

    return DatasetSplit(t0.date(), make(0, 0, 80), make(1, 1000, 30) + make(1, 2000, 5, "PortScan"))


def test_run_grid_shape():
    split = _split()
    nets = InternalNetworks(["192.168.10.0/24"])
    cfg = TrainConfig(epochs=1, batch_size=64)
    grid = run_grid(split, nets, replicas=3, cfg=cfg, model_cfg=TINY)
    assert len(grid) == 30
    assert {c.replica for c in grid} == {0, 1, 2}
    for cell, scored in grid.items():
        if cell.rule != "internal":
            assert len(set(scored.refs.tolist())) == len(scored)
        assert (scored.feature, scored.rule, scored.replica) == (cell.feature, cell.rule, cell.replica)
    again = run_grid(split, nets, features=["ports"], rules=["dyad"], replicas=2, cfg=cfg, model_cfg=TINY)
    for cell, scored in again.items():
        assert np.array_equal(scored.scores, grid[cell].scores)


def test_fit_cell_replica_seeds():
    split = _split()
    vocab = feature_vocab(split, "protobytes")
    train_w, test_w = cell_windows(split, vocab, "protobytes", "source", InternalNetworks(["192.168.10.0/24"]))
    assert np.all(np.diff([int(r) for r in train_w.refs]) >= 0)
    cfg = TrainConfig(epochs=1, seed=5)
    p_a, _ = fit_cell(train_w, len(vocab), 1, cfg, tiny(len(vocab)))
    p_b, _ = fit_cell(train_w, len(vocab), 0, TrainConfig(epochs=1, seed=6), tiny(len(vocab)))
    p_c, _ = fit_cell(train_w, len(vocab), 2, cfg, tiny(len(vocab)))
    assert all(np.array_equal(p_a[k], p_b[k]) for k in p_a)
    assert not all(np.array_equal(p_a[k], p_c[k]) for k in p_a)
