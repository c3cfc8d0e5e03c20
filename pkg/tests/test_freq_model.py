from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowseq import freq_model
from flowseq.aggregate import build_sequences, windows_for_units
from flowseq.ingest import FlowRecord, InternalNetworks
from flowseq.tokens import build_vocab, token_for

A, B, C, D = 2, 3, 4, 5


def test_fit_counts():
    m = freq_model.fit([A, A, B, C])
    assert m.counts == {A: 2, B: 1, C: 1} and m.n == 4
    assert freq_model.fit([A]).counts == {A: 1}
    assert freq_model.fit([A, B]) == freq_model.fit([B, A])


def test_fit_empty():
    with pytest.raises(ValueError):
        freq_model.fit([])


def test_scores():
    m = freq_model.fit([A, A, B, C])
    assert freq_model.score(m, A) == -0.5
    assert freq_model.score(m, D) == 0
    assert freq_model.score(freq_model.fit([A]), A) == -1.0
    assert m.score_many([A, D, B]).tolist() == [-0.5, 0.0, -0.25]


@given(st.lists(st.integers(2, 12), min_size=1, max_size=80))
def test_score_properties(tokens):
    m = freq_model.fit(tokens)
    scores = {t: m.score(t) for t in set(tokens)}
    assert all(-1 <= s <= 0 for s in scores.values())
    assert sum(-s for s in scores.values()) == pytest.approx(1.0)
    for a in scores:
        for b in scores:
            if m.counts[a] > m.counts[b]:
                assert scores[a] < scores[b]


def test_ranking_ignores_aggregation_rule():
    internal = InternalNetworks(["192.168.10.0/24"])
    hosts = ["192.168.10.2", "192.168.10.3", "8.8.8.8"]
    rng = np.random.default_rng(3)
    recs = [FlowRecord(i, datetime(2017, 7, 3, 9, int(rng.integers(60))), hosts[i % 2], hosts[2],
                       50000, 443, 6, int(rng.integers(1, 5000)), "BENIGN") for i in range(60)]
    vocab = build_vocab(token_for(r, "protobytes") for r in recs)
    m = freq_model.fit(vocab.encode(token_for(r, "protobytes")) for r in recs)
    per_rule = {}
    for rule in ("source", "dyad"):
        w = windows_for_units(build_sequences(recs, rule, vocab, "protobytes", internal))
        per_rule[rule] = dict(zip(w.refs.tolist(), m.score_many(w.targets).tolist()))
    assert per_rule["source"] == per_rule["dyad"]


def test_save_load(tmp_path):
    vocab = build_vocab(["TCP:10", "UDP:04", "TCP:12"])
    m = freq_model.fit([2, 2, 3, 4])
    path = tmp_path / "freq.csv"
    m.save(path, vocab)
    assert path.read_text().splitlines() == ["token,count", "#n,4", "TCP:10,2", "UDP:04,1", "TCP:12,1"]
    assert freq_model.FrequencyModel.load(path, vocab) == m
