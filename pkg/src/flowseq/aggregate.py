"""Per-hour sequence aggregation and fixed-length next-token windows."""
from __future__ import annotations

import enum
import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .ingest import FlowRecord, as_internal, sort_records
from .tokens import PAD, Vocabulary, token_for

WINDOW = 10


class AggregationRule(str, enum.Enum):
    SOURCE = "source"
    DESTINATION = "destination"
    DYAD = "dyad"
    INTERNAL = "internal"
    EXTERNAL = "external"

    def __str__(self) -> str:
        return self.value


RULES = tuple(AggregationRule)


def keys_for(record: FlowRecord, rule, internal_ips=None) -> list[tuple]:
    rule = AggregationRule(rule)
    d, h = record.timestamp.date(), record.timestamp.hour
    if rule is AggregationRule.SOURCE:
        return [(record.src_ip, d, h)]
    if rule is AggregationRule.DESTINATION:
        return [(record.dst_ip, d, h)]
    if rule is AggregationRule.DYAD:
        return [(record.src_ip, record.dst_ip, d, h)]
    if internal_ips is None:
        raise ValueError(f"rule {rule.value!r} needs the internal IP set")
    internal = as_internal(internal_ips)
    # a flow with both ends internal feeds both hosts' internal groups
    want_internal = rule is AggregationRule.INTERNAL
    keys = []
    for ip in (record.src_ip, record.dst_ip):
        if (ip in internal) == want_internal and (ip, d, h) not in keys:
            keys.append((ip, d, h))
    return keys


@dataclass(frozen=True)
class SequenceUnit:
    key: tuple
    tokens: tuple[int, ...]
    refs: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def build_sequences(
    records: Iterable[FlowRecord],
    rule,
    vocab: Vocabulary,
    feature: str,
    internal_ips=None,
) -> list[SequenceUnit]:
    """Group records by the rule's (ip..., date, hour) key in time order.

    Units come out in order of their first flow, ties broken by row id.
    """
    rule = AggregationRule(rule)
    internal = as_internal(internal_ips) if internal_ips is not None else None
    groups: dict[tuple, tuple[list[int], list[int]]] = {}
    for rec in sort_records(records):
        idx = vocab.encode(token_for(rec, feature))
        for key in keys_for(rec, rule, internal):
            toks, refs = groups.setdefault(key, ([], []))
            toks.append(idx)
            refs.append(rec.row_id)
    return [SequenceUnit(k, tuple(t), tuple(r)) for k, (t, r) in groups.items()]


@dataclass(frozen=True)
class WindowedExample:
    context: tuple[int, ...]
    target: int
    target_ref: int


@dataclass(frozen=True)
class Windows:
    """A batch of windowed examples stored column-wise.

    ``contexts`` is (n, 10) int, ``targets`` and ``refs`` are (n,).
    """

    contexts: np.ndarray
    targets: np.ndarray
    refs: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self) -> Iterator[WindowedExample]:
        for c, t, r in zip(self.contexts, self.targets, self.refs):
            yield WindowedExample(tuple(int(x) for x in c), int(t), int(r))

    def __getitem__(self, idx) -> "Windows":
        return Windows(self.contexts[idx], self.targets[idx], self.refs[idx])

    @classmethod
    def empty(cls, window: int = WINDOW) -> "Windows":
        return cls(np.zeros((0, window), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["Windows"], window: int = WINDOW) -> "Windows":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(window)
        return cls(
            np.concatenate([p.contexts for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.refs for p in parts]),
        )


def windows(unit: SequenceUnit, stride: int = 1, window: int = WINDOW) -> Windows:
    """Targets at positions 0, stride, 2*stride, ...; contexts left-padded with PAD."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    toks = np.asarray(unit.tokens, dtype=np.int64)
    padded = np.concatenate([np.full(window, PAD, np.int64), toks])
    pos = np.arange(0, len(toks), stride)
    # padded[p : p + window] holds the `window` tokens before position p
    ctx = np.lib.stride_tricks.sliding_window_view(padded, window)[pos]
    return Windows(np.ascontiguousarray(ctx), toks[pos], np.asarray(unit.refs, np.int64)[pos])


def windows_for_units(units: Iterable[SequenceUnit], stride: int = 1, window: int = WINDOW) -> Windows:
    return Windows.concat([windows(u, stride, window) for u in units], window)


def class_weights(targets: Iterable[int]) -> dict[int, float]:
    """Inverse-frequency weights N / (K * count); classes never seen default to 1."""
    counts = Counter(int(t) for t in targets)
    if not counts:
        raise ValueError("class_weights needs at least one target")
    n, k = sum(counts.values()), len(counts)
    return {c: n / (k * m) for c, m in sorted(counts.items())}


def weight_vector(weights: Mapping[int, float], vocab_size: int) -> np.ndarray:
    vec = np.ones(vocab_size)
    for c, w in weights.items():
        vec[c] = w
    return vec


def write_sequences(units: Iterable[SequenceUnit], vocab: Vocabulary, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in units:
            key = ",".join(str(k) for k in u.key)
            fh.write(f"{key}\t{'|'.join(vocab.decode(t) for t in u.tokens)}\n")
