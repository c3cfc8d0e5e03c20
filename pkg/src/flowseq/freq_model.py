"""Unigram frequency baseline: a token's score is minus its training relative frequency."""
from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tokens import Vocabulary


@dataclass(frozen=True)
class FrequencyModel:
    counts: dict[int, int] = field(default_factory=dict)
    n: int = 0

    def score(self, token: int) -> float:
        # unseen tokens get 0: the most anomalous value the formula can give
        return -self.counts.get(int(token), 0) / self.n

    def score_many(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size == 0:
            return np.zeros(0)
        table = np.zeros(max(int(tokens.max()), max(self.counts, default=0)) + 1)
        for tok, c in self.counts.items():
            table[tok] = c
        return -table[tokens] / self.n

    def save(self, path: str | os.PathLike, vocab: Vocabulary) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token", "count"])
            w.writerow(["#n", self.n])
            for tok, c in sorted(self.counts.items()):
                w.writerow([vocab.decode(tok), c])

    @classmethod
    def load(cls, path: str | os.PathLike, vocab: Vocabulary) -> "FrequencyModel":
        counts, n = {}, None
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for tok, c in reader:
                if tok == "#n":
                    n = int(c)
                else:
                    counts[vocab.encode(tok)] = int(c)
        if n is None or n != sum(counts.values()):
            raise ValueError(f"{path}: token counts do not sum to n")
        return cls(counts, n)


def fit(train_tokens: Iterable[int]) -> FrequencyModel:
    counts = Counter(int(t) for t in train_tokens)
    n = sum(counts.values())
    if n == 0:
        raise ValueError("cannot fit a frequency model on an empty token stream")
    return FrequencyModel(dict(sorted(counts.items())), n)


def score(model: FrequencyModel, token: int) -> float:
    return model.score(token)
