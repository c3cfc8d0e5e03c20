"""Training the BiLSTM next-token model and turning it into per-token outlier scores."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn_core
from .aggregate import RULES, AggregationRule, Windows, build_sequences, class_weights, weight_vector, windows_for_units
from .ingest import DatasetSplit, FlowRecord, sort_records
from .tokens import FEATURES, UNK, Vocabulary, build_vocab, token_for

logger = logging.getLogger(__name__)

TEST_STRIDE = {"protobytes": 1, "ports": 3}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    validation_fraction: float = 0.1
    seed: int = 0
    early_stop_patience: int = 2

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        for name in ("epochs", "batch_size", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    n_train: int = 0
    n_val: int = 0

    def as_rows(self) -> list[dict]:
        return [
            {"epoch": i + 1, "train_loss": tl, "val_loss": vl}
            for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss))
        ]


def validation_size(n: int, fraction: float) -> int:
    return min(max(int(round(n * fraction)), 1), n - 1)


def _mean_loss(params, windows: Windows, wvec: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for s in range(0, len(windows), batch_size):
        b = windows[s:s + batch_size]
        probs, _ = nn_core.forward(params, b.contexts)
        total += nn_core.batch_loss(probs, b.targets, wvec[b.targets]) * len(b)
    return total / len(windows)


def train(
    examples: Windows,
    weights: Mapping[int, float] | None,
    cfg: TrainConfig,
    model_cfg: nn_core.ModelConfig,
) -> tuple[nn_core.ModelParams, History]:
    """Fit on time-ordered windows, holding out the last fraction for validation.

    Returns the parameters from the epoch with the lowest validation loss.
    """
    n = len(examples)
    if n < 2:
        raise ValueError(f"need at least 2 training examples, got {n}")
    rng = np.random.default_rng(cfg.seed)
    n_val = validation_size(n, cfg.validation_fraction)
    fit_set, val_set = examples[: n - n_val], examples[n - n_val:]
    wvec = weight_vector(weights or {}, model_cfg.vocab_size)

    params = nn_core.init_params(model_cfg, rng)
    state = nn_core.AdamState(params)
    hyper = nn_core.AdamHyper(lr=cfg.learning_rate)
    history = History(n_train=len(fit_set), n_val=n_val)
    best, best_loss, stale = params.copy(), np.inf, 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(fit_set))
        running = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = fit_set[order[s:s + cfg.batch_size]]
            probs, cache = nn_core.forward(params, b.contexts)
            bl = nn_core.batch_loss(probs, b.targets, wvec[b.targets])
            if not np.isfinite(bl):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch + 1}, batch {s // cfg.batch_size}; "
                    f"max |param| = {max(np.abs(a).max() for a in params.arrays.values()):.3g}"
                )
            running += bl * len(b)
            grads = nn_core.backward(cache, b.targets, wvec[b.targets])
            nn_core.adam_step(params, grads, state, hyper)
        train_loss = running / len(fit_set)
        val_loss = _mean_loss(params, val_set, wvec, max(cfg.batch_size, 1024))
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        logger.info("epoch %d: train %.4f  val %.4f", epoch + 1, train_loss, val_loss)
        if val_loss < best_loss:
            best, best_loss, stale = params.copy(), val_loss, 0
            history.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    return best, history


def predict(params: nn_core.ModelParams, contexts: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    out = [nn_core.forward(params, contexts[s:s + batch_size])[0] for s in range(0, len(contexts), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.vocab_size))


def accuracy(params: nn_core.ModelParams, examples: Windows) -> float:
    probs = predict(params, examples.contexts)
    return float(np.mean(probs.argmax(axis=1) == examples.targets))


@dataclass
class ScoreSet:
    """Per-token outlier scores for one (feature, rule, replica) cell."""

    refs: np.ndarray
    scores: np.ndarray
    labels: list[str]
    feature: str = ""
    rule: str = ""
    replica: int = 0

    def __len__(self) -> int:
        return len(self.refs)

    def as_map(self) -> dict[int, float]:
        return dict(zip(self.refs.tolist(), self.scores.tolist()))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_id", "feature", "rule", "replica", "score", "label"])
            for ref, sc, lab in zip(self.refs.tolist(), self.scores.tolist(), self.labels):
                w.writerow([ref, self.feature, self.rule, self.replica, repr(float(sc)), lab])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ScoreSet":
        refs, scores, labels = [], [], []
        feature = rule = ""
        replica = 0
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                refs.append(int(row["row_id"]))
                scores.append(float(row["score"]))
                labels.append(row["label"])
                feature, rule, replica = row["feature"], row["rule"], int(row["replica"])
        return cls(np.asarray(refs, np.int64), np.asarray(scores, float), labels, feature, rule, replica)


def score_tokens(
    params: nn_core.ModelParams,
    examples: Windows,
    labels: Mapping[int, str],
    batch_size: int = 2048,
) -> ScoreSet:
    """Score = minus the predicted probability of the observed target.

    Targets that were out of vocabulary at training time score exactly 0.
    """
    scores = np.empty(len(examples))
    for s in range(0, len(examples), batch_size):
        b = examples[s:s + batch_size]
        probs = nn_core.forward(params, b.contexts)[0]
        scores[s:s + len(b)] = -probs[np.arange(len(b)), b.targets]
    scores[examples.targets == UNK] = 0.0
    # no negative zeros in the output files
    scores += 0.0
    return ScoreSet(examples.refs.copy(), scores, [labels[int(r)] for r in examples.refs])


# ----------------------------------------------------------------- grid ----

def time_ordered(examples: Windows, records: Sequence[FlowRecord]) -> Windows:
    """Reorder windows by their target flow's (timestamp, row_id)."""
    rank = {r.row_id: i for i, r in enumerate(sort_records(records))}
    key = np.fromiter((rank[int(r)] for r in examples.refs), np.int64, len(examples))
    return examples[np.argsort(key, kind="stable")]


def bootstrap(examples: Windows, rng: np.random.Generator) -> Windows:
    """Resample with replacement (same size), keeping the original time order."""
    idx = np.sort(rng.integers(0, len(examples), size=len(examples)))
    return examples[idx]


def feature_vocab(split: DatasetSplit, feature: str) -> Vocabulary:
    return build_vocab(token_for(r, feature) for r in sort_records(split.train))


@dataclass(frozen=True)
class Cell:
    feature: str
    rule: str
    replica: int


def cell_windows(split: DatasetSplit, vocab: Vocabulary, feature: str, rule, internal_ips,
                 test_stride: int | None = None) -> tuple[Windows, Windows]:
    """Training windows (stride 1, time ordered) and test windows for one feature/rule."""
    rule = AggregationRule(rule)
    train_units = build_sequences(split.train, rule, vocab, feature, internal_ips)
    test_units = build_sequences(split.test, rule, vocab, feature, internal_ips)
    train_w = time_ordered(windows_for_units(train_units, 1), split.train)
    stride = test_stride if test_stride is not None else TEST_STRIDE[feature]
    return train_w, windows_for_units(test_units, stride)


def fit_cell(train_windows: Windows, vocab_size: int, replica: int, cfg: TrainConfig,
             model_cfg: nn_core.ModelConfig | None = None) -> tuple[nn_core.ModelParams, History]:
    seed = cfg.seed + replica
    sample = bootstrap(train_windows, np.random.default_rng(seed))
    model_cfg = model_cfg or nn_core.ModelConfig(vocab_size=vocab_size)
    return train(sample, class_weights(sample.targets), replace(cfg, seed=seed), model_cfg)


def _run_cell(args):
    cell, split, vocab, internal_ips, cfg, model_cfg = args
    train_w, test_w = cell_windows(split, vocab, cell.feature, cell.rule, internal_ips)
    mc = replace(model_cfg, vocab_size=len(vocab)) if model_cfg else None
    params, history = fit_cell(train_w, len(vocab), cell.replica, cfg, mc)
    labels = {r.row_id: r.label for r in split.test}
    scored = score_tokens(params, test_w, labels)
    scored.feature, scored.rule, scored.replica = cell.feature, str(cell.rule), cell.replica
    return cell, scored, history


def run_grid(
    split: DatasetSplit,
    internal_ips,
    features: Iterable[str] = FEATURES,
    rules: Iterable = RULES,
    replicas: int = 3,
    cfg: TrainConfig = TrainConfig(),
    model_cfg: nn_core.ModelConfig | None = None,
    workers: int = 1,
) -> dict[Cell, ScoreSet]:
    """Train and score every (feature, rule, replica) cell; 2 x 5 x 3 = 30 by default."""
    features, rules = list(features), [AggregationRule(r) for r in rules]
    vocabs = {f: feature_vocab(split, f) for f in features}
    jobs = [
        (Cell(f, r.value, k), split, vocabs[f], internal_ips, cfg, model_cfg)
        for f in features for r in rules for k in range(replicas)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    return {cell: scored for cell, scored, _ in results}
