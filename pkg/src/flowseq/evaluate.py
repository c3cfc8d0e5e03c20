"""ROC/AUC evaluation, per-attack reports and PC1 score fusion."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ingest import BENIGN

ALL_ATTACKS = "All Attacks"


def tied_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc_from_labels(scores, positive) -> float | None:
    """Mann-Whitney AUC; higher score = more anomalous. None when a class is empty."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = tied_ranks(scores)
    # rank sums are multiples of 0.5, so u is exact
    u = r[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scored, positive_predicate: Callable[[str], bool]) -> float | None:
    positive = [positive_predicate(lab) for lab in scored.labels]
    return auc_from_labels(scored.scores, positive)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for row in self.points:
                w.writerow([repr(v) for v in row])


def roc_curve(scores, positive) -> RocCurve:
    """One point per distinct score, swept from the most to the least anomalous.

    The first point (0, 0) has threshold +inf. Tied scores move both rates
    in one step, which makes the trapezoid area count ties as one half.
    """
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positive[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(p)[last]
    fp = np.cumsum(~p)[last]
    return RocCurve(
        np.r_[0.0, fp / n_neg],
        np.r_[0.0, tp / n_pos],
        np.r_[np.inf, s[last]],
    )


def bootstrap_mean(replica_aucs: Sequence[float]) -> float:
    if len(replica_aucs) == 0:
        raise ValueError("bootstrap_mean needs at least one replica")
    return math.fsum(replica_aucs) / len(replica_aucs)


def is_attack(label: str) -> bool:
    return label != BENIGN


@dataclass
class EvalRow:
    feature: str
    rule: str
    attack: str
    replica_aucs: list[float | None] = field(default_factory=list)
    positives: int = 0
    negatives: int = 0

    @property
    def present(self) -> bool:
        return any(a is not None for a in self.replica_aucs)

    @property
    def mean_auc(self) -> float | None:
        vals = [a for a in self.replica_aucs if a is not None]
        return bootstrap_mean(vals) if vals else None


def per_attack_aucs(scored, attack_types: Iterable[str]) -> dict[str, tuple[float | None, int, int]]:
    """AUC per attack type (that type vs everything else) plus the all-attacks collapse.

    Values are (auc, positives, negatives); auc is None when absent.
    """
    labels = np.asarray(scored.labels, dtype=object)
    out = {}
    attack_mask = labels != BENIGN
    targets = [(ALL_ATTACKS, attack_mask)] + [(a, labels == a) for a in attack_types]
    for name, pos in targets:
        pos = np.asarray(pos, dtype=bool)
        out[name] = (auc_from_labels(scored.scores, pos), int(pos.sum()), int((~pos).sum()))
    return out


def per_attack_eval(score_sets, attack_types: Iterable[str], feature: str = "", rule: str = "") -> list[EvalRow]:
    """One row per attack type, averaging AUC over the given replica score sets.

    ``score_sets`` is a single score set or a sequence of per-replica sets.
    """
    if hasattr(score_sets, "scores"):
        score_sets = [score_sets]
    attack_types = sorted(set(attack_types) - {BENIGN})
    rows = {name: EvalRow(feature, rule, name) for name in [ALL_ATTACKS, *attack_types]}
    for s in score_sets:
        for name, (a, npos, nneg) in per_attack_aucs(s, attack_types).items():
            row = rows[name]
            row.replica_aucs.append(a)
            row.positives, row.negatives = npos, nneg
    return list(rows.values())


def pc1_combine(scores_a: Mapping[int, float], scores_b: Mapping[int, float]) -> dict[int, float]:
    """Project two standardized score sets onto their first principal component.

    Rows present in only one map are dropped. The sign is chosen so the
    output correlates non-negatively with the sum of the standardized
    inputs; when that correlation is zero the first non-zero loading is made
    positive.
    """
    ids = sorted(set(scores_a) & set(scores_b))
    if len(ids) < 2:
        raise ValueError("pc1_combine needs at least 2 rows present in both score sets")
    X = np.column_stack([[scores_a[i] for i in ids], [scores_b[i] for i in ids]]).astype(float)
    X = X - X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    Z = np.divide(X, sd, out=np.zeros_like(X), where=sd > 0)
    cov = np.cov(Z, rowvar=False)
    _, vecs = np.linalg.eigh(cov)
    v = vecs[:, -1]
    proj = Z @ v
    total = Z.sum(axis=1)
    direction = float(proj @ total)
    # standardized columns put |direction| on the order of n when aligned
    if abs(direction) <= 1e-9 * len(ids):
        direction = v[np.flatnonzero(np.abs(v) > 1e-12)[0]]
    if direction < 0:
        proj = -proj
    return dict(zip(ids, (proj + 0.0).tolist()))


# ------------------------------------------------------------- reports ----

def write_report_csv(rows: Iterable[EvalRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "rule", "attack", "mean_auc", "replica_aucs", "positives", "negatives"])
        for r in rows:
            mean = "" if r.mean_auc is None else repr(r.mean_auc)
            reps = ";".join("" if a is None else repr(a) for a in r.replica_aucs)
            w.writerow([r.feature, r.rule, r.attack, mean, reps, r.positives, r.negatives])


def read_report_csv(path: str | os.PathLike) -> list[EvalRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            reps = [None if not a else float(a) for a in rec["replica_aucs"].split(";")]
            rows.append(EvalRow(rec["feature"], rec["rule"], rec["attack"], reps,
                                int(rec["positives"]), int(rec["negatives"])))
    return rows


TABLE_COLUMNS = ("source", "destination", "dyad", "internal", "external", "frequency")


def render_table(rows: Iterable[EvalRow], feature: str, columns: Sequence[str] = TABLE_COLUMNS,
                 digits: int = 2) -> str:
    """Aligned text table: attack types by rule, row maximum wrapped in ``**``."""
    cells: dict[str, dict[str, float | None]] = {}
    for r in rows:
        if r.feature == feature:
            cells.setdefault(r.attack, {})[r.rule] = r.mean_auc
    if not cells:
        return ""
    attacks = [ALL_ATTACKS] + sorted(a for a in cells if a != ALL_ATTACKS)
    attacks = [a for a in attacks if a in cells]
    header = ["", *[c.capitalize() for c in columns]]
    body = []
    for attack in attacks:
        vals = [cells[attack].get(c) for c in columns]
        shown = [round(v, digits) for v in vals if v is not None]
        top = max(shown) if shown else None
        line = [attack]
        for v in vals:
            if v is None:
                line.append("-")
            else:
                txt = f"{v:.{digits}f}"
                line.append(f"**{txt}**" if round(v, digits) == top else txt)
        body.append(line)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]

    def fmt(row):
        return "  ".join([row[0].ljust(widths[0])] + [row[i].rjust(widths[i]) for i in range(1, len(row))])

    name = "PC1" if feature == "pc1" else feature.capitalize()
    title = f"{name} AUC (row maximum in **bold**)"
    return "\n".join([title, fmt(header), *(fmt(r) for r in body)]) + "\n"


def write_roc_svg(curve: RocCurve, path: str | os.PathLike, title: str = "", size: int = 240) -> None:
    pad = 24
    span = size - 2 * pad
    pts = " ".join(f"{pad + x * span:.2f},{size - pad - y * span:.2f}" for x, y in zip(curve.fpr, curve.tpr))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#999"/>\n'
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#ccc" stroke-dasharray="4"/>\n'
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>\n'
        f'<text x="{pad}" y="{pad - 8}" font-size="11">{title} AUC={curve.auc:.3f}</text>\n'
        "</svg>\n"
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
