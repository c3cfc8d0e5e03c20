"""File-staged pipeline: synth -> ingest -> tokenize -> train -> score -> combine -> eval -> report.

Every stage reads the artifacts of the previous ones from the output
directory and writes its own, plus a ``manifest_<stage>.json`` with content
hashes of what it read and wrote.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__, evaluate, freq_model, ingest, synth
from .aggregate import RULES, AggregationRule, build_sequences, write_sequences
from .lstm_model import TEST_STRIDE, ScoreSet, TrainConfig, cell_windows, fit_cell, score_tokens
from .nn_core import ModelConfig, ModelParams
from .tokens import FEATURES, Vocabulary, build_vocab, token_for

logger = logging.getLogger("flowseq")

ENV_PREFIX = "FLOWSEQ_"


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    out: str = "run"
    input: str = ""
    internal_ips: str = ""
    schema: str = ""
    synth_config: str = ""
    train_day: str = ""
    feature: str = "both"
    rule: str = "all"
    replicas: int = 3
    seed: int = 0
    workers: int = 1
    stride: int = 0
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    validation_fraction: float = 0.1
    patience: int = 2
    embed_dim: int = 50
    hidden: int = 64
    dense: int = 64
    svg: bool = False
    dump_sequences: bool = False

    @property
    def features(self) -> list[str]:
        return list(FEATURES) if self.feature == "both" else [self.feature]

    @property
    def rules(self) -> list[str]:
        return [r.value for r in RULES] if self.rule == "all" else [AggregationRule(self.rule).value]

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate,
                           self.validation_fraction, self.seed, self.patience)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.embed_dim, self.hidden, self.hidden, self.dense)

    def test_stride(self, feature: str) -> int:
        return self.stride or TEST_STRIDE[feature]


def _coerce(name: str, raw):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    return str(raw)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file [run] section < FLOWSEQ_* env vars < flags."""
    values: dict = {}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser(interpolation=None)
        with open(args.config, encoding="utf-8") as fh:
            parser.read_file(fh)
        if parser.has_section("run"):
            for key, raw in parser.items("run"):
                if key not in RunConfig.__dataclass_fields__:
                    raise PipelineError(f"{args.config}: unknown [run] key {key!r}")
                values[key] = _coerce(key, raw)
    for name in RunConfig.__dataclass_fields__:
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            values[name] = _coerce(name, env)
    for name in RunConfig.__dataclass_fields__:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    if cfg.feature not in ("both", *FEATURES):
        raise PipelineError(f"--feature must be one of protobytes, ports, both (got {cfg.feature!r})")
    if cfg.rule != "all" and cfg.rule not in {r.value for r in RULES}:
        raise PipelineError(f"unknown --rule {cfg.rule!r}")
    return cfg


# ------------------------------------------------------------ manifests ----

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, stage: str, cfg: RunConfig, inputs, outputs, extra=None) -> None:
    def table(paths):
        return {str(Path(p).relative_to(out) if Path(p).is_relative_to(out) else p): sha256(Path(p))
                for p in sorted(paths, key=str)}

    manifest = {
        "stage": stage,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": cfg.seed,
        "inputs": table(inputs),
        "outputs": table(outputs),
    }
    if extra:
        manifest.update(extra)
    with open(out / f"manifest_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def read_manifest(out: Path, stage: str) -> dict:
    path = out / f"manifest_{stage}.json"
    if not path.exists():
        raise PipelineError(f"missing {path}; run `flowseq {stage}` first")
    return json.loads(path.read_text(encoding="utf-8"))


def require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing {path}; run `flowseq {producer}` first")
    return path


# --------------------------------------------------------------- stages ----

def cmd_synth(cfg: RunConfig) -> int:
    """Write a synthetic flow CSV and its internal-IP list."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scfg = synth.SynthConfig.from_config(cfg.synth_config) if cfg.synth_config else synth.SynthConfig()
    if not cfg.synth_config:
        scfg.seed = cfg.seed
    records = synth.generate(scfg)
    flows, ips = out / "flows.csv", out / "internal_ips.txt"
    synth.write_csv(records, flows)
    synth.write_internal_ips(scfg, ips)
    inputs = [cfg.synth_config] if cfg.synth_config else []
    write_manifest(out, "synth", cfg, inputs, [flows, ips], {"synth_seed": scfg.seed})
    logger.info("synth: %d flows -> %s", len(records), flows)
    return 0


def _input_files(location: str) -> list[Path]:
    p = Path(location)
    if p.is_dir():
        files = sorted(p.glob("*.csv"))
        if not files:
            raise PipelineError(f"no .csv files in {p}")
        return files
    if not p.exists():
        raise PipelineError(f"input {p} does not exist")
    return [p]


def cmd_ingest(cfg: RunConfig) -> int:
    """Parse, clean and split flow CSVs."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    src = cfg.input or str(require(out / "flows.csv", "synth"))
    ips_path = Path(cfg.internal_ips) if cfg.internal_ips else require(out / "internal_ips.txt", "synth")
    if not ips_path.exists():
        raise PipelineError(f"internal IP file {ips_path} does not exist")
    schema = ingest.FlowSchema.from_config(cfg.schema) if cfg.schema else ingest.FlowSchema()
    internal = ingest.InternalNetworks.from_file(ips_path)

    files = _input_files(src)
    records, rejected_rows, offset = [], [], 0
    for f in files:
        res = ingest.parse_flow_csv(f, schema, start_row_id=offset)
        offset = res.next_row_id
        records.extend(res.records)
        rejected_rows.extend(ingest.Rejection(r.line_number, r.reason, f.name) for r in res.rejected)
    cleaned = ingest.sort_records(ingest.clean(records, internal))
    if not cleaned:
        raise PipelineError("no records survive cleaning")
    train_day = date.fromisoformat(cfg.train_day) if cfg.train_day else cleaned[0].timestamp.date()
    split = ingest.split_by_day(cleaned, train_day)
    tags = {r.row_id: "train" for r in split.train}
    tags.update({r.row_id: "test" for r in split.test})

    rec_path, rej_path, hist_path = out / "records.csv", out / "rejected.csv", out / "day_histogram.csv"
    ingest.write_records(cleaned, rec_path, tags)
    ingest.write_rejections(rejected_rows, rej_path)
    with open(hist_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("date,hour,flows\n")
        for d, hours in ingest.day_histogram(cleaned).items():
            for h in sorted(hours):
                fh.write(f"{d},{h},{hours[h]}\n")
    write_manifest(out, "ingest", cfg, [*files, ips_path] + ([cfg.schema] if cfg.schema else []),
                   [rec_path, rej_path, hist_path],
                   {"train_day": train_day.isoformat(), "parsed": len(records) + len(rejected_rows),
                    "accepted": len(records), "rejected": len(rejected_rows),
                    "dropped_no_internal": len(records) - len(cleaned),
                    "train": len(split.train), "test": len(split.test)})
    logger.info("ingest: %d parsed, %d rejected, %d kept (%d train / %d test)",
                len(records) + len(rejected_rows), len(rejected_rows), len(cleaned),
                len(split.train), len(split.test))
    return 0


def _load_split(out: Path) -> ingest.DatasetSplit:
    """Reload the ingest split, refusing any training row off the recorded training day."""
    manifest = read_manifest(out, "ingest")
    train_day = date.fromisoformat(manifest["train_day"])
    records, tags = ingest.read_records(require(out / "records.csv", "ingest"))
    if len(tags) != len(records):
        raise PipelineError("records.csv carries no train/test split column; rerun `flowseq ingest`")
    train, test = [], []
    for r in records:
        if tags[r.row_id] == "train":
            if r.timestamp.date() != train_day:
                raise PipelineError(
                    f"row {r.row_id} dated {r.timestamp.date()} is tagged for training but the "
                    f"clean-baseline split trains on {train_day} only; refusing to train"
                )
            train.append(r)
        else:
            if r.timestamp.date() <= train_day:
                raise PipelineError(f"test row {r.row_id} is not after training day {train_day}")
            test.append(r)
    return ingest.DatasetSplit(train_day, tuple(train), tuple(test))


def _internal(out: Path, cfg: RunConfig) -> ingest.InternalNetworks:
    path = Path(cfg.internal_ips) if cfg.internal_ips else out / "internal_ips.txt"
    return ingest.InternalNetworks.from_file(require(path, "synth"))


def cmd_tokenize(cfg: RunConfig) -> int:
    """Build per-feature vocabularies from the training day."""
    out = Path(cfg.out)
    split = _load_split(out)
    written = []
    for feature in cfg.features:
        vocab = build_vocab(token_for(r, feature) for r in ingest.sort_records(split.train))
        path = out / f"vocab_{feature}.tsv"
        vocab.save(path)
        written.append(path)
        logger.info("tokenize: %s vocabulary of %d entries", feature, len(vocab))
        if cfg.dump_sequences:
            internal = _internal(out, cfg)
            for rule in cfg.rules:
                units = build_sequences(split.train + split.test, rule, vocab, feature, internal)
                seq_path = out / f"sequences_{feature}_{rule}.tsv"
                write_sequences(units, vocab, seq_path)
                written.append(seq_path)
    write_manifest(out, "tokenize", cfg, [out / "records.csv"], written)
    return 0


def _vocab(out: Path, feature: str) -> Vocabulary:
    return Vocabulary.load(require(out / f"vocab_{feature}.tsv", "tokenize"))


def _train_job(args):
    out, cfg, feature, rule, replica = args
    split = _load_split(out)
    vocab = _vocab(out, feature)
    train_w, _ = cell_windows(split, vocab, feature, rule, _internal(out, cfg))
    params, history = fit_cell(train_w, len(vocab), replica, cfg.train_config(), cfg.model_config(len(vocab)))
    stem = out / "models" / f"{feature}_{rule}_r{replica}"
    params.save(stem.with_suffix(".npz"))
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump({"feature": feature, "rule": rule, "replica": replica, "seed": cfg.seed + replica,
                   "n_windows": len(train_w), "n_train": history.n_train, "n_val": history.n_val,
                   "best_epoch": history.best_epoch, "history": history.as_rows()}, fh, indent=2)
        fh.write("\n")
    return [stem.with_suffix(".npz"), stem.with_suffix(".json")]


def _grid(cfg: RunConfig):
    return [(f, r, k) for f in cfg.features for r in cfg.rules for k in range(cfg.replicas)]


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_train(cfg: RunConfig) -> int:
    """Fit frequency models and the LSTM grid."""
    out = Path(cfg.out)
    split = _load_split(out)
    (out / "models").mkdir(exist_ok=True)
    written = []
    for feature in cfg.features:
        vocab = _vocab(out, feature)
        fm = freq_model.fit(vocab.encode(token_for(r, feature)) for r in split.train)
        path = out / "models" / f"frequency_{feature}.csv"
        fm.save(path, vocab)
        written.append(path)
    jobs = [(out, cfg, f, r, k) for f, r, k in _grid(cfg)]
    done = 0
    for paths in _map(_train_job, jobs, cfg.workers):
        written.extend(paths)
        done += 1
    logger.info("train: %d frequency models, %d LSTM models", len(cfg.features), done)
    inputs = [out / "records.csv"] + [out / f"vocab_{f}.tsv" for f in cfg.features]
    write_manifest(out, "train", cfg, inputs, written,
                   {"train_config": cfg.train_config().__dict__, "grid": [list(j) for j in _grid(cfg)]})
    return 0


def _score_job(args):
    out, cfg, feature, rule, replica = args
    split = _load_split(out)
    vocab = _vocab(out, feature)
    model = require(out / "models" / f"{feature}_{rule}_r{replica}.npz", "train")
    params = ModelParams.load(model)
    _, test_w = cell_windows(split, vocab, feature, rule, _internal(out, cfg), cfg.test_stride(feature))
    scored = score_tokens(params, test_w, {r.row_id: r.label for r in split.test})
    scored.feature, scored.rule, scored.replica = feature, rule, replica
    path = out / "scores" / f"{feature}_{rule}_r{replica}.csv"
    scored.save(path)
    return path, int(np.sum(test_w.targets == 1))


def frequency_scores(split: ingest.DatasetSplit, vocab: Vocabulary, model: freq_model.FrequencyModel,
                     feature: str) -> ScoreSet:
    """Score every test flow once; the unigram model has no notion of sequence."""
    test = ingest.sort_records(split.test)
    toks = [vocab.encode(token_for(r, feature)) for r in test]
    return ScoreSet(np.array([r.row_id for r in test], np.int64), model.score_many(toks) + 0.0,
                    [r.label for r in test], feature, "frequency", 0)


def cmd_score(cfg: RunConfig) -> int:
    """Score test tokens with every fitted model."""
    out = Path(cfg.out)
    split = _load_split(out)
    (out / "scores").mkdir(exist_ok=True)
    written, oov = [], {}
    for feature in cfg.features:
        vocab = _vocab(out, feature)
        fm = freq_model.FrequencyModel.load(
            require(out / "models" / f"frequency_{feature}.csv", "train"), vocab)
        path = out / "scores" / f"{feature}_frequency_r0.csv"
        frequency_scores(split, vocab, fm, feature).save(path)
        written.append(path)
    jobs = [(out, cfg, f, r, k) for f, r, k in _grid(cfg)]
    for (f, r, k), (path, n_oov) in zip(_grid(cfg), _map(_score_job, jobs, cfg.workers)):
        written.append(path)
        oov[f"{f}_{r}_r{k}"] = n_oov
    models = [out / "models" / f"{f}_{r}_r{k}.npz" for f, r, k in _grid(cfg)]
    write_manifest(out, "score", cfg, [out / "records.csv", *models], written,
                   {"oov_targets_scored_zero": oov,
                    "test_stride": {f: cfg.test_stride(f) for f in cfg.features}})
    return 0


def cmd_combine(cfg: RunConfig) -> int:
    """Fuse protobyte and port frequency scores onto PC1."""
    out = Path(cfg.out)
    a = ScoreSet.load(require(out / "scores" / "protobytes_frequency_r0.csv", "score"))
    b = ScoreSet.load(require(out / "scores" / "ports_frequency_r0.csv", "score"))
    fused = evaluate.pc1_combine(a.as_map(), b.as_map())
    labels = dict(zip(a.refs.tolist(), a.labels))
    ids = sorted(fused)
    path = out / "scores" / "pc1_frequency_r0.csv"
    ScoreSet(np.array(ids, np.int64), np.array([fused[i] for i in ids]), [labels[i] for i in ids],
             "pc1", "frequency", 0).save(path)
    write_manifest(out, "combine", cfg,
                   [out / "scores" / "protobytes_frequency_r0.csv", out / "scores" / "ports_frequency_r0.csv"],
                   [path])
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    """Per-attack ROC/AUC over all score sets."""
    out = Path(cfg.out)
    split = _load_split(out)
    attacks = sorted({r.label for r in split.test} - {ingest.BENIGN})
    files = sorted((out / "scores").glob("*.csv")) if (out / "scores").exists() else []
    if not files:
        raise PipelineError(f"no score files under {out / 'scores'}; run `flowseq score` first")
    groups: dict[tuple[str, str], list[ScoreSet]] = {}
    for f in files:
        s = ScoreSet.load(f)
        groups.setdefault((s.feature, s.rule), []).append(s)
    roc_dir = out / "roc"
    roc_dir.mkdir(exist_ok=True)
    rows, written = [], []
    feature_order = {"protobytes": 0, "ports": 1, "pc1": 2}
    rule_order = {r: i for i, r in enumerate(evaluate.TABLE_COLUMNS)}
    for (feature, rule) in sorted(groups, key=lambda k: (feature_order.get(k[0], 9), rule_order.get(k[1], 9))):
        sets = sorted(groups[(feature, rule)], key=lambda s: s.replica)
        rows.extend(evaluate.per_attack_eval(sets, attacks, feature, rule))
        for s in sets:
            labels = np.asarray(s.labels, dtype=object)
            for attack in [evaluate.ALL_ATTACKS, *attacks]:
                pos = labels != ingest.BENIGN if attack == evaluate.ALL_ATTACKS else labels == attack
                if pos.all() or not pos.any():
                    continue
                curve = evaluate.roc_curve(s.scores, pos)
                stem = roc_dir / f"{feature}_{rule}_r{s.replica}_{attack.replace(' ', '_')}"
                curve.save(stem.with_suffix(".csv"))
                written.append(stem.with_suffix(".csv"))
                if cfg.svg:
                    evaluate.write_roc_svg(curve, stem.with_suffix(".svg"), f"{feature}/{rule}/{attack}")
                    written.append(stem.with_suffix(".svg"))
    report = out / "report.csv"
    evaluate.write_report_csv(rows, report)
    write_manifest(out, "eval", cfg, files, [report, *written])
    return 0


def cmd_report(cfg: RunConfig) -> int:
    """Render the AUC tables as text."""
    out = Path(cfg.out)
    rows = evaluate.read_report_csv(require(out / "report.csv", "eval"))
    parts = []
    for feature in ("protobytes", "ports", "pc1"):
        cols = ("frequency",) if feature == "pc1" else evaluate.TABLE_COLUMNS
        table = evaluate.render_table(rows, feature, cols)
        if table:
            parts.append(table)
    path = out / "report.txt"
    path.write_text("\n".join(parts), encoding="utf-8")
    write_manifest(out, "report", cfg, [out / "report.csv"], [path])
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def cmd_run(cfg: RunConfig) -> int:
    """Every stage in order; starts from synthetic data when no --input is given."""
    if not cfg.input and not (Path(cfg.out) / "flows.csv").exists():
        cmd_synth(cfg)
    stages = [cmd_ingest, cmd_tokenize, cmd_train, cmd_score]
    if set(cfg.features) == set(FEATURES):
        stages.append(cmd_combine)
    stages += [cmd_eval, cmd_report]
    for stage in stages:
        stage(cfg)
    return 0


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "tokenize": cmd_tokenize, "train": cmd_train,
    "score": cmd_score, "combine": cmd_combine, "eval": cmd_eval, "report": cmd_report, "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [run] section")
    common.add_argument("--out", help="artifact directory (default: run)")
    common.add_argument("--input", help="flow CSV file or a directory of CSVs")
    common.add_argument("--internal-ips", dest="internal_ips", help="addresses/CIDRs, one per line")
    common.add_argument("--schema", help="INI file with a [schema] column mapping")
    common.add_argument("--synth-config", dest="synth_config", help="INI file for the synthetic generator")
    common.add_argument("--train-day", dest="train_day", help="YYYY-MM-DD (default: earliest day)")
    common.add_argument("--feature", choices=["protobytes", "ports", "both"])
    common.add_argument("--rule", choices=[r.value for r in RULES] + ["all"])
    common.add_argument("--replicas", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--stride", type=int, help="test-window stride override")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--learning-rate", dest="learning_rate", type=float)
    common.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    common.add_argument("--patience", type=int)
    common.add_argument("--embed-dim", dest="embed_dim", type=int)
    common.add_argument("--hidden", type=int, help="LSTM units per direction")
    common.add_argument("--dense", type=int, help="dense hidden layer width")
    common.add_argument("--svg", action="store_const", const=True, help="also write ROC plots as SVG")
    common.add_argument("--dump-sequences", dest="dump_sequences", action="store_const", const=True)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="flowseq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowseq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg)
    except (PipelineError, ingest.SchemaError, ingest.ConfigError, ingest.SplitError, ValueError) as exc:
        print(f"flowseq {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
