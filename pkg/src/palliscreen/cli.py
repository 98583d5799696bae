"""Command-line pipeline: synth -> cohort -> featurize -> train -> eval -> explain.

Every stage reads its inputs from, and writes its artifacts to, one output
directory (per-stage flags override individual input paths) and leaves a
``<stage>.manifest.json`` with input/output checksums, the effective
configuration and the seed.

Configuration files hold ``key = value`` lines with dotted section
prefixes (``train.batch_size = 128``); ``#`` starts a comment. Run
``palliscreen config`` to print every key with its default.

Log verbosity comes from the ``PALLISCREEN_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cohort as co
from . import event_log as ev
from . import evaluation as evl
from . import explain as ex
from . import features as ft
from . import model as md

log = logging.getLogger("palliscreen")


class PipelineError(Exception):
    """Failure with a machine-readable category and its exit code."""

    codes = {"config": 2, "io": 3, "data": 4, "stage-order": 5, "mismatch": 6,
             "unknown-patient": 7, "divergence": 8}

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category

    @property
    def exit_code(self) -> int:
        return self.codes[self.category]


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "out"
    # synth
    n_patients: int = 20_000
    target_prevalence: float = 0.07
    n_diagnosis_codes: int = 300
    n_procedure_codes: int = 200
    n_medication_codes: int = 150
    history_span: int = 5 * 365
    snapshot_date: str = "2015-01-01"
    # cohort
    lead_min: int = 90
    lead_max: int = 365
    history_min: int = 365
    followup_min: int = 365
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # features
    min_patient_count: int = 100
    # model / training
    hidden_dims: tuple[int, ...] = md.DESK_HIDDEN_DIMS
    activation: str = "selu"
    batch_size: int = 128
    snapshot_every: int = 250
    max_iterations: int = 2000
    lr: float = 1e-3
    # eval / explain
    n_bins: int = 10
    precision_target: float = 0.9
    top_k: int = 1
    descriptions: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    def synth_config(self) -> ev.SynthConfig:
        return ev.SynthConfig(self.n_patients, self.target_prevalence, self.n_diagnosis_codes,
                              self.n_procedure_codes, self.n_medication_codes, self.history_span,
                              self.seed, ev.parse_date(self.snapshot_date))

    def cohort_config(self) -> co.CohortConfig:
        return co.CohortConfig(self.lead_min, self.lead_max, self.history_min, self.followup_min,
                               tuple(self.split_ratios), self.seed)

    def model_config(self, input_dim: int) -> md.ModelConfig:
        return md.ModelConfig(input_dim, tuple(self.hidden_dims), self.activation, self.seed)

    def train_config(self) -> md.TrainConfig:
        return md.TrainConfig(self.batch_size, self.snapshot_every, self.max_iterations, self.lr,
                              self.seed + 1)

    def echo(self, keys) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(d[k]) if isinstance(d[k], tuple) else d[k] for k in keys}


# dotted config key -> PipelineConfig attribute
CONFIG_KEYS = {
    "seed": "seed",
    "paths.out_dir": "out_dir",
    "synth.n_patients": "n_patients",
    "synth.target_prevalence": "target_prevalence",
    "synth.n_diagnosis_codes": "n_diagnosis_codes",
    "synth.n_procedure_codes": "n_procedure_codes",
    "synth.n_medication_codes": "n_medication_codes",
    "synth.history_span": "history_span",
    "synth.snapshot_date": "snapshot_date",
    "cohort.lead_min": "lead_min",
    "cohort.lead_max": "lead_max",
    "cohort.history_min": "history_min",
    "cohort.followup_min": "followup_min",
    "cohort.split_ratios": "split_ratios",
    "features.min_patient_count": "min_patient_count",
    "model.hidden_dims": "hidden_dims",
    "model.activation": "activation",
    "train.batch_size": "batch_size",
    "train.snapshot_every": "snapshot_every",
    "train.max_iterations": "max_iterations",
    "train.lr": "lr",
    "eval.n_bins": "n_bins",
    "eval.precision_target": "precision_target",
    "explain.top_k": "top_k",
    "explain.descriptions": "descriptions",
}

STAGE_KEYS = {
    "synth": ["seed", "n_patients", "target_prevalence", "n_diagnosis_codes", "n_procedure_codes",
              "n_medication_codes", "history_span", "snapshot_date"],
    "cohort": ["seed", "lead_min", "lead_max", "history_min", "followup_min", "split_ratios"],
    "featurize": ["min_patient_count"],
    "train": ["seed", "hidden_dims", "activation", "batch_size", "snapshot_every",
              "max_iterations", "lr"],
    "eval": ["n_bins", "precision_target"],
    "explain": ["top_k", "descriptions"],
}


def _coerce(attr: str, text: str):
    default = getattr(PipelineConfig, attr, None)
    if default is None:  # tuple defaults live on the dataclass fields
        default = PipelineConfig.__dataclass_fields__[attr].default
    if attr == "split_ratios":
        return tuple(float(x) for x in text.split(","))
    if attr == "hidden_dims":
        return tuple(int(x) for x in text.split(","))
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def load_config(path: str | None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is None:
        return cfg
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise PipelineError("io", f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in CONFIG_KEYS:
            raise PipelineError("config", f"{path}:{lineno}: unknown or malformed entry {line!r}")
        try:
            setattr(cfg, CONFIG_KEYS[key], _coerce(CONFIG_KEYS[key], value))
        except ValueError:
            raise PipelineError("config", f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    out = []
    for key, attr in CONFIG_KEYS.items():
        v = getattr(cfg, attr)
        if isinstance(v, tuple):
            v = ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
        out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, stage: str, cfg: PipelineConfig, inputs: dict, outputs: list) -> None:
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.echo(STAGE_KEYS[stage]),
        "inputs": {name: {"file": Path(p).name, "sha256": sha256_file(p)}
                   for name, p in sorted(inputs.items())},
        "outputs": {Path(p).name: sha256_file(p) for p in sorted(outputs, key=str)},
    }
    (out / f"{stage}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise PipelineError("stage-order", f"missing {path}; run '{produced_by}' first")
    return path


class Paths:
    def __init__(self, args, cfg: PipelineConfig):
        self.out = Path(args.out or cfg.out_dir)
        o = self.out
        self.patients = Path(getattr(args, "patients", None) or o / "patients.tsv")
        self.events = Path(getattr(args, "events", None) or o / "events.tsv")
        self.cohort = Path(getattr(args, "cohort", None) or o / "cohort.tsv")
        self.vocab = Path(getattr(args, "vocab", None) or o / "vocab.tsv")
        self.features = Path(getattr(args, "features", None) or o / "features.tsv")
        self.model = Path(getattr(args, "model", None) or o / "model.ckpt")


def _load_snapshot(paths: Paths) -> ev.Snapshot:
    _require(paths.patients, "synth")
    _require(paths.events, "synth")
    try:
        return ev.load_snapshot(paths.patients, paths.events)
    except ev.SnapshotError as exc:
        raise PipelineError("data", str(exc)) from None


def _load_cohort(paths: Paths, reveal_test_labels=False):
    _require(paths.cohort, "cohort")
    try:
        return co.read_cohort(paths.cohort, reveal_test_labels)
    except (ev.SnapshotError, ValueError) as exc:
        raise PipelineError("data", str(exc)) from None


def _load_vocab(paths: Paths) -> ft.FeatureVocabulary:
    _require(paths.vocab, "featurize")
    try:
        return ft.FeatureVocabulary.load(paths.vocab)
    except ValueError as exc:
        raise PipelineError("data", str(exc)) from None


def _load_matrix(paths: Paths, n_rows: int, dim: int):
    _require(paths.features, "featurize")
    try:
        X = ft.read_matrix(paths.features)
    except ValueError as exc:
        raise PipelineError("data", str(exc)) from None
    if X.shape != (n_rows, dim):
        raise PipelineError("mismatch", f"feature matrix {X.shape} does not match cohort rows "
                                        f"{n_rows} x vocabulary {dim}")
    return X


def _load_model(paths: Paths, vocab: ft.FeatureVocabulary) -> md.MLPParams:
    _require(paths.model, "train")
    try:
        params, checksum = md.load_checkpoint(paths.model)
    except ValueError as exc:
        raise PipelineError("data", str(exc)) from None
    if checksum != vocab.checksum() or params.input_dim != len(vocab):
        raise PipelineError("mismatch", f"checkpoint {paths.model} was trained against a "
                                        f"different vocabulary than {paths.vocab}")
    return params


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig, paths: Paths) -> float:
    try:
        sc = cfg.synth_config()
        sc.validate()
    except ValueError as exc:
        raise PipelineError("config", str(exc)) from None
    snap = ev.generate_synthetic(sc)
    paths.patients.parent.mkdir(parents=True, exist_ok=True)
    paths.events.parent.mkdir(parents=True, exist_ok=True)
    paths.out.mkdir(parents=True, exist_ok=True)
    ev.write_snapshot(snap, paths.patients, paths.events)
    prevalence = ev.death_prevalence(snap)
    print(f"patients={len(snap)} events={snap.n_events()} prevalence={prevalence:.4f}")
    write_manifest(paths.out, "synth", cfg, {}, [paths.patients, paths.events])
    return prevalence


def cmd_cohort(cfg: PipelineConfig, paths: Paths):
    try:
        cc = cfg.cohort_config()
    except ValueError as exc:
        raise PipelineError("config", str(exc)) from None
    snap = _load_snapshot(paths)
    points, stats = co.build_cohort(snap, cc)
    points = co.split_cohort(points, cc.split_ratios, cc.seed)
    paths.out.mkdir(parents=True, exist_ok=True)
    co.write_cohort(points, paths.cohort)
    stats_path = paths.out / "cohort_stats.txt"
    stats_path.write_text(stats.format(), encoding="utf-8")
    km = co.km_censor_curve(points, snap)
    km_paths = []
    for label, curve in km.items():
        p = paths.out / f"km_{label}.tsv"
        co.write_km(curve, p)
        km_paths.append(p)
    split_lines = []
    for s in co.SPLITS:
        sel = [p for p in points if p.split == s]
        split_lines.append(f"{s}\t{sum(p.y for p in sel)}\t{len(sel)}")
    split_path = paths.out / "split_stats.txt"
    split_path.write_text("split\tdeceased\ttotal\n" + "\n".join(split_lines) + "\n", encoding="utf-8")
    print(stats.format(), end="")
    write_manifest(paths.out, "cohort", cfg, {"patients": paths.patients, "events": paths.events},
                   [paths.cohort, stats_path, split_path] + km_paths)
    return points, stats


def cmd_featurize(cfg: PipelineConfig, paths: Paths):
    snap = _load_snapshot(paths)
    points = _load_cohort(paths)
    missing = [p.patient_id for p in points if p.patient_id not in snap.patients]
    if missing:
        raise PipelineError("mismatch", f"cohort references unknown patient {missing[0]}")
    censored = [(co.censor(snap.patients[p.patient_id], p.prediction_date), p.prediction_date)
                for p in points]
    train_rows = [c for c, p in zip(censored, points) if p.split == "train"]
    try:
        vocab = ft.build_vocabulary(train_rows, cfg.min_patient_count)
    except ValueError as exc:
        raise PipelineError("data", str(exc)) from None
    X = ft.stack([ft.featurize(pat, d, vocab) for pat, d in censored], len(vocab))
    vocab.save(paths.vocab)
    ft.write_matrix(X, paths.features)
    nnz = np.diff(X.indptr)
    print(f"features={len(vocab)} rows={X.shape[0]} nnz_mean={nnz.mean():.1f} "
          f"nnz_std={nnz.std():.1f} nnz_max={nnz.max() if nnz.size else 0}")
    write_manifest(paths.out, "featurize", cfg,
                   {"patients": paths.patients, "events": paths.events, "cohort": paths.cohort},
                   [paths.vocab, paths.features])
    return vocab, X


def cmd_train(cfg: PipelineConfig, paths: Paths):
    points = _load_cohort(paths)  # test labels stay hidden
    vocab = _load_vocab(paths)
    X = _load_matrix(paths, len(points), len(vocab))
    split = np.array([p.split for p in points])
    y = np.array([p.y if p.label is not None else -1 for p in points])
    tr, va = split == "train", split == "validation"
    if not tr.any() or not va.any():
        raise PipelineError("data", "cohort needs non-empty train and validation splits")
    if len(set(y[va])) < 2:
        raise PipelineError("data", "validation split needs both classes")
    try:
        result = md.train(X[tr], y[tr], X[va], y[va], cfg.model_config(len(vocab)),
                          cfg.train_config())
    except md.NonFiniteError as exc:
        raise PipelineError("divergence", str(exc)) from None
    except ValueError as exc:
        raise PipelineError("config", str(exc)) from None
    md.save_checkpoint(result.params, paths.model, vocab.checksum())
    log_path = paths.out / "train_log.tsv"
    md.write_train_log(result.log, log_path)
    best = max(r[2] for r in result.log)
    print(f"best_iteration={result.best_iteration} val_ap={best:.4f}")
    write_manifest(paths.out, "train", cfg,
                   {"cohort": paths.cohort, "vocab": paths.vocab, "features": paths.features},
                   [paths.model, log_path])
    return result


def cmd_eval(cfg: PipelineConfig, paths: Paths) -> evl.EvaluationReport:
    points = _load_cohort(paths, reveal_test_labels=True)
    vocab = _load_vocab(paths)
    params = _load_model(paths, vocab)
    X = _load_matrix(paths, len(points), len(vocab))
    test = np.array([p.split == "test" for p in points])
    if not test.any():
        raise PipelineError("data", "cohort has no test split")
    scores = md.forward(params, X[test])
    test_points = [p for p in points if p.split == "test"]
    examples = [evl.ScoredExample(float(s), p.y, p.admitted) for s, p in zip(scores, test_points)]
    try:
        report = evl.evaluate_all(examples, cfg.precision_target, cfg.n_bins)
    except ValueError as exc:
        raise PipelineError("data", str(exc)) from None
    outputs = [paths.out / "report.txt", paths.out / "predictions.tsv"]
    outputs[0].write_text(report.format(), encoding="utf-8")
    with open(outputs[1], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patient_id\tscore\tlabel\tadmitted\n")
        for e, p in zip(examples, test_points):
            fh.write(f"{p.patient_id}\t{e.score:.10f}\t{e.label}\t{int(e.admitted)}\n")
    for group, rep in report.groups.items():
        for kind, curve in sorted(rep.curves.items()):
            path = paths.out / f"{group}_{kind}.tsv"
            evl.write_curve(curve, path)
            outputs.append(path)
    print(report.format(), end="")
    write_manifest(paths.out, "eval", cfg,
                   {"cohort": paths.cohort, "vocab": paths.vocab, "features": paths.features,
                    "model": paths.model}, outputs)
    return report


def cmd_explain(cfg: PipelineConfig, paths: Paths, patient_ids=None):
    """Explain the requested patients, or the ``top_k`` highest-scoring test patients."""
    snap = _load_snapshot(paths)
    points = _load_cohort(paths)
    vocab = _load_vocab(paths)
    params = _load_model(paths, vocab)
    by_id = {p.patient_id: p for p in points}
    if patient_ids:
        for pid in patient_ids:
            if pid not in by_id:
                raise PipelineError("unknown-patient", f"patient {pid} is not in the cohort")
        chosen = [by_id[pid] for pid in patient_ids]
    else:
        X = _load_matrix(paths, len(points), len(vocab))
        test_idx = [i for i, p in enumerate(points) if p.split == "test"]
        if not test_idx:
            raise PipelineError("data", "cohort has no test split")
        scores = md.forward(params, X[test_idx])
        order = sorted(range(len(test_idx)), key=lambda i: (-scores[i], points[test_idx[i]].patient_id))
        chosen = [points[test_idx[i]] for i in order[:cfg.top_k]]
    descriptions = {}
    if cfg.descriptions:
        try:
            descriptions = ex.load_descriptions(cfg.descriptions)
        except OSError as exc:
            raise PipelineError("io", f"cannot read {cfg.descriptions}: {exc.strerror}") from None
        except ValueError as exc:
            raise PipelineError("data", str(exc)) from None
    out_dir = paths.out / "explanations"
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, outputs = [], []
    for p in chosen:
        patient = co.censor(snap.patients[p.patient_id], p.prediction_date)
        rep = ex.explain(params, vocab, patient, p.prediction_date)
        path = out_dir / f"{p.patient_id}.txt"
        path.write_text(rep.format(descriptions), encoding="utf-8")
        outputs.append(path)
        reports.append(rep)
        print(f"{p.patient_id}\t{rep.probability:.4f}\t{path}")
    inputs = {"patients": paths.patients, "events": paths.events, "cohort": paths.cohort,
              "vocab": paths.vocab, "model": paths.model}
    write_manifest(paths.out, "explain", cfg, inputs, outputs)
    return reports


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="palliscreen", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default: paths.out_dir)")
    common.add_argument("--patients", help="patients TSV (default: OUT/patients.tsv)")
    common.add_argument("--events", help="events TSV (default: OUT/events.tsv)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("config", parents=[common], help="print the effective configuration")
    sub.add_parser("synth", parents=[common], help="generate a synthetic event log")
    sub.add_parser("cohort", parents=[common], help="select prediction points and split them")
    for name, hlp in [("featurize", "build the vocabulary and feature matrix"),
                      ("train", "train the classifier"),
                      ("eval", "evaluate on the test split"),
                      ("explain", "write per-patient explanations"),
                      ("run", "run every stage in order")]:
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--cohort", help="cohort TSV (default: OUT/cohort.tsv)")
        p.add_argument("--vocab", help="vocabulary file (default: OUT/vocab.tsv)")
        p.add_argument("--features", help="feature matrix (default: OUT/features.tsv)")
        p.add_argument("--model", help="checkpoint (default: OUT/model.ckpt)")
        if name in ("explain", "run"):
            p.add_argument("--patient", action="append", help="patient id to explain (repeatable)")
            p.add_argument("--top-k", type=int, help="explain the K highest-scoring test patients")
            p.add_argument("--descriptions", help="code<TAB>description file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PALLISCREEN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "top_k", None) is not None:
            cfg.top_k = args.top_k
        if getattr(args, "descriptions", None):
            cfg.descriptions = args.descriptions
        paths = Paths(args, cfg)
        patient_ids = getattr(args, "patient", None)
        if args.command == "config":
            print(format_config(cfg), end="")
        elif args.command == "run":
            t0 = time.perf_counter()
            for stage in (cmd_synth, cmd_cohort, cmd_featurize, cmd_train, cmd_eval):
                log.info("stage %s", stage.__name__)
                stage(cfg, paths)
            cmd_explain(cfg, paths, patient_ids)
            print(f"pipeline_seconds={time.perf_counter() - t0:.1f}")
        elif args.command == "explain":
            cmd_explain(cfg, paths, patient_ids)
        else:
            globals()[f"cmd_{args.command}"](cfg, paths)
    except PipelineError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return PipelineError.codes["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
