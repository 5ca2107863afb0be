"""Experiment orchestration: seeded end-to-end runs, sweeps, and emission.

A run is a pure function of (config, seed): dataset construction, optional
long-tailing of the train split, noise injection (train and, unless
disabled, validation; never test), epoch loop, checkpoint summary. Sweeps
fan runs out over an optional process pool; because every run owns its
random streams and rows are sorted before writing, output bytes do not
depend on the worker count.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, nn
from .data import LabeledDataset, load_flat, long_tail, make_blobs, stratified_split
from .errors import ConfigError, LnmError
from .metrics import (
    AccuracyCurve,
    CheckpointSummary,
    clean_ratio,
    coverage_ratio,
    per_class_accuracy,
    rank_methods,
    summarize_checkpoints,
)
from .methods import EpochReport, MethodConfig, init_state, run_epoch
from .methods.common import per_sample_ce
from .noise import (
    NoiseSpec,
    TransitionMatrix,
    apply_matrix,
    idn_generate,
    outcome_to_csv,
    symmetric_matrix,
)
from .rng import (
    ROLE_DATA,
    ROLE_LONGTAIL,
    ROLE_NOISE_TRAIN,
    ROLE_NOISE_VAL,
    ROLE_REF_MODEL,
    ROLE_SPLIT,
    Stream,
)

CSV_HEADER = ("run_id,seed,method,noise_kind,noise_rate,epoch,train_loss,"
              "val_acc,test_acc,clean_ratio,coverage_ratio,est_error")


@dataclass
class DatasetConfig:
    kind: str = "blobs"                  # blobs | flat
    path: str | None = None              # flat only
    k: int = 5
    n_per_class: int = 400
    d: int = 16
    spread: float = 1.0
    center_scale: float = 2.5
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    long_tail_ratio: float = 1.0         # 1 -> balanced; >1 tails the train split
    long_tail_by_count: bool = False

    def __post_init__(self):
        if self.kind not in ("blobs", "flat"):
            raise ConfigError(f"dataset kind must be blobs or flat, got {self.kind!r}")
        if self.kind == "flat" and not self.path:
            raise ConfigError("flat dataset needs a path")
        if self.long_tail_ratio < 1.0:
            raise ConfigError("long_tail_ratio must be >= 1")
        self.fractions = tuple(float(f) for f in self.fractions)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    method: MethodConfig = field(default_factory=lambda: MethodConfig(kind="ce"))
    epochs: int = 60
    batch_size: int = 128
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "results"
    last_window: int = 5
    clean_val: bool = False              # default: validation labels are noisy too
    diagnostics: bool = False

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if isinstance(self.noise, dict):
            self.noise = _noise_from_dict(self.noise)
        if isinstance(self.method, dict):
            self.method = _method_from_dict(self.method)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.epochs < self.last_window:
            raise ConfigError("epochs must cover the last-window summary")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = tuple(int(s) for s in self.seeds)
        # the method drivers read the batch size from their own params
        self.method.params["batch_size"] = self.batch_size

    def to_dict(self) -> dict:
        noise = {k: v for k, v in vars(self.noise).items()}
        if noise["matrix"] is not None:
            noise["matrix"] = [list(map(float, row)) for row in noise["matrix"].entries]
        else:
            del noise["matrix"]
        noise["ref_hidden"] = list(noise["ref_hidden"])
        ds = dict(vars(self.dataset))
        ds["fractions"] = list(ds["fractions"])
        if ds["path"] is None:
            del ds["path"]
        return {
            "dataset": ds,
            "noise": noise,
            "method": self.method.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "last_window": self.last_window,
            "clean_val": self.clean_val,
            "diagnostics": self.diagnostics,
        }

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.to_dict() == other.to_dict()


def _noise_from_dict(raw: dict) -> NoiseSpec:
    raw = dict(raw)
    matrix = raw.pop("matrix", None)
    allowed = set(NoiseSpec.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown noise fields: {sorted(unknown)}")
    if "ref_hidden" in raw:
        raw["ref_hidden"] = tuple(raw["ref_hidden"])
    spec = NoiseSpec(matrix=TransitionMatrix(np.asarray(matrix)) if matrix is not None else None,
                     **raw)
    return spec


def _method_from_dict(raw: dict) -> MethodConfig:
    raw = dict(raw)
    allowed = set(MethodConfig.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown method fields: {sorted(unknown)}")
    return MethodConfig(**raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return ExperimentConfig(**raw)


@dataclass
class ResultRow:
    run_id: str
    seed: int
    method: str
    noise_kind: str
    noise_rate: float
    epoch: int
    train_loss: float
    val_acc: float
    test_acc: float
    clean_ratio: float | None
    coverage_ratio: float | None
    est_error: float | None

    def csv_fields(self) -> list[str]:
        def num(x, fmt="{:.10g}"):
            return "" if x is None else fmt.format(x)
        return [self.run_id, str(self.seed), self.method, self.noise_kind,
                f"{self.noise_rate:g}", str(self.epoch), num(self.train_loss),
                num(self.val_acc), num(self.test_acc), num(self.clean_ratio),
                num(self.coverage_ratio), num(self.est_error)]


@dataclass
class RunRecord:
    run_id: str
    seed: int
    config: ExperimentConfig
    rows: list[ResultRow]
    curve: AccuracyCurve
    summary: CheckpointSummary
    reports: list[EpochReport]
    realized_rates: dict[str, float]
    noise_modes: dict
    train_clean_mask: np.ndarray | None
    final_per_class: np.ndarray
    final_train_losses: np.ndarray
    train_labels: np.ndarray
    train_flipped: np.ndarray | None


def run_id_for(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.method.kind}_{cfg.noise.kind}_{cfg.noise.rate:g}_s{seed}"


def build_dataset(cfg: ExperimentConfig, stream: Stream) -> LabeledDataset:
    dc = cfg.dataset
    if dc.kind == "flat":
        ds = load_flat(dc.path)
        if ds.split_indices("val").size == 0 or ds.split_indices("test").size == 0:
            ds = stratified_split(ds, dc.fractions, stream.child(ROLE_SPLIT).generator())
    else:
        ds = make_blobs(dc.k, dc.n_per_class, dc.d, dc.spread,
                        stream.child(ROLE_DATA).generator(), center_scale=dc.center_scale)
        ds = stratified_split(ds, dc.fractions, stream.child(ROLE_SPLIT).generator())
    if dc.long_tail_ratio > 1.0:
        ds = long_tail(ds, dc.long_tail_ratio, stream.child(ROLE_LONGTAIL).generator(),
                       by_count_desc=dc.long_tail_by_count, within_split="train")
    return ds


def _train_reference_model(ds: LabeledDataset, spec: NoiseSpec, stream: Stream):
    """Fit the clean reference classifier that drives instance-dependent flips.

    By default the reference set is a seeded fraction of the train split
    (clean labels), which keeps the test split out of the noise process; a
    fidelity flag reproduces the literal fit-on-test protocol instead.
    """
    rng = stream.child(ROLE_REF_MODEL).generator()
    if spec.ref_on_test:
        ref_idx = ds.split_indices("test")
        mode = "test_split"
    else:
        train_idx = ds.split_indices("train")
        take = max(ds.k, int(np.ceil(spec.ref_fraction * train_idx.size)))
        ref_idx = np.sort(rng.choice(train_idx, size=min(take, train_idx.size), replace=False))
        mode = "train_fraction"
    x = ds.features[ref_idx].astype(np.float64)
    y = ds.clean_labels[ref_idx]
    model = nn.init_mlp([ds.d, *spec.ref_hidden, ds.k],
                        stream.child(ROLE_REF_MODEL, 1).generator())
    opt = nn.init_optim(model, spec.ref_lr, momentum=0.9)
    for epoch in range(spec.ref_epochs):
        order = stream.child(ROLE_REF_MODEL, 2, epoch).generator().permutation(ref_idx.size)
        for start in range(0, ref_idx.size, spec.ref_batch):
            idx = order[start:start + spec.ref_batch]
            nn.sgd_step(model, nn.backward(model, x[idx], y[idx], "ce"), opt)
    return model, mode


def inject_noise(ds: LabeledDataset, spec: NoiseSpec, stream: Stream,
                 clean_val: bool = False):
    """Corrupt train (and optionally val) observed labels; test stays clean.

    Returns (noisy dataset, info dict with realized rates and per-split
    outcomes). With kind == "none" the observed channel passes through
    untouched, which is how converter-supplied real-world noise enters.
    """
    info: dict = {"kind": spec.kind, "rate": spec.rate, "outcomes": {}}
    if spec.kind == "none":
        return ds, info
    if ds.clean_labels is None:
        raise ConfigError("noise injection needs clean labels")
    observed = ds.clean_labels.copy()
    matrix = None
    ref_model = None
    if spec.kind == "symmetric":
        matrix = symmetric_matrix(spec.rate, ds.k)
    elif spec.kind == "class_conditional":
        matrix = spec.matrix
        if matrix.k != ds.k:
            raise ConfigError(f"matrix is {matrix.k}x{matrix.k}, dataset has k={ds.k}")
    else:
        ref_model, mode = _train_reference_model(ds, spec, stream)
        info["reference_mode"] = mode
        info["mean_match"] = spec.mean_match
    splits = ["train"] if clean_val else ["train", "val"]
    info["corrupted_splits"] = list(splits)
    for split, role in (("train", ROLE_NOISE_TRAIN), ("val", ROLE_NOISE_VAL)):
        if split not in splits:
            continue
        idx = ds.split_indices(split)
        rng = stream.child(role).generator()
        if matrix is not None:
            outcome = apply_matrix(ds.clean_labels[idx], matrix, rng)
        else:
            outcome = idn_generate(ds.subset(idx), ref_model, spec.rate, rng,
                                   flip_std=spec.flip_std, mean_match=spec.mean_match)
        observed[idx] = outcome.observed_labels
        info["outcomes"][split] = outcome
        info[f"realized_{split}"] = outcome.realized_rate
    if matrix is not None:
        info["true_transition"] = matrix.entries
    noisy = ds.with_observed(observed)
    test_idx = noisy.split_indices("test")
    assert np.array_equal(noisy.observed_labels[test_idx], noisy.clean_labels[test_idx]), \
        "test labels must stay clean"
    return noisy, info


def run_experiment(cfg: ExperimentConfig, seed: int) -> RunRecord:
    """One deterministic seeded run: data -> noise -> epochs -> summary."""
    stream = Stream(seed)
    ds = build_dataset(cfg, stream)
    ds, noise_info = inject_noise(ds, cfg.noise, stream, clean_val=cfg.clean_val)
    if ds.clean_labels is not None:
        test_idx = ds.split_indices("test")
        if not np.array_equal(ds.observed_labels[test_idx], ds.clean_labels[test_idx]):
            raise ConfigError("test split carries corrupted labels")
    true_transition = noise_info.get("true_transition")
    state = init_state(cfg.method, ds, stream)
    run_id = run_id_for(cfg, seed)
    train_idx = ds.split_indices("train")
    clean_mask = None
    flipped = None
    if ds.clean_labels is not None:
        clean_mask = ds.observed_labels[train_idx] == ds.clean_labels[train_idx]
        flipped = ~clean_mask
    rows: list[ResultRow] = []
    reports: list[EpochReport] = []
    for _ in range(cfg.epochs):
        report = run_epoch(state, ds, cfg.method, stream, true_transition=true_transition)
        reports.append(report)
        cr = cov = None
        if (report.selection is not None and clean_mask is not None
                and report.selection.selected.size):
            cr = clean_ratio(report.selection.selected, clean_mask)
            cov = coverage_ratio(report.selection.selected, clean_mask)
        # an empty selection (collapse) leaves both ratios absent, never zero
        rows.append(ResultRow(run_id, seed, cfg.method.kind, cfg.noise.kind,
                              cfg.noise.rate, report.epoch, report.train_loss,
                              report.val_acc, report.test_acc, cr, cov,
                              report.est_error))
    curve = AccuracyCurve([r.val_acc for r in reports], [r.test_acc for r in reports])
    summary = summarize_checkpoints(curve, cfg.last_window)
    x_train = ds.features[train_idx].astype(np.float64)
    y_train = ds.observed_labels[train_idx]
    final_losses = per_sample_ce(state.model_a, x_train, y_train)
    test_idx = ds.split_indices("test")
    test_pred = nn.predict(state.model_a, ds.features[test_idx].astype(np.float64))
    per_class = per_class_accuracy(test_pred, ds.observed_labels[test_idx], ds.k)
    realized = {k: v for k, v in noise_info.items() if k.startswith("realized_")}
    modes = {k: noise_info[k] for k in ("reference_mode", "mean_match", "corrupted_splits")
             if k in noise_info}
    return RunRecord(run_id, seed, cfg, rows, curve, summary, reports, realized,
                     modes, clean_mask, per_class, final_losses, y_train, flipped)


def write_rows_csv(rows: list[ResultRow], path) -> None:
    ordered = sorted(rows, key=lambda r: (r.method, r.noise_kind, r.noise_rate,
                                          r.seed, r.epoch))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER.split(","))
        for row in ordered:
            writer.writerow(row.csv_fields())


def write_manifest(cfg: ExperimentConfig, records: list[RunRecord], failures: list[dict],
                   path) -> None:
    manifest = {
        "code_version": __version__,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "runs": [
            {"run_id": r.run_id, "seed": r.seed,
             "summary": {"best": r.summary.best, "val_selected": r.summary.val_selected,
                         "last_window": r.summary.last_window,
                         "selected_epoch": r.summary.selected_epoch},
             "realized_rates": r.realized_rates,
             "noise_modes": {k: v for k, v in r.noise_modes.items()},
             "collapsed_epochs": [rep.epoch for rep in r.reports if rep.collapsed]}
            for r in sorted(records, key=lambda r: (r.run_id, r.seed))
        ],
        "failures": sorted(failures, key=lambda f: f["run_id"]),
        "deviations": {
            "flip_rate_mean_matched": True,
            "long_tail_applies_to_train_split": True,
            "feature_jitter_stands_in_for_augmentation": True,
        },
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_diagnostics(record: RunRecord, out_dir) -> None:
    """Companion feeds: selection history, per-class accuracy, final losses."""
    base = os.path.join(out_dir, "diagnostics", f"{record.run_id}")
    os.makedirs(base, exist_ok=True)
    with open(os.path.join(base, "selection.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "index", "role", "assigned_label"])
        for rep in record.reports:
            if rep.selection is None:
                continue
            for i in rep.selection.selected:
                writer.writerow([rep.epoch, int(i), "selected", ""])
            for i, lab in zip(rep.selection.purified, rep.selection.purified_labels):
                writer.writerow([rep.epoch, int(i), "purified", int(lab)])
    with open(os.path.join(base, "per_class.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "seed", "method", "noise_kind", "noise_rate",
                         "class", "accuracy"])
        for c, acc in enumerate(record.final_per_class):
            val = "" if np.isnan(acc) else f"{acc:.10g}"
            writer.writerow([record.run_id, record.seed, record.config.method.kind,
                             record.config.noise.kind,
                             f"{record.config.noise.rate:g}", c, val])
    with open(os.path.join(base, "losses.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "seed", "method", "index", "class", "flipped", "loss"])
        train_flipped = record.train_flipped
        for i, loss in enumerate(record.final_train_losses):
            flip = "" if train_flipped is None else int(train_flipped[i])
            writer.writerow([record.run_id, record.seed, record.config.method.kind, i,
                             int(record.train_labels[i]), flip, f"{loss:.10g}"])


def _run_cell(args):
    cfg_dict, seed = args
    cfg = config_from_dict(cfg_dict)
    return run_experiment(cfg, seed)


def max_workers() -> int:
    return max(1, int(os.environ.get("LNM_WORKERS", "1")))


@dataclass
class SweepResult:
    records: list[RunRecord]
    failures: list[dict]
    rows: list[ResultRow]
    scores: dict          # (method, (noise_kind, rate)) -> seed-averaged last-window
    rank_table: object | None


def sweep(base: ExperimentConfig, methods: list[MethodConfig],
          noises: list[NoiseSpec]) -> SweepResult:
    """Cartesian product methods x noise settings x seeds."""
    if not methods or not noises:
        raise ConfigError("sweep grid needs at least one method and one noise setting")
    cells = []
    for method in methods:
        for spec in noises:
            cfg_dict = base.to_dict()
            cfg_dict["method"] = method.to_dict()
            cfg = config_from_dict(cfg_dict)
            cfg.noise = spec
            cfg.method.noise_rate = spec.rate  # schedules assume the injected rate
            for seed in base.seeds:
                cells.append((cfg, seed))
    records, failures = [], []
    workers = max_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(pool.submit(_run_cell, (c.to_dict(), s)), c, s) for c, s in cells]
            for future, cfg, seed in futures:
                try:
                    records.append(future.result())
                except LnmError as exc:
                    failures.append({"run_id": run_id_for(cfg, seed), "seed": seed,
                                     "error": f"{type(exc).__name__}: {exc}"})
    else:
        for cfg, seed in cells:
            try:
                records.append(run_experiment(cfg, seed))
            except LnmError as exc:
                failures.append({"run_id": run_id_for(cfg, seed), "seed": seed,
                                 "error": f"{type(exc).__name__}: {exc}"})
    rows = [row for rec in records for row in rec.rows]
    scores: dict = {}
    by_cell: dict = {}
    for rec in records:
        key = (rec.config.method.kind, (rec.config.noise.kind, rec.config.noise.rate))
        by_cell.setdefault(key, []).append(rec.summary.last_window)
    for key, values in by_cell.items():
        scores[key] = float(np.mean(values))
    rank_table = None
    if not failures:
        try:
            rank_table = rank_methods(scores)
        except LnmError:
            rank_table = None
    return SweepResult(records, failures, rows, scores, rank_table)


def scores_from_rows(rows: list[ResultRow], window: int = 5) -> dict:
    """Seed-averaged last-window test accuracy per (method, setting), from raw rows."""
    runs: dict = {}
    for row in rows:
        runs.setdefault((row.run_id, row.seed), []).append(row)
    per_cell: dict = {}
    for (run_id, seed), run_rows in runs.items():
        run_rows = sorted(run_rows, key=lambda r: r.epoch)
        tail = run_rows[-window:]
        if len(tail) < window:
            raise ConfigError(f"run {run_id} has fewer epochs than the window")
        last = float(np.mean([r.test_acc for r in tail]))
        key = (run_rows[0].method, (run_rows[0].noise_kind, run_rows[0].noise_rate))
        per_cell.setdefault(key, []).append(last)
    return {key: float(np.mean(vals)) for key, vals in per_cell.items()}


def read_rows_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER.split(","):
            raise ConfigError(f"unexpected CSV header in {path}")
        for rec in reader:
            def opt(x):
                return None if x == "" else float(x)
            rows.append(ResultRow(rec[0], int(rec[1]), rec[2], rec[3], float(rec[4]),
                                  int(rec[5]), float(rec[6]), float(rec[7]), float(rec[8]),
                                  opt(rec[9]), opt(rec[10]), opt(rec[11])))
    return rows


def write_rank_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "pattern", "rate", "rank"])
        for (m, (pattern, rate)), rank in sorted(table.ranks.items()):
            writer.writerow([m, pattern, f"{rate:g}", f"{rank:g}"])
        writer.writerow([])
        writer.writerow(["method", "pattern", "mean_rank"])
        for pattern in sorted(table.pattern_mean):
            for m in table.methods:
                writer.writerow([m, pattern, f"{table.pattern_mean[pattern][m]:g}"])
        writer.writerow([])
        writer.writerow(["method", "overall_mean_rank"])
        for m in sorted(table.overall, key=lambda m: table.overall[m]):
            writer.writerow([m, f"{table.overall[m]:g}"])
