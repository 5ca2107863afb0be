"""Figure rendering from harness CSVs.

Five figure kinds: curves, per_class_bars, selection_ratios, loss_violin,
rank_chart. Inputs are classified by their header: the main results
schema plus the two auxiliary diagnostics schemas (per-class accuracy,
per-sample losses). Diagnostics files are auto-discovered next to a
results.csv under diagnostics/<run_id>/. Absent optional metrics are
omitted — figures are skipped with a notice rather than drawn as zero.
"""

from __future__ import annotations

import csv
import glob
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RESULTS_HEADER = ["run_id", "seed", "method", "noise_kind", "noise_rate", "epoch",
                  "train_loss", "val_acc", "test_acc", "clean_ratio",
                  "coverage_ratio", "est_error"]
PER_CLASS_HEADER = ["run_id", "seed", "method", "noise_kind", "noise_rate",
                    "class", "accuracy"]
LOSSES_HEADER = ["run_id", "seed", "method", "index", "class", "flipped", "loss"]

KINDS = ("curves", "per_class_bars", "selection_ratios", "loss_violin", "rank_chart")

FIGSIZE = (7.0, 4.5)
DPI = 110


class RenderError(Exception):
    pass


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [row for row in reader if row]
    return header, rows


def classify_inputs(paths):
    """Sort the given CSVs into results / per-class / losses tables."""
    tables = {"results": [], "per_class": [], "losses": []}
    seen = set()
    queue = list(paths)
    while queue:
        path = queue.pop(0)
        real = os.path.abspath(path)
        if real in seen:
            continue
        seen.add(real)
        header, rows = _read_csv(path)
        if header == RESULTS_HEADER:
            tables["results"].extend(dict(zip(header, r)) for r in rows)
            sidecar = os.path.join(os.path.dirname(real), "diagnostics", "*", "*.csv")
            queue.extend(sorted(glob.glob(sidecar)))
        elif header == PER_CLASS_HEADER:
            tables["per_class"].extend(dict(zip(header, r)) for r in rows)
        elif header == LOSSES_HEADER:
            tables["losses"].extend(dict(zip(header, r)) for r in rows)
        elif header and header[0] == "epoch":
            continue  # selection history; not consumed by any figure kind
        else:
            missing = set(RESULTS_HEADER) - set(header or [])
            raise RenderError(f"{path}: unrecognized schema; missing columns "
                              f"{sorted(missing)[:4]}...")
    return tables


def _setting(row):
    return row["noise_kind"], row["noise_rate"]


def _slug(setting):
    kind, rate = setting
    return f"{kind}_{rate.replace('.', 'p')}"


def _save(fig, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=DPI, metadata={"Software": "lnm-companion"})
    plt.close(fig)
    return path


def _mean_curves(rows, field):
    """method -> (epochs, mean value over seeds); skips empty fields."""
    acc = defaultdict(lambda: defaultdict(list))
    for row in rows:
        if row[field] == "":
            continue
        acc[row["method"]][int(row["epoch"])].append(float(row[field]))
    out = {}
    for method, per_epoch in acc.items():
        epochs = sorted(per_epoch)
        out[method] = (epochs, [float(np.mean(per_epoch[e])) for e in epochs])
    return out


def render_curves(tables, out_dir):
    rows = tables["results"]
    if not rows:
        raise RenderError("curves need a results CSV")
    written = []
    for setting in sorted({_setting(r) for r in rows}):
        sub = [r for r in rows if _setting(r) == setting]
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for method, (epochs, test) in sorted(_mean_curves(sub, "test_acc").items()):
            ax.plot(epochs, test, label=method)
        for method, (epochs, val) in sorted(_mean_curves(sub, "val_acc").items()):
            ax.plot(epochs, val, linestyle="--", alpha=0.35)
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy (solid test, dashed val)")
        ax.set_title(f"accuracy curves, {setting[0]} @ {setting[1]}")
        ax.legend(fontsize=8)
        written.append(_save(fig, out_dir, f"curves_{_slug(setting)}.png"))
    return written


def render_selection_ratios(tables, out_dir):
    rows = tables["results"]
    if not rows:
        raise RenderError("selection_ratios need a results CSV")
    written = []
    for setting in sorted({_setting(r) for r in rows}):
        sub = [r for r in rows if _setting(r) == setting]
        clean = _mean_curves(sub, "clean_ratio")
        cover = _mean_curves(sub, "coverage_ratio")
        if not clean and not cover:
            print(f"notice: no selection metrics for {setting}; figure skipped")
            continue
        fig, axes = plt.subplots(1, 2, figsize=(9.5, 4.0), sharex=True)
        for ax, series, title in ((axes[0], clean, "clean ratio"),
                                  (axes[1], cover, "coverage ratio")):
            for method, (epochs, values) in sorted(series.items()):
                ax.plot(epochs, values, label=method)
            ax.set_title(title)
            ax.set_xlabel("epoch")
            ax.set_ylim(-0.02, 1.02)
        axes[0].legend(fontsize=8)
        fig.suptitle(f"selection quality, {setting[0]} @ {setting[1]}")
        written.append(_save(fig, out_dir, f"selection_ratios_{_slug(setting)}.png"))
    return written


def render_per_class_bars(tables, out_dir):
    rows = tables["per_class"]
    if not rows:
        print("notice: no per-class accuracy diagnostics found; figure skipped")
        return []
    written = []
    for setting in sorted({_setting(r) for r in rows}):
        sub = [r for r in rows if _setting(r) == setting]
        acc = defaultdict(lambda: defaultdict(list))
        for row in sub:
            if row["accuracy"] == "":
                continue  # class absent from the test split
            acc[row["method"]][int(row["class"])].append(float(row["accuracy"]))
        methods = sorted(acc)
        classes = sorted({c for m in acc.values() for c in m})
        fig, ax = plt.subplots(figsize=FIGSIZE)
        width = 0.8 / max(len(methods), 1)
        for i, method in enumerate(methods):
            xs = [c + i * width for c in classes if c in acc[method]]
            ys = [float(np.mean(acc[method][c])) for c in classes if c in acc[method]]
            ax.bar(xs, ys, width=width, label=method)
        ax.set_xticks([c + 0.4 - width / 2 for c in classes])
        ax.set_xticklabels([str(c) for c in classes])
        ax.set_xlabel("class")
        ax.set_ylabel("test accuracy")
        ax.set_title(f"per-class accuracy, {setting[0]} @ {setting[1]}")
        ax.legend(fontsize=8)
        written.append(_save(fig, out_dir, f"per_class_bars_{_slug(setting)}.png"))
    return written


def render_loss_violin(tables, out_dir):
    rows = tables["losses"]
    if not rows:
        print("notice: no per-sample loss diagnostics found; figure skipped")
        return []
    written = []
    for run_id in sorted({r["run_id"] for r in rows}):
        sub = [r for r in rows if r["run_id"] == run_id]
        if any(r["flipped"] == "" for r in sub):
            print(f"notice: {run_id} lacks clean/noisy flags; violin skipped")
            continue
        clean_by_class = defaultdict(list)
        noisy = []
        for row in sub:
            loss = float(row["loss"])
            if row["flipped"] == "1":
                noisy.append(loss)
            else:
                clean_by_class[int(row["class"])].append(loss)
        classes = sorted(clean_by_class)
        data = [clean_by_class[c] for c in classes]
        labels = [f"class {c}" for c in classes]
        if noisy:
            data.append(noisy)
            labels.append("noisy")
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.violinplot(data, showmedians=True)
        ax.set_xticks(range(1, len(labels) + 1))
        ax.set_xticklabels(labels, rotation=30, fontsize=8)
        ax.set_ylabel("train loss")
        ax.set_title(f"clean losses per class vs noisy, {run_id}")
        written.append(_save(fig, out_dir, f"loss_violin_{run_id}.png"))
    return written


def _average_tie_ranks(scores):
    methods = sorted(scores)
    values = [scores[m] for m in methods]
    ranks = {}
    for m, s in zip(methods, values):
        better = sum(1 for v in values if v > s)
        equal = sum(1 for v in values if v == s)
        ranks[m] = better + (1 + equal) / 2.0
    return ranks


def rank_from_results(rows, window: int = 5):
    """Seed-averaged last-window accuracy -> average-tie ranks -> overall."""
    runs = defaultdict(list)
    for row in rows:
        runs[(row["run_id"], row["seed"])].append(row)
    cell_scores = defaultdict(list)
    for run_rows in runs.values():
        run_rows = sorted(run_rows, key=lambda r: int(r["epoch"]))
        tail = run_rows[-window:]
        if len(tail) < window:
            raise RenderError(f"run {run_rows[0]['run_id']} shorter than the rank window")
        last = float(np.mean([float(r["test_acc"]) for r in tail]))
        cell_scores[(run_rows[0]["method"], _setting(run_rows[0]))].append(last)
    scores = {key: float(np.mean(v)) for key, v in cell_scores.items()}
    methods = sorted({m for m, _ in scores})
    settings = sorted({s for _, s in scores})
    for m in methods:
        for s in settings:
            if (m, s) not in scores:
                raise RenderError(f"incomplete results: no score for {m} in {s}")
    ranks = {}
    for s in settings:
        setting_ranks = _average_tie_ranks({m: scores[(m, s)] for m in methods})
        for m, r in setting_ranks.items():
            ranks[(m, s)] = r
    patterns = sorted({s[0] for s in settings})
    pattern_mean = {p: {m: float(np.mean([ranks[(m, s)] for s in settings if s[0] == p]))
                        for m in methods} for p in patterns}
    overall = {m: float(np.mean([pattern_mean[p][m] for p in patterns])) for m in methods}
    return overall, pattern_mean


def render_rank_chart(tables, out_dir, window: int = 5):
    rows = tables["results"]
    if not rows:
        raise RenderError("rank_chart needs a results CSV")
    overall, pattern_mean = rank_from_results(rows, window)
    order = sorted(overall, key=lambda m: overall[m])
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.barh(range(len(order)), [overall[m] for m in order])
    ax.set_yticks(range(len(order)))
    ax.set_yticklabels(order, fontsize=9)
    ax.invert_yaxis()  # best (lowest mean rank) on top
    ax.set_xlabel("overall mean rank (lower is better)")
    ax.set_title("method ranking")
    return [_save(fig, out_dir, "rank_chart.png")]


def render(csv_paths, kind: str, out_dir: str, window: int = 5):
    """Render one figure kind from the given CSVs; returns written paths."""
    if kind not in KINDS:
        raise RenderError(f"unknown figure kind {kind!r}; expected one of {KINDS}")
    tables = classify_inputs(csv_paths)
    if kind == "curves":
        return render_curves(tables, out_dir)
    if kind == "per_class_bars":
        return render_per_class_bars(tables, out_dir)
    if kind == "selection_ratios":
        return render_selection_ratios(tables, out_dir)
    if kind == "loss_violin":
        return render_loss_violin(tables, out_dir)
    return render_rank_chart(tables, out_dir, window)
