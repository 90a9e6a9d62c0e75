from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from action_log import log_action
from face_dataset_workflow import tensor_to_image
from reenactor_errors import DataError

LOSS_COLUMNS = ["total", "reenact", "app_recons", "reconstruct", "perceptual", "gan_g", "gan_d", "id"]
METRIC_LABELS = {"au_consistency": "AU %", "pose_mae_degrees": "Pose MAE (deg)", "id_accuracy": "Id %"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    log_action(f"Saved plot {path}")
    return path


def plot_loss_curves(metrics, path, smooth=10):
    """One panel per loss term, raw values plus a rolling mean"""
    if metrics.empty:
        raise DataError("Metrics file has no rows to plot")
    columns = [c for c in LOSS_COLUMNS if c in metrics.columns]
    long = metrics.melt(id_vars=["step", "phase"], value_vars=columns, var_name="term", value_name="value")
    long["smoothed"] = long.groupby("term")["value"].transform(lambda s: s.rolling(smooth, min_periods=1).mean())

    n_cols = 4
    n_rows = int(np.ceil(len(columns) / n_cols))
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(4 * n_cols, 3 * n_rows), squeeze=False)
    for ax, term in zip(axes.flat, columns):
        data = long[long["term"] == term]
        sns.lineplot(data=data, x="step", y="value", ax=ax, alpha=0.3, color="steelblue")
        sns.lineplot(data=data, x="step", y="smoothed", hue="phase", ax=ax, legend="brief" if term == columns[0] else False)
        ax.set_title(term)
        ax.set_ylabel("")
    for ax in list(axes.flat)[len(columns):]:
        ax.set_visible(False)
    return _save(fig, path)


def plot_report_heatmap(report, path):
    """Variant x group heatmap for each metric of a report table"""
    if report.empty:
        raise DataError("Report has no rows to plot")
    metrics = [m for m in METRIC_LABELS if m in report.columns]
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 0.6 * report["variant"].nunique() + 2), squeeze=False)
    for ax, metric in zip(axes.flat, metrics):
        table = report.pivot(index="variant", columns="group", values=metric).reindex(report["variant"].unique())
        cmap = "rocket" if metric == "pose_mae_degrees" else "rocket_r"
        sns.heatmap(table.astype(float), annot=True, fmt=".2f", cmap=cmap, cbar=False, ax=ax)
        ax.set_title(METRIC_LABELS[metric])
    return _save(fig, path)


def plot_table2(report, path):
    """Median Id% per variant as bars, each seed as a point"""
    present = report.dropna(subset=["id_accuracy"])
    if present.empty:
        raise DataError("Seed report has no present runs to plot")
    order = list(report["variant"].unique())
    fig, ax = plt.subplots(figsize=(1.5 * len(order) + 3, 4))
    sns.barplot(data=present, x="variant", y="id_accuracy", order=order, estimator=np.median,
                errorbar=None, color="lightsteelblue", ax=ax)
    sns.stripplot(data=present, x="variant", y="id_accuracy", order=order, color="black", size=6, ax=ax)
    ax.set_ylabel(METRIC_LABELS["id_accuracy"])
    ax.set_ylim(0, 100)
    return _save(fig, path)


def plot_reenactment_grid(references, guides, outputs, path):
    """References as columns, guides as rows; outputs[g][r] fills the cells"""
    n_refs, n_guides = len(references), len(guides)
    fig, axes = plt.subplots(n_guides + 1, n_refs + 1, figsize=(1.6 * (n_refs + 1), 1.6 * (n_guides + 1)), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for r, ref in enumerate(references):
        axes[0, r + 1].imshow(_as_image(ref))
    for g, guide in enumerate(guides):
        axes[g + 1, 0].imshow(_as_image(guide))
        for r in range(n_refs):
            axes[g + 1, r + 1].imshow(_as_image(outputs[g][r]))
    axes[0, 0].text(0.5, 0.5, "guide \\ ref", ha="center", va="center", fontsize=8)
    return _save(fig, path)


def _as_image(item):
    """Tensor in [-1, 1], CHW uint8 raster or HWC uint8 array -> HWC uint8"""
    if hasattr(item, "detach"):
        return tensor_to_image(item)
    array = np.asarray(item)
    if array.ndim == 3 and array.shape[0] == 3 and array.shape[2] != 3:
        array = array.transpose(1, 2, 0)
    return array


def plot_from_run(run_dir, out_dir=None):
    """Loss curves from metrics.csv and heatmaps for every report CSV in a run directory"""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        written.append(plot_loss_curves(pd.read_csv(metrics_path), out_dir / "loss_curves.png"))
    for report_path in sorted(run_dir.glob("report_*.csv")):
        report = pd.read_csv(report_path)
        plot = plot_table2 if "run" in report.columns else plot_report_heatmap
        written.append(plot(report, out_dir / f"{report_path.stem}.png"))
    if not written:
        raise DataError(f"Nothing to plot in {run_dir}: no metrics.csv or report_*.csv")
    return written
