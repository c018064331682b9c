"""Run reports: figures rendered next to the delimited outputs, plus
comparison-table formatting."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def relative_macs_percent(macs, reference_macs):
    """MAC cost as a percentage of a named reference model, e.g. 254.2 of
    1160.8 formats as '21.9%'."""
    if reference_macs <= 0:
        raise ValueError("reference MACs must be positive")
    return f"{macs / reference_macs * 100.0:.1f}%"


def format_table_row(approach, accuracy, macs, reference_macs=None):
    """One comparison row: approach, accuracy, MACs, and relative MACs."""
    rel = relative_macs_percent(macs, reference_macs) if reference_macs else "-"
    return f"{approach:<24} acc={accuracy:.4f}  macs={macs:.1f}  rel={rel}"


def render_sweep_figure(report, path):
    """Accuracy as a function of average MACs across the threshold grid."""
    fig, (ax_curve, ax_hist) = plt.subplots(1, 2, figsize=(9, 3.5))
    macs = [row.avg_macs for row in report.rows]
    acc = [row.accuracy for row in report.rows]
    ax_curve.plot(macs, acc, marker="o", markersize=3, linewidth=1)
    ax_curve.set_xlabel("average MACs per example")
    ax_curve.set_ylabel("test accuracy")
    ax_curve.set_title("accuracy vs. cost")
    ax_curve.grid(True, alpha=0.3)

    thetas = [row.theta for row in report.rows]
    mean_exit = [row.mean_exit_index for row in report.rows]
    ax_hist.plot(thetas, mean_exit, linewidth=1)
    ax_hist.set_xlabel("entropy threshold (nats)")
    ax_hist.set_ylabel("mean exit index")
    ax_hist.set_title("exit depth vs. threshold")
    ax_hist.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_figure(log, path):
    """Training loss and per-exit validation accuracy over epochs."""
    epochs = [r["epoch"] for r in log.records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["train_loss"] for r in log.records], linewidth=1)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.grid(True, alpha=0.3)

    if log.records:
        n_exits = len(log.records[0]["val_acc_per_exit"])
        for i in range(n_exits):
            ax_acc.plot(epochs, [r["val_acc_per_exit"][i] for r in log.records],
                        linewidth=1, label=f"exit {i + 1}")
        ax_acc.legend(fontsize=8)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation accuracy")
    ax_acc.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
