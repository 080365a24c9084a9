"""Figure rendering for report output.

SVGs must be byte-identical across runs on identical inputs, so the Agg
backend is forced, element-id hashing is salted with a constant, and the
creation timestamp is stripped from the metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "ticlab"


def save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def probe_curve_figure(curves: dict[str, tuple[list[int], list[float], list[float]]]):
    """Probe accuracy after each task, one line per mode.

    curves: mode -> (task positions, mean accuracy, standard error).
    """
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for mode in sorted(curves):
        tasks, mean, stderr = curves[mode]
        ax.errorbar(tasks, mean, yerr=stderr, marker="o", markersize=3, capsize=2, label=mode)
    ax.set_xlabel("task")
    ax.set_ylabel("linear-probe accuracy")
    ax.set_title("representation quality after each task")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def lambda_sweep_figure(grid, means, stderrs, dynamic_mean=None, dynamic_stderr=None):
    """Average accuracy for each fixed mixing factor, with the dynamic run as
    a horizontal reference band."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.errorbar(grid, means, yerr=stderrs, marker="s", markersize=4, capsize=2,
                label="fixed lambda")
    if dynamic_mean is not None:
        ax.axhline(dynamic_mean, color="tab:red", linestyle="--", label="dynamic lambda")
        if dynamic_stderr:
            ax.axhspan(dynamic_mean - dynamic_stderr, dynamic_mean + dynamic_stderr,
                       color="tab:red", alpha=0.15)
    ax.set_xlabel("lambda")
    ax.set_ylabel("average accuracy A_N")
    ax.set_title("fixed vs dynamic stability-plasticity factor")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig
