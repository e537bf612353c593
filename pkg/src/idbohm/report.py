"""Run artifacts: delimited plot-data files and rendered figures.

Everything is written to files (Agg backend, no GUI).  The data files are
plain gnuplot-compatible TSV: comment headers, blank lines between blocks.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dynamics import TrajectoryRecord, VelocityLaw
from .ensemble import EquivarianceReport
from .wavefunction import WaveFunction

__all__ = [
    "write_trajectory_plot_data",
    "write_density_heatmap_table",
    "fig_trajectories",
    "fig_equivariance",
    "fig_density_heatmap",
    "fig_compare_trajectories",
]


def write_trajectory_plot_data(records: list[TrajectoryRecord], path,
                               max_records: int = 64) -> None:
    """Gnuplot data: one block per trajectory, columns t then coordinates."""
    with open(path, "w") as fh:
        fh.write("# trajectory plot data: blocks separated by blank lines\n")
        fh.write("# columns: t  q{i}_{axis} ...\n")
        for r, rec in enumerate(records[:max_records]):
            fh.write(f"# trajectory {r} status={rec.status}\n")
            flat = rec.states.reshape(len(rec.times), -1)
            for k in range(len(rec.times)):
                cols = [f"{rec.times[k]:.9g}"] + [f"{x:.9g}" for x in flat[k]]
                fh.write("\t".join(cols) + "\n")
            fh.write("\n")


def write_density_heatmap_table(psi: WaveFunction, path) -> None:
    """Gnuplot heatmap table of |psi|^2 for a d=1, N=2 grid state."""
    geo = psi.state.geometry
    if psi.is_analytic or geo.n_axes != 2:
        raise ValueError("heatmap tables need a two-axis grid state")
    rho = psi.state.density_array()
    xs = geo.axis_coords
    with open(path, "w") as fh:
        fh.write(f"# |psi|^2 at t={psi.time:.9g}; columns: q0_0 q1_0 density\n")
        for i, x in enumerate(xs):
            for j, y in enumerate(xs):
                fh.write(f"{x:.9g}\t{y:.9g}\t{rho[i, j]:.9g}\n")
            fh.write("\n")


def fig_trajectories(records: list[TrajectoryRecord], path, max_records: int = 32,
                     title: str = "") -> None:
    """Time against every coordinate, a line bundle per coordinate axis."""
    if not records:
        return
    n, d = records[0].states.shape[1:]
    fig, axes = plt.subplots(n * d, 1, figsize=(7, 2.2 * n * d), sharex=True,
                             squeeze=False)
    for i in range(n):
        for a in range(d):
            ax = axes[i * d + a, 0]
            for rec in records[:max_records]:
                ax.plot(rec.times, rec.states[:, i, a], lw=0.7, alpha=0.7)
            ax.set_ylabel(f"q{i}_{a}")
            ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("t")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_equivariance(records: list[TrajectoryRecord], psi0: WaveFunction,
                     report: EquivarianceReport, path, bins: int = 60) -> None:
    """Endpoint histograms at each observation time with the |psi_t|^2 marginal."""
    slices = report.slices
    n, d = records[0].states.shape[1:]
    fig, axes = plt.subplots(len(slices), 1, figsize=(7, 2.6 * len(slices)),
                             squeeze=False)
    for k, sl in enumerate(slices):
        ax = axes[k, 0]
        samples = np.array([r.states[k, 0, 0] for r in records if r.n_times > k])
        ax.hist(samples, bins=bins, density=True, alpha=0.5, label="ensemble")
        if psi0.is_analytic:
            xs = np.linspace(samples.min() - 1.0, samples.max() + 1.0, 400)
            psi_t = psi0.evolve(sl.time - psi0.time)
            if report.law is VelocityLaw.STANDARD:
                pdf = psi_t.state.marginal_pdf(psi_t.species, psi_t.time, 0, 0, xs)
                ax.plot(xs, pdf, "k--", lw=1.2, label="|psi_t|^2 marginal")
        status = "pass" if sl.passed else "FAIL"
        dmax = max(a.statistic for a in sl.axes)
        ax.set_title(f"t={sl.time:g}  first coordinate  maxD={dmax:.4f} ({status})",
                     fontsize=9)
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_density_heatmap(psi: WaveFunction, path) -> None:
    geo = psi.state.geometry
    if psi.is_analytic or geo.n_axes != 2:
        raise ValueError("heatmap figures need a two-axis grid state")
    rho = psi.state.density_array()
    fig, ax = plt.subplots(figsize=(5.5, 4.8))
    im = ax.imshow(rho.T, origin="lower", extent=(0, geo.length, 0, geo.length),
                   aspect="auto", cmap="viridis")
    ax.set_xlabel("q0_0")
    ax.set_ylabel("q1_0")
    ax.set_title(f"|psi|^2 at t={psi.time:g}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_compare_trajectories(recs_a: list[TrajectoryRecord],
                             recs_b: list[TrajectoryRecord], labels: tuple[str, str],
                             path, max_records: int = 12) -> None:
    """Overlay the first coordinate of paired runs under two laws."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for rec in recs_a[:max_records]:
        ax.plot(rec.times, rec.states[:, 0, 0], "C0-", lw=0.8, alpha=0.7)
    for rec in recs_b[:max_records]:
        ax.plot(rec.times, rec.states[:, 0, 0], "C3--", lw=0.8, alpha=0.7)
    ax.plot([], [], "C0-", label=labels[0])
    ax.plot([], [], "C3--", label=labels[1])
    ax.set_xlabel("t")
    ax.set_ylabel("first coordinate")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
