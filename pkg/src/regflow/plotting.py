"""Figures written next to the CSV/PGM outputs of the command-line tools."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# no software/version stamp, so reruns give byte-identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_dataset(ds, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        if ds.cond_dim == 1 and ds.target_dim == 1:
            ax.scatter(ds.x[:, 0], ds.y[:, 0], s=1.5, c="k", alpha=0.4, linewidths=0)
            ax.set_xlabel("x")
            ax.set_ylabel("y")
        else:
            ax.scatter(ds.y[:, 0], ds.y[:, 1], s=1.5, c="k", alpha=0.4, linewidths=0)
            ax.set_xlabel("y0")
            ax.set_ylabel("y1")
            ax.set_aspect("equal", adjustable="datalim")
        ax.set_title(f"{ds.generator_id} ({ds.split}, n={len(ds)})")
        _save(fig, path)


def plot_training_curve(log, path, window: int = 50) -> None:
    nll = log.nll_curve()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        if len(nll):
            steps = np.arange(1, len(nll) + 1)
            ax.plot(steps, nll, lw=0.5, color="0.7", label="batch")
            if len(nll) >= window:
                smooth = np.convolve(nll, np.ones(window) / window, mode="valid")
                ax.plot(steps[window - 1:], smooth, lw=1.2, color="C0", label=f"mean of {window}")
        if log.evals:
            ax.plot([e.step for e in log.evals], [e.test_nll for e in log.evals], "o", ms=3, color="C3",
                    label="held-out")
        ax.set_xlabel("step")
        ax.set_ylabel("NLL")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_conditional_density(xs, ys, density, path, data=None, title: str = "") -> None:
    """Heatmap of p(y|x): ``density[i, j]`` at ``(xs[i], ys[j])``, each column max-normalized."""
    dens = np.asarray(density)
    col = dens / np.maximum(dens.max(axis=1, keepdims=True), 1e-300)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        ax.imshow(col.T, origin="lower", aspect="auto", cmap="magma",
                  extent=(xs[0], xs[-1], ys[0], ys[-1]), interpolation="nearest")
        if data is not None:
            ax.scatter(data.x[:, 0], data.y[:, 0], s=0.3, c="w", alpha=0.25, linewidths=0)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_density_grid(density, bounds, path, title: str = "") -> None:
    """2-D heatmap (``density[row, col]`` with rows along y1) or a 1-D curve."""
    dens = np.asarray(density)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.4))
        if dens.ndim == 1:
            grid = np.linspace(bounds[0], bounds[1], len(dens))
            ax.plot(grid, dens, color="C0")
            ax.fill_between(grid, dens, color="C0", alpha=0.2)
            ax.set_xlabel("y")
            ax.set_ylabel("density")
        else:
            im = ax.imshow(dens, origin="lower", cmap="magma", extent=tuple(bounds), interpolation="nearest")
            fig.colorbar(im, ax=ax, shrink=0.8)
            ax.set_xlabel("y0")
            ax.set_ylabel("y1")
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_samples(samples, path, reference=None, title: str = "") -> None:
    s = np.asarray(samples)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        if s.shape[1] == 1:
            bins = 60
            if reference is not None:
                ax.hist(np.asarray(reference)[:, 0], bins=bins, density=True, color="0.75", label="truth")
            ax.hist(s[:, 0], bins=bins, density=True, histtype="step", color="C0", label="model")
            ax.set_xlabel("y")
            ax.legend(frameon=False)
        else:
            if reference is not None:
                r = np.asarray(reference)
                ax.scatter(r[:, 0], r[:, 1], s=2, c="0.7", linewidths=0, label="truth")
            ax.scatter(s[:, 0], s[:, 1], s=2, c="C0", linewidths=0, label="model")
            ax.set_aspect("equal", adjustable="datalim")
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        _save(fig, path)
