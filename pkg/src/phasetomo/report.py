"""Figure rendering for the CLI report paths.

Every plot is written straight to a file next to the CSV it illustrates;
nothing is shown interactively.  PNG metadata is stripped so repeated runs
at a fixed seed stay byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def spectrum_figure(spec, path, g=None, zeros=None, title=None):
    """k vs f (and k vs g with zero markers when available) for one pair."""
    nrows = 2 if g is not None else 1
    fig, axes = plt.subplots(nrows, 1, figsize=(7.5, 2.8 * nrows),
                             sharex=True, squeeze=False)
    ax = axes[0, 0]
    ax.plot(spec.k, spec.f, lw=0.7, color="#1f77b4")
    ax.set_ylabel("f(k) = |u_sc|^2")
    if title:
        ax.set_title(title, fontsize=10)
    if g is not None:
        axg = axes[1, 0]
        axg.plot(g.k, g.g, lw=0.7, color="#2ca02c")
        axg.axhline(0.0, color="0.6", lw=0.6)
        if zeros is not None and len(zeros.zeros):
            axg.plot(zeros.zeros, np.zeros_like(zeros.zeros), ".",
                     color="#d62728", ms=3, label=f"{len(zeros.zeros)} zeros")
            axg.legend(loc="upper right", fontsize=8)
        axg.set_ylabel("g(k)")
        axg.set_xlabel("k")
    else:
        ax.set_xlabel("k")
    fig.tight_layout()
    return _save(fig, path)


def recovery_summary_figure(rows, path):
    """Recovered tau against the chord distance for a whole dataset."""
    ok = [r for r in rows if r["ok"]]
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    if ok:
        dist = np.array([r["dist"] for r in ok])
        tau = np.array([r["tau_hat"] for r in ok])
        zero = np.array([r["zero_alpha"] for r in ok])
        ax.plot(dist[zero], tau[zero], "o", ms=4, mfc="none", color="0.5",
                label="alpha = 0")
        ax.plot(dist[~zero], tau[~zero], "o", ms=4, color="#1f77b4",
                label="alpha > 0")
        lims = [dist.min() * 0.95, dist.max() * 1.05]
        ax.plot(lims, lims, "--", color="0.7", lw=0.8, label="tau = |x-y|")
        ax.legend(fontsize=8)
    ax.set_xlabel("|x - y|")
    ax.set_ylabel("recovered tau")
    fig.tight_layout()
    return _save(fig, path)


def recovery_error_figure(rows, path):
    """Per-pair relative tau error when ground truth is in the provenance."""
    scored = [(r["pair"], abs(r["tau_hat"] - r["tau_true"]) / r["tau_true"])
              for r in rows if r["ok"] and r.get("tau_true")]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    if scored:
        pairs, errs = zip(*scored)
        ax.semilogy(pairs, np.maximum(errs, 1e-17), ".", ms=4)
        ax.axhline(1e-3, color="#d62728", lw=0.8, ls="--",
                   label="1e-3 target (median)")
        ax.legend(fontsize=8)
    ax.set_xlabel("pair")
    ax.set_ylabel("|tau_hat - tau| / tau")
    fig.tight_layout()
    return _save(fig, path)


def misfit_history_figure(model, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    its = [h["iter"] for h in model.history]
    mis = [max(h["misfit"], 1e-300) for h in model.history]
    ax.semilogy(its, mis, "o-", ms=4)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("||tau_pred - tau_obs||")
    fig.tight_layout()
    return _save(fig, path)


def model_slices_figure(model, path, truth_field=None):
    """Mid-plane slices of the reconstruction (and truth when available)."""
    field = model.as_field()
    c = model.support_center
    r = model.support_radius
    axes_1d = np.linspace(-r, r, 96)
    xx, yy = np.meshgrid(axes_1d, axes_1d, indexing="ij")
    pts = np.stack([c[0] + xx.ravel(), c[1] + yy.ravel(),
                    np.full(xx.size, c[2])], axis=1)
    recon = field.values(pts).reshape(xx.shape)
    ncols = 2 if truth_field is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(4.4 * ncols, 3.8),
                             squeeze=False)
    panels = [("reconstruction", recon)]
    if truth_field is not None:
        panels.append(("truth", truth_field.values(pts).reshape(xx.shape)))
    vmax = max(p[1].max() for p in panels)
    for ax, (label, img) in zip(axes[0], panels):
        im = ax.imshow(img.T, origin="lower", vmin=1.0, vmax=vmax,
                       extent=[-r, r, -r, r], cmap="viridis")
        ax.set_title(label, fontsize=10)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    return _save(fig, path)
