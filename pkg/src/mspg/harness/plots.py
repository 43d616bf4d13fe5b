"""Report figures rendered off-screen to PNG files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _num(rows, key):
    out = []
    for r in rows:
        try:
            out.append(float(r[key]))
        except (TypeError, ValueError):
            out.append(np.nan)
    return np.array(out)


def training_curves(rows, path):
    """Losses, discriminator accuracy, learning rates and quality against round."""
    rnd = _num(rows, "round")
    fig, ax = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    for k in ("L_G", "L_D", "L_FM"):
        ax[0, 0].plot(rnd, _num(rows, k), label=k, lw=0.8)
    ax[0, 0].set_title("losses")
    ax[0, 0].legend()
    ax[0, 1].plot(rnd, _num(rows, "d_acc_real"), label="real", lw=0.8)
    ax[0, 1].plot(rnd, _num(rows, "d_acc_fake"), label="fake", lw=0.8)
    ax[0, 1].set_ylim(-0.05, 1.05)
    ax[0, 1].set_title("discriminator accuracy")
    ax[0, 1].legend()
    ax[1, 0].semilogy(rnd, _num(rows, "eta_G"), label="eta_G")
    ax[1, 0].semilogy(rnd, _num(rows, "eta_D"), label="eta_D")
    ax[1, 0].semilogy(rnd, np.maximum(_num(rows, "lambda_aux"), 1e-8), label="lambda_aux", ls="--")
    ax[1, 0].set_title("schedule")
    ax[1, 0].legend()
    ax[1, 1].plot(rnd, _num(rows, "quality"), label="quality")
    cov = _num(rows, "coverage")
    if np.nanmax(cov, initial=0) > 0:
        ax[1, 1].plot(rnd, cov / np.nanmax(cov), label="coverage (scaled)", ls="--")
    ax[1, 1].set_title("sample quality")
    ax[1, 1].legend()
    for a in ax[1]:
        a.set_xlabel("round")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def ring_scatter(samples, ring, path, title="samples"):
    samples = np.asarray(samples)
    c = ring.centers()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(samples[:, 0], samples[:, 1], s=3, alpha=0.5, label="generated")
    ax.scatter(c[:, 0], c[:, 1], marker="x", c="k", s=40, label="mode centers")
    for x, y in c:
        ax.add_patch(plt.Circle((x, y), ring.hq_radius, fill=False, ls=":", lw=0.6))
    lim = 1.4 * ring.radius
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def image_grid(images, path, ncol=8):
    images = np.asarray(images)[:, 0]
    n = len(images)
    nrow = max(1, -(-n // ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(ncol, nrow), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(images[i], cmap="gray", vmin=-1, vmax=1)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def ablation_bars(table, path):
    """Mean coverage and high-quality fraction per ablation cell."""
    labels = [r["label"] for r in table]
    x = np.arange(len(table))
    fig, ax = plt.subplots(1, 2, figsize=(11, 4))
    ax[0].bar(x, [float(r["mean_coverage"]) for r in table])
    ax[0].set_title("mean modes covered")
    ax[1].bar(x, [float(r["mean_hq_fraction"]) for r in table], color="tab:orange")
    ax[1].set_title("mean high-quality fraction")
    ax[1].set_ylim(0, 1)
    for a in ax:
        a.set_xticks(x)
        a.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
