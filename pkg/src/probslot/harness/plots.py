"""Deterministic SVG figures: mixture densities, scatters, per-run panels."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..gmm import GaussianMixture, grid_density_2d, mixture_log_density  # noqa: E402

# fixed ids and no timestamp, so identical inputs give identical files
_RC = {"svg.hashsalt": "probslot", "svg.fonttype": "path"}
_META = {"Date": None, "Creator": "probslot"}


def _save(fig, path, digest: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    with open(path, "a") as fh:
        fh.write(f"<!-- config_digest={digest} -->\n")
    return path


def density_grid(m: GaussianMixture, n: int = 200, pad: float = 3.0):
    """(xs, ys, density) over the components' padded bounding box."""
    sd = np.sqrt(m.vars)
    lo = (m.means - pad * sd).min(0)
    hi = (m.means + pad * sd).max(0)
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    return xs, ys, grid_density_2d(m, xs, ys)


def density_curve(m: GaussianMixture, n: int = 400, pad: float = 4.0):
    sd = np.sqrt(m.vars[:, 0])
    xs = np.linspace((m.means[:, 0] - pad * sd).min(), (m.means[:, 0] + pad * sd).max(), n)
    return xs, np.exp(mixture_log_density(m, xs[:, None]))


def _draw_mixture(ax, m: GaussianMixture | None, title: str = ""):
    drawn = None
    if m is None:
        pass
    elif m.dim == 1:
        xs, ys = density_curve(m)
        ax.plot(xs, ys, color="C0", lw=1.2)
        ax.set_xlabel("z")
        ax.set_ylabel("density")
        drawn = (xs, ys)
    elif m.dim == 2:
        xs, ys, dens = density_grid(m)
        ax.contourf(xs, ys, dens, levels=12, cmap="viridis")
        ax.set_xlabel("z1")
        ax.set_ylabel("z2")
        drawn = (xs, ys, dens)
    else:
        raise ValueError(f"can only draw 1-D or 2-D mixtures, got d={m.dim}")
    if title:
        ax.set_title(title, fontsize=9)
    return drawn


def plot_mixture(m: GaussianMixture | None, path, digest: str, title: str = ""):
    """Density of a 1-D (curve) or 2-D (filled contours) mixture; an empty
    mixture gives bare axes. Returns the path and the arrays drawn."""
    fig, ax = plt.subplots(figsize=(4, 3.4))
    drawn = _draw_mixture(ax, m, title)
    return _save(fig, path, digest), drawn


def plot_scatter(points: np.ndarray, path, digest: str, labels=None, title: str = "") -> Path:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, points.shape[-1])
    if pts.shape[1] == 1:
        # 1-D samples: a strip along the x axis
        pts = np.hstack([pts, np.zeros_like(pts)])
    fig, ax = plt.subplots(figsize=(4, 3.4))
    if len(pts):
        style = {"c": labels, "cmap": "tab10"} if labels is not None else {"color": "C0"}
        ax.scatter(pts[:, 0], pts[:, 1], s=2, linewidths=0, **style)
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path, digest)


def plot_panels(mixtures: list[tuple[str, GaussianMixture | None]], path, digest: str) -> Path:
    """One density panel per run, side by side."""
    n = max(1, len(mixtures))
    cols = min(n, 5)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.8 * rows), squeeze=False)
    for ax, (name, m) in zip(axes.ravel(), mixtures):
        _draw_mixture(ax, m, name)
    for ax in axes.ravel()[len(mixtures) :]:
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path, digest)
