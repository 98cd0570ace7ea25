"""Figures written next to the CLI's JSON/CSV output (Agg backend, no display needed)."""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

SMOOTH_WINDOW = 50


def smooth(values, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100)


def plot_loss_curve(history, path, window: int = SMOOTH_WINDOW) -> None:
    """Raw total loss, its moving average, and the four per-level terms."""
    h = np.asarray(history, dtype=np.float64).reshape(-1, 6)
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot(1, 1, 1)
    if len(h):
        steps = h[:, 0]
        ax.plot(steps, h[:, 5], color="0.75", lw=0.8, label="total")
        ax.plot(steps, smooth(h[:, 5], window), color="k", lw=1.5, label=f"total, window {window}")
        for col, name in zip(range(1, 5), ("x", "y", "z", "fine z")):
            ax.plot(steps, smooth(h[:, col], window), lw=1.0, label=name)
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    _save(fig, path)


def normal_rgb(normals) -> np.ndarray:
    """Map unit normals to RGB in [0, 1]; the zero background stays black."""
    n = np.asarray(normals, dtype=np.float64)
    fg = np.any(n != 0, axis=-1, keepdims=True)
    return np.where(fg, np.clip((n + 1.0) * 0.5, 0.0, 1.0), 0.0)


def plot_normal_maps(maps, yaws, path) -> None:
    """``maps`` is a list of ``(pred, gt)`` NormalMap pairs, one column per yaw."""
    k = len(maps)
    fig = Figure(figsize=(2 * max(k, 1), 4.2))
    for j, ((mp, mg), yaw) in enumerate(zip(maps, yaws)):
        for i, (m, label) in enumerate(((mp, "pred"), (mg, "gt"))):
            ax = fig.add_subplot(2, k, i * k + j + 1)
            ax.imshow(normal_rgb(m.normals), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"yaw {yaw:g}", fontsize=9)
            if j == 0:
                ax.set_ylabel(label)
    fig.tight_layout()
    _save(fig, path)


def plot_volume_slices(volume, path, iso: float = 0.5) -> None:
    """Middle slice along each axis, with the iso contour drawn on top."""
    d = volume.data
    fig = Figure(figsize=(11, 3.6), layout="constrained")
    for ax_i, name in enumerate("xyz"):
        sl = np.take(d, d.shape[ax_i] // 2, axis=ax_i)
        ax = fig.add_subplot(1, 3, ax_i + 1)
        im = ax.imshow(sl.T, origin="lower", vmin=0.0, vmax=1.0, cmap="viridis",
                       extent=(-0.5, 0.5, -0.5, 0.5))
        if sl.min() < iso < sl.max():
            ax.contour(sl.T, levels=[iso], colors="w", linewidths=0.8, origin="lower",
                       extent=(-0.5, 0.5, -0.5, 0.5))
        u, w = [c for c in "xyz" if c != name]
        ax.set_xlabel(u)
        ax.set_ylabel(w)
        ax.set_title(f"{name} = mid")
    fig.colorbar(im, ax=fig.axes, shrink=0.9, label="occupancy")
    _save(fig, path)


def write_pfm(path, image) -> None:
    """Little-endian colour PFM (rows stored bottom-up)."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = (int(t) for t in fh.readline().split())
        scale = float(fh.readline())
        ch = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype).reshape(h, w, ch) if ch == 3 else \
            np.frombuffer(fh.read(), dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float32)
