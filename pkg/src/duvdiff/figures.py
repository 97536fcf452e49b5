"""Matplotlib figure emission for the report path.

All renderers use the Agg backend and write straight to files; nothing here
opens a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_image_figure(path, image, title: str = "detector image") -> None:
    data = image.data if hasattr(image, "data") else np.asarray(image, float)
    pitch = getattr(image, "pixel_pitch", 1.0)
    h, w = data.shape
    extent = [0.0, w * pitch * 1e6, -h * pitch * 1e6, 0.0]
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(data, cmap="gray", aspect="auto", extent=extent,
                   origin="upper")
    ax.set_xlabel("x (µm)")
    ax.set_ylabel("y (µm)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="normalized intensity")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_profile_figure(path, positions, profiles: dict,
                        xlabel: str, title: str) -> None:
    """Overlay one or more 1-D profiles keyed by legend label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in profiles.items():
        ax.plot(np.asarray(positions), np.asarray(values), label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("integrated intensity")
    ax.set_title(title)
    if len(profiles) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_heatmap_figure(path, heatmap, title: str = "ln RSS") -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    extent = [heatmap.sigma_values[0], heatmap.sigma_values[-1],
              heatmap.alpha_values[0], heatmap.alpha_values[-1]]
    im = ax.imshow(heatmap.log_rss, aspect="auto", origin="lower",
                   extent=extent, cmap="viridis")
    ia, isg = heatmap.argmin
    ax.plot(heatmap.sigma_values[isg], heatmap.alpha_values[ia], "rx",
            markersize=10)
    ax.set_xlabel("absorption cross section (m$^2$)")
    ax.set_ylabel("polarizability magnitude (C m$^2$/V)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="ln RSS")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_kick_figure(path, orders, masses, title: str = "order weights") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.asarray(orders), np.asarray(masses), width=0.8)
    ax.set_xlabel("diffraction order")
    ax.set_ylabel("probability mass")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
