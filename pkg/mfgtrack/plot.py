from pathlib import Path
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sb  # noqa: E402
from matplotlib import ticker  # noqa: E402

from .datanet import AttentionMap  # noqa: E402
from .evaluate import PR_THRESHOLDS, SR_THRESHOLDS, EvalResult  # noqa: E402
from .frame import ImageTensor  # noqa: E402


def _save(path: Path, dpi: int):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(str(path), dpi=dpi, bbox_inches="tight")
    plt.close()


def plot_curves(
    results: Dict[str, EvalResult],
    save_figure: Path,
    title: str = "Tracking",
    dpi: int = 150,
):
    """Precision and success plots side by side, one line per named run.

    Args:
        results (Dict[str, EvalResult]): Evaluations keyed by the run name.
        save_figure (Path): PNG file to write.
        title (str, optional): Figure title. Defaults to "Tracking".
        dpi (int, optional): Figure dpi. Defaults to 150.
    """
    precision = pd.DataFrame(
        {
            f"{name} [{result.pr_at_threshold:.3f}]": result.pr_curve
            for name, result in results.items()
        },
        index=pd.Index(PR_THRESHOLDS, name="Location error threshold (px)"),
    )
    success = pd.DataFrame(
        {f"{name} [{result.sr_auc:.3f}]": result.sr_curve for name, result in results.items()},
        index=pd.Index(SR_THRESHOLDS, name="Overlap threshold"),
    )
    plt.style.use("dark_background")
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4), num=title)
    for ax, data, ylabel in (
        (left, precision, "Precision rate"),
        (right, success, "Success rate"),
    ):
        sb.lineplot(data=data, ax=ax, dashes=False)
        ax.set_ylim(0, 1.02)
        ax.yaxis.set_major_formatter(ticker.PercentFormatter(1))
        ax.xaxis.grid(visible=True, which="major", alpha=0.3)
        ax.yaxis.grid(visible=True, which="major", alpha=0.3)
        ax.set_ylabel(ylabel)
        ax.set_xlabel(data.index.name)
    fig.suptitle(title)
    _save(save_figure, dpi)


def plot_attention(
    image: ImageTensor,
    attention: AttentionMap,
    save_figure: Path,
    title: Optional[str] = None,
    dpi: int = 150,
):
    """Overlays an attention map, resized to the image, as a heat map."""
    att = attention.resized(image.size).data.detach().cpu().numpy()
    plt.style.use("dark_background")
    plt.figure(title or "Attention", dpi=dpi)
    plt.imshow(image.to_numpy())
    plt.imshow(att, cmap=sb.color_palette("rocket", as_cmap=True), alpha=0.5, vmin=0, vmax=1)
    plt.axis("off")
    if title:
        plt.title(title)
    _save(save_figure, dpi)


def plot_filters(kernels: np.ndarray, save_figure: Path, channels: int = 16, dpi: int = 150):
    """Grid of the first `channels` predicted kernels of a filter bank."""
    kernels = np.asarray(kernels)[:channels]
    columns = int(np.ceil(np.sqrt(len(kernels))))
    rows = int(np.ceil(len(kernels) / columns))
    plt.style.use("dark_background")
    fig, axes = plt.subplots(rows, columns, figsize=(columns, rows), squeeze=False)
    limit = float(np.abs(kernels).max()) or 1.0
    for ax, kernel in zip(axes.flat, kernels):
        sb.heatmap(kernel, ax=ax, cmap="vlag", vmin=-limit, vmax=limit, cbar=False, square=True)
    for ax in axes.flat:
        ax.set_axis_off()
    _save(save_figure, dpi)
