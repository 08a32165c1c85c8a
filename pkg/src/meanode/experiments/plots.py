"""Plot emission: SVG via matplotlib, gnuplot .dat files and CSV twins.

The CSV twin of a plot lists exactly the (series, x, y) points drawn in it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from meanode.shared import write_csv  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "meanode"


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]
    style: Literal["line", "points"] = "line"
    panel: int = 0
    # Position in [0, 1] along a colormap; None uses the default cycle.
    shade: float | None = None


@dataclass
class PlotSpec:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    logx: bool = False
    logy: bool = False
    panels: int = 1
    panel_titles: tuple[str, ...] = ()
    legend: bool = True


def write_plot_csv(path: Path, plot: PlotSpec) -> Path:
    rows = (
        (s.label, s.panel, float(x), float(y))
        for s in plot.series
        for x, y in zip(s.x, s.y, strict=True)
    )
    return write_csv(path, ("series", "panel", "x", "y"), rows)


def write_dat(path: Path, plot: PlotSpec) -> Path:
    """One gnuplot data block per series, separated by two blank lines."""
    blocks = []
    for s in plot.series:
        lines = [f"# {s.label} (panel {s.panel})"]
        lines += [f"{float(x)!r} {float(y)!r}" for x, y in zip(s.x, s.y, strict=True)]
        blocks.append("\n".join(lines))
    path.write_text("\n\n\n".join(blocks) + "\n", encoding="utf-8")
    return path


def write_svg(path: Path, plot: PlotSpec) -> Path:
    fig, axes = plt.subplots(1, plot.panels, figsize=(6 * plot.panels, 4.5), squeeze=False)
    cmap = matplotlib.colormaps["cool"]
    for index, ax in enumerate(axes[0]):
        for s in (s for s in plot.series if s.panel == index):
            color = cmap(s.shade) if s.shade is not None else None
            if s.style == "points":
                ax.plot(s.x, s.y, "o", label=s.label, color=color)
            else:
                ax.plot(s.x, s.y, "-", label=s.label, color=color, linewidth=1.5)
        if plot.logx:
            ax.set_xscale("log")
        if plot.logy:
            ax.set_yscale("log")
        ax.set_xlabel(plot.xlabel)
        ax.set_ylabel(plot.ylabel)
        if index < len(plot.panel_titles):
            ax.set_title(plot.panel_titles[index])
        ax.grid(True, alpha=0.3)
        if plot.legend and ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize="small")
    fig.suptitle(plot.title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plot(out_dir: str | Path, name: str, plot: PlotSpec) -> list[Path]:
    """Write <name>.svg, <name>.dat and the <name>.plot.csv twin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_svg(out / f"{name}.svg", plot),
        write_dat(out / f"{name}.dat", plot),
        write_plot_csv(out / f"{name}.plot.csv", plot),
    ]
    logger.info("Wrote plot %s", out / f"{name}.svg")
    return paths
