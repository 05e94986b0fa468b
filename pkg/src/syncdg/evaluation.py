"""Metrics and diagnostics: worst/average accuracy, disentanglement curves,
and decision-boundary grids over 2-D feature space."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch

from ._common import ValidationError, derive_seed, float_repr, write_text_atomic
from .latent_model import HiddenStateBank, RecurrentState, SyncModel
from .predictor import PredictionRecord
from .trainer import RunManifest

__all__ = [
    "MetricReport",
    "CurvePoint",
    "compute_metrics",
    "disentanglement_curve",
    "decision_boundary_grid",
    "grid_points",
    "save_grid",
    "load_grid",
    "metrics_table",
    "render_grid_png",
    "render_curve_png",
]

GRID_FORMAT_HEADER = "syncdg-grid v1"


@dataclass
class MetricReport:
    """Worst and average per-domain accuracy for one evaluated run."""

    dataset: str
    method: str
    seed: int
    domain_accuracies: dict[int, float]
    worst: float = field(init=False)
    average: float = field(init=False)

    def __post_init__(self) -> None:
        if not self.domain_accuracies:
            raise ValidationError("cannot build a report without domain accuracies")
        # aggregate in domain order so reports are insertion-order independent
        values = [self.domain_accuracies[t] for t in sorted(self.domain_accuracies)]
        self.worst = min(values)
        self.average = sum(values) / len(values)

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "seed": self.seed,
            "domain_accuracies": {str(t): v for t, v in self.domain_accuracies.items()},
            "worst": self.worst,
            "average": self.average,
        }


def compute_metrics(
    records: Sequence[PredictionRecord],
    dataset: str = "",
    method: str = "",
    seed: int = 0,
) -> MetricReport:
    """Aggregate per-domain accuracies into worst (min) and average (mean)."""
    if not records:
        raise ValidationError("cannot compute metrics from zero prediction records")
    accuracies: dict[int, float] = {}
    for record in records:
        if record.accuracy is None:
            raise ValidationError(f"domain {record.domain_index} carries no labels")
        accuracies[record.domain_index] = record.accuracy
    return MetricReport(dataset=dataset, method=method, seed=seed, domain_accuracies=accuracies)


def metrics_table(reports: Sequence[MetricReport]) -> str:
    """CSV table, one row per report: method x dataset x {worst, average}."""
    lines = ["method,dataset,seed,worst,average"]
    for report in reports:
        lines.append(
            ",".join(
                [
                    report.method,
                    report.dataset,
                    str(report.seed),
                    float_repr(report.worst),
                    float_repr(report.average),
                ]
            )
        )
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    mi: float
    non_increasing: bool


def disentanglement_curve(manifest: RunManifest | Mapping) -> list[CurvePoint]:
    """Per-epoch latent-overlap estimates from a training manifest.

    Each point is tagged with whether it is <= the previous one, so plots
    can highlight non-monotone stretches. Raw values pass through untouched.
    """
    epochs = manifest.epochs if isinstance(manifest, RunManifest) else manifest.get("epochs")
    if not epochs:
        raise ValidationError("manifest contains no epoch entries")
    points: list[CurvePoint] = []
    previous: float | None = None
    for entry in epochs:
        if "mi_probe" not in entry:
            raise ValidationError(f"epoch entry {entry.get('epoch')!r} lacks an mi_probe field")
        value = float(entry["mi_probe"])
        points.append(
            CurvePoint(
                epoch=int(entry["epoch"]),
                mi=value,
                non_increasing=previous is None or value <= previous,
            )
        )
        previous = value
    return points


def grid_points(bounds: Sequence[float], resolution: int) -> torch.Tensor:
    """Row-major lattice over an inclusive 2-D box.

    bounds is (x_min, x_max, y_min, y_max). Row i of the returned
    [resolution**2, 2] tensor block corresponds to y value i (bottom row
    first), so reshaping labels to [resolution, resolution] puts y on the
    first axis and x on the second.
    """
    if len(bounds) != 4:
        raise ValidationError("bounds must be (x_min, x_max, y_min, y_max)")
    x_min, x_max, y_min, y_max = (float(v) for v in bounds)
    if not (x_min < x_max and y_min < y_max):
        raise ValidationError(f"degenerate bounds {tuple(bounds)}")
    if resolution < 2:
        raise ValidationError("resolution must be at least 2")
    xs = torch.linspace(x_min, x_max, resolution, dtype=torch.float64)
    ys = torch.linspace(y_min, y_max, resolution, dtype=torch.float64)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def decision_boundary_grid(
    model: SyncModel,
    bank_snapshot: HiddenStateBank,
    bounds: Sequence[float],
    resolution: int,
    domain_t: int,
    seed: int = 0,
) -> torch.Tensor:
    """Predicted labels over a lattice, under the domain-t inference path.

    Hidden states are drawn from the given bank snapshot for every lattice
    point regardless of domain_t, and the drift recurrence is rolled to
    domain_t from its start; both choices keep grids for different domains
    comparable. Returns an int64 [resolution, resolution] matrix.
    """
    if model.feature_dim != 2:
        raise ValidationError(
            f"decision grids need a 2-D feature space, model has {model.feature_dim}"
        )
    if domain_t < 1:
        raise ValidationError(f"domain_t must be >= 1, got {domain_t}")
    if len(bank_snapshot) == 0:
        raise ValidationError("bank snapshot is empty")
    points = grid_points(bounds, resolution)
    n = points.shape[0]
    gen = torch.Generator().manual_seed(derive_seed(seed, "grid", domain_t))
    h, c = bank_snapshot.draw(n, gen)
    state = RecurrentState(h, c, domain_index=domain_t - 1)
    with torch.no_grad():
        post_dy, _ = model.encode_dynamic(points, state, t=domain_t)
        post_st = model.encode_static(points)
        phi_st, _ = model.mask_causal(post_st.mu, "static", noise_mode="deterministic")
        phi_dy, _ = model.mask_causal(post_dy.mu, "dynamic", noise_mode="deterministic")
        _, drift_sample = model.roll_drift_prior(domain_t)
        logits = model.classify(phi_st, phi_dy, drift_sample.expand(n, -1))
    return logits.argmax(dim=-1).reshape(resolution, resolution)


def save_grid(path, grid: torch.Tensor, bounds: Sequence[float], domain_t: int) -> None:
    """Persist a label matrix with enough context to re-plot it."""
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValidationError(f"grid must be square, got {tuple(grid.shape)}")
    lines = [
        GRID_FORMAT_HEADER,
        f"domain {domain_t}",
        "bounds " + " ".join(float_repr(v) for v in bounds),
        f"resolution {grid.shape[0]}",
    ]
    for row in grid.tolist():
        lines.append(" ".join(str(int(v)) for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def load_grid(path) -> tuple[torch.Tensor, tuple[float, float, float, float], int]:
    """Read a label matrix saved by save_grid."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != GRID_FORMAT_HEADER:
        raise ValidationError(f"{path}: not a grid file")
    domain_t = int(lines[1].split()[1])
    bounds = tuple(float(v) for v in lines[2].split()[1:])
    resolution = int(lines[3].split()[1])
    rows = [[int(v) for v in line.split()] for line in lines[4 : 4 + resolution]]
    grid = torch.tensor(rows, dtype=torch.int64)
    if grid.shape != (resolution, resolution):
        raise ValidationError(f"{path}: expected {resolution}x{resolution} matrix")
    return grid, bounds, domain_t


def _agg_pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_grid_png(
    grid: torch.Tensor,
    bounds: Sequence[float],
    out_path,
    title: str = "",
    points: torch.Tensor | None = None,
    point_labels: torch.Tensor | None = None,
) -> None:
    """Draw a decision grid (optionally with scatter overlay) to a PNG."""
    plt = _agg_pyplot()
    x_min, x_max, y_min, y_max = (float(v) for v in bounds)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(
        grid.numpy(),
        origin="lower",
        extent=(x_min, x_max, y_min, y_max),
        cmap="coolwarm",
        alpha=0.45,
        interpolation="nearest",
        aspect="auto",
    )
    if points is not None:
        colors = point_labels.numpy() if point_labels is not None else None
        ax.scatter(points[:, 0].numpy(), points[:, 1].numpy(), c=colors, cmap="coolwarm", s=8, edgecolors="none")
    if title:
        ax.set_title(title)
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_curve_png(points: Sequence[CurvePoint], out_path, title: str = "") -> None:
    """Draw the per-epoch overlap estimate to a PNG."""
    if not points:
        raise ValidationError("no curve points to plot")
    plt = _agg_pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p.epoch for p in points], [p.mi for p in points], marker="o", linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("latent overlap estimate")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
