"""Rich text tables for evaluation, gradient checks and run comparison."""

from __future__ import annotations

import io
import math
from typing import Iterable, Sequence

from rich.console import Console
from rich.table import Table

from ..metrics import MetricReport


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.{digits}g}"
    return str(value)


def metrics_table(rows: Sequence[MetricReport], title: str = "Evaluation") -> Table:
    table = Table(title=title)
    for column in ("Method", "Res", "SSIM", "PSNR", "MSE", "RMSE px", "Noise", "Static incompat."):
        table.add_column(column, justify="left" if column == "Method" else "right")
    for r in rows:
        table.add_row(
            r.name, _fmt(r.res), _fmt(r.ssim), _fmt(r.psnr), _fmt(r.mse),
            _fmt(r.deformation_rmse), _fmt(r.noise_level), _fmt(r.static_incompatibility),
        )
    return table


def gradcheck_table(results: Iterable[tuple[tuple[int, int], str, float, bool]]) -> Table:
    """Rows of (pixel, axis, relative error, passed)."""
    table = Table(title="Gradient check")
    table.add_column("Pixel")
    table.add_column("Axis")
    table.add_column("Rel. error", justify="right")
    table.add_column("", justify="center")
    for pixel, axis, error, passed in results:
        table.add_row(str(pixel), axis, f"{error:.2e}", "[green]pass[/]" if passed else "[red]FAIL[/]")
    return table


def report_table(rows: Sequence[dict], columns: Sequence[str], title: str = "Runs") -> Table:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(_fmt(row.get(c)) for c in columns))
    return table


def render_text(table: Table, width: int = 120) -> str:
    """Plain text of ``table`` without color codes."""
    console = Console(record=True, width=width, color_system=None, file=io.StringIO())
    console.print(table)
    return console.export_text()

