"""PNG panels and text tables for run outputs."""

from .images import field_to_rgb, save_field, save_gradient_map, save_image, to_gray
from .tables import gradcheck_table, metrics_table, render_text, report_table

__all__ = [
    "field_to_rgb",
    "save_field",
    "save_gradient_map",
    "save_image",
    "to_gray",
    "gradcheck_table",
    "metrics_table",
    "render_text",
    "report_table",
]
