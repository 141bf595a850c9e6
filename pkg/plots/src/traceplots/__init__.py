"""CSV-to-figure rendering for trace artifacts."""

from .render import FigureSpec, RenderError, build_figure, render

