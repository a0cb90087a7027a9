"""Attention rendering: deterministic SVG overlays and report figures.

The SVG path is byte-deterministic (fixed float formatting, no timestamps):
region boxes are shaded by node attention (normalized by the maximum),
within-category edges draw as blue arrows and cross-category edges as red
arrows with stroke width proportional to edge attention, the predicted box
gets a bold green outline, and the true referent a dashed black one.

Figure helpers draw on matplotlib's object API with the Agg canvas, so they
work headless; PNG output is a reporting surface and is not covered by any
byte-determinism promise.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .model import ItemResult
from .scenegraph import ObjectGraph, Scene

__all__ = [
    "render_scene_svg",
    "loss_curve_figure",
    "ablation_bars_figure",
    "token_attention_figure",
]

_INTRA_COLOR = "#1f77b4"
_INTER_COLOR = "#d62728"
_PREDICTED_COLOR = "#2ca02c"
_BOX_FILL = "#ff7f0e"


def _f(value: float) -> str:
    return f"{float(value):.3f}"


def _box_opacities(attention: Optional[np.ndarray], n: int) -> list[float]:
    if attention is None:
        return [0.25] * n
    values = np.asarray(attention, dtype=float).reshape(-1)
    top = float(values.max()) if values.size else 1.0
    if top <= 0:
        return [0.25] * n
    return [0.1 + 0.6 * float(v) / top for v in values]


def _arrow_lines(scene: Scene, edges: list[tuple[int, int]],
                 attention: Optional[np.ndarray], color: str,
                 marker: str) -> list[str]:
    if attention is None:
        return []
    values = np.asarray(attention, dtype=float).reshape(-1)
    parts = []
    for (i, j), a in zip(edges, values):
        sx, sy = scene.regions[i].box.center
        tx, ty = scene.regions[j].box.center
        # pull endpoints in so arrowheads stay visible between centers
        x1, y1 = sx + 0.15 * (tx - sx), sy + 0.15 * (ty - sy)
        x2, y2 = sx + 0.85 * (tx - sx), sy + 0.85 * (ty - sy)
        width = 0.6 + 4.0 * float(a)
        parts.append(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
            f'stroke="{color}" stroke-width="{_f(width)}" '
            f'stroke-opacity="{_f(0.35 + 0.6 * float(a))}" '
            f'marker-end="url(#{marker})"/>')
    return parts


def render_scene_svg(scene: Scene, graph: ObjectGraph,
                     detail: Optional[ItemResult] = None,
                     predicted: Optional[int] = None,
                     referent: Optional[int] = None) -> str:
    """Render the scene with attention overlays to an SVG string."""
    n = len(scene.regions)
    node_attention = detail.node_attention if detail is not None else None
    opacities = _box_opacities(node_attention, n)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {_f(scene.width)} {_f(scene.height)}" '
        f'width="{_f(scene.width)}" height="{_f(scene.height)}">',
        '<defs>'
        f'<marker id="arrow-intra" viewBox="0 0 10 10" refX="9" refY="5" '
        f'markerWidth="7" markerHeight="7" orient="auto-start-reverse">'
        f'<path d="M 0 0 L 10 5 L 0 10 z" fill="{_INTRA_COLOR}"/></marker>'
        f'<marker id="arrow-inter" viewBox="0 0 10 10" refX="9" refY="5" '
        f'markerWidth="7" markerHeight="7" orient="auto-start-reverse">'
        f'<path d="M 0 0 L 10 5 L 0 10 z" fill="{_INTER_COLOR}"/></marker>'
        '</defs>',
        f'<rect x="0" y="0" width="{_f(scene.width)}" '
        f'height="{_f(scene.height)}" fill="#ffffff"/>',
    ]

    for r, opacity in zip(scene.regions, opacities):
        parts.append(
            f'<rect x="{_f(r.box.x)}" y="{_f(r.box.y)}" '
            f'data-region="{r.region_id}" '
            f'width="{_f(r.box.w)}" height="{_f(r.box.h)}" '
            f'fill="{_BOX_FILL}" fill-opacity="{_f(opacity)}" '
            f'stroke="#555555" stroke-width="1"/>')

    intra_attention = detail.intra_attention if detail is not None else None
    inter_attention = detail.inter_attention if detail is not None else None
    parts += _arrow_lines(scene, graph.intra_edges, intra_attention,
                          _INTRA_COLOR, "arrow-intra")
    parts += _arrow_lines(scene, graph.inter_edges, inter_attention,
                          _INTER_COLOR, "arrow-inter")

    if referent is not None:
        r = scene.regions[referent]
        parts.append(
            f'<rect x="{_f(r.box.x - 3)}" y="{_f(r.box.y - 3)}" '
            f'width="{_f(r.box.w + 6)}" height="{_f(r.box.h + 6)}" '
            f'fill="none" stroke="#000000" stroke-width="1.5" '
            f'stroke-dasharray="6 4"/>')
    if predicted is not None:
        r = scene.regions[predicted]
        parts.append(
            f'<rect x="{_f(r.box.x)}" y="{_f(r.box.y)}" '
            f'width="{_f(r.box.w)}" height="{_f(r.box.h)}" fill="none" '
            f'stroke="{_PREDICTED_COLOR}" stroke-width="3"/>')

    for r in scene.regions:
        label = r.category
        color = r.attributes.get("color")
        if color:
            label = f"{color} {label}"
        parts.append(
            f'<text x="{_f(r.box.x + 3)}" y="{_f(r.box.y + 13)}" '
            f'font-family="monospace" font-size="12" fill="#111111">'
            f'{r.region_id}:{label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- matplotlib report figures (not byte-deterministic) ----------------------


def _new_figure(width: float, height: float):
    from matplotlib.figure import Figure
    return Figure(figsize=(width, height), dpi=120)


def loss_curve_figure(metrics: list[dict], path) -> None:
    """Plot per-iteration loss (and accuracy probes when present) to a PNG."""
    losses = [(m["iteration"], m["loss"]) for m in metrics
              if m.get("type") == "loss"]
    fig = _new_figure(7, 4.2)
    ax = fig.add_subplot()
    if losses:
        xs, ys = zip(*losses)
        ax.plot(xs, ys, color=_INTRA_COLOR, linewidth=1.0, label="loss")
    probes = [(m["iteration"], m["train_accuracy"]) for m in metrics
              if m.get("type") == "accuracy"]
    if probes:
        ax2 = ax.twinx()
        xs, ys = zip(*probes)
        ax2.plot(xs, ys, color=_PREDICTED_COLOR, marker="o", linewidth=1.0,
                 label="train accuracy")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1.05)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean batch loss")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path)


def ablation_bars_figure(rows, path) -> None:
    """Grouped accuracy bars per variant (overall / relational / duplicates)."""
    fig = _new_figure(7.5, 4.2)
    ax = fig.add_subplot()
    names = [r.variant for r in rows]
    series = [
        ("overall", [r.overall for r in rows], _INTRA_COLOR),
        ("relational", [r.relational for r in rows], _BOX_FILL),
        ("identical duplicates", [r.identical_dup for r in rows],
         _INTER_COLOR),
    ]
    x = np.arange(len(names))
    width = 0.27
    for offset, (label, values, color) in enumerate(series):
        vals = [0.0 if v is None else v for v in values]
        ax.bar(x + (offset - 1) * width, vals, width, label=label,
               color=color)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("variant comparison")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)


def token_attention_figure(tokens: list[str], token_attention: dict,
                           path) -> None:
    """Heatmap of the three per-component token-attention rows."""
    names = list(token_attention)
    matrix = np.vstack([np.asarray(token_attention[name]).reshape(-1)
                        for name in names])
    fig = _new_figure(max(4.0, 0.6 * len(tokens) + 2), 2.8)
    ax = fig.add_subplot()
    image = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xticks(range(len(tokens)))
    ax.set_xticklabels(tokens, rotation=45, ha="right")
    ax.set_title("token attention by component")
    fig.colorbar(image, ax=ax, fraction=0.035)
    fig.tight_layout()
    fig.savefig(path)
