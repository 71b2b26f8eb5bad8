"""Deterministic SVG scenes and plain-text reports.

All output is a pure function of the inputs and view parameters; numbers are
written with fixed precision so reruns are byte-identical.
"""

import csv
import html
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NeedsProjection, ValidationError

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]
DOT_COLOR = "#1f77b4"
CURVE_COLOR = "#d62728"
VIEWBOX = 1000


@dataclass(frozen=True)
class View:
    """Orthographic camera: azimuth about the z axis, then elevation, in degrees."""

    azimuth: float = 35.0
    elevation: float = 25.0
    margin: float = 40.0
    radius_min: float = 2.5
    radius_max: float = 8.0
    radius_2d: float = 5.0


def _project(coords, view):
    """Screen (x, y) and depth for 2-D or 3-D coordinates."""
    coords = np.asarray(coords, dtype=float)
    d = coords.shape[1]
    if d > 3:
        raise NeedsProjection(f"cannot draw {d}-D coordinates; reduce to 2 or 3 dimensions first")
    if d < 2:
        raise ValidationError("need at least 2 latent dimensions to draw")
    if d == 2:
        return coords.copy(), None
    az, el = math.radians(view.azimuth), math.radians(view.elevation)
    ca, sa, ce, se = math.cos(az), math.sin(az), math.cos(el), math.sin(el)
    basis = np.array(
        [
            [-sa, ca, 0.0],
            [-se * ca, -se * sa, ce],
            [ce * ca, ce * sa, se],
        ]
    )
    p = coords @ basis.T
    return p[:, :2], p[:, 2]


class _Canvas:
    """Uniform scale from scene bounds onto the fixed viewBox (y axis flipped)."""

    def __init__(self, xy_blocks, margin):
        allxy = np.vstack([b for b in xy_blocks if len(b)])
        lo, hi = allxy.min(axis=0), allxy.max(axis=0)
        span = float(max(hi - lo)) or 1.0
        self.scale = (VIEWBOX - 2 * margin) / span
        self.offset = margin + 0.5 * ((VIEWBOX - 2 * margin) - (hi - lo) * self.scale)
        self.lo = lo

    def __call__(self, xy):
        xy = np.atleast_2d(xy)
        sx = self.offset[0] + (xy[:, 0] - self.lo[0]) * self.scale
        sy = VIEWBOX - (self.offset[1] + (xy[:, 1] - self.lo[1]) * self.scale)
        return np.stack([sx, sy], axis=1)


def _f(v):
    return f"{v:.2f}"


def _header(title):
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {VIEWBOX} {VIEWBOX}" '
        f'width="{VIEWBOX}" height="{VIEWBOX}">',
        f"<title>{html.escape(title)}</title>",
        f'<rect x="0" y="0" width="{VIEWBOX}" height="{VIEWBOX}" fill="#ffffff"/>',
    ]


def _radii(depth, n, view):
    if depth is None:
        return np.full(n, view.radius_2d)
    if n == 1:
        return np.full(1, view.radius_max)
    ranks = np.empty(n)
    ranks[np.argsort(depth, kind="stable")] = np.arange(n)
    return view.radius_min + (view.radius_max - view.radius_min) * ranks / (n - 1)


def render_latent_svg(latent, clustering, view: View = View()) -> str:
    """Scatter of latent points colored by cluster, with a line from each point to its representative.

    In 3-D the point radius grows with depth percentile (larger = nearer the viewer).
    """
    coords = latent.coords if hasattr(latent, "coords") else np.asarray(latent, dtype=float)
    labels = np.asarray(clustering.assignments)
    if labels.shape[0] != coords.shape[0]:
        raise ValidationError("assignments do not match the latent points")
    ids = list(getattr(latent, "ids", range(coords.shape[0])))
    reps = np.asarray(clustering.representative_coords(coords), dtype=float)
    xy, depth = _project(coords, view)
    rxy, _ = _project(reps, view)
    canvas = _Canvas([xy, rxy], view.margin)
    sp, sr = canvas(xy), canvas(rxy)
    radii = _radii(depth, len(ids), view)

    out = _header(f"latent space, k={clustering.k}, metric={clustering.metric}")
    out.append('<g id="centroid-lines" stroke-width="0.8" stroke-opacity="0.6">')
    for i, lab in enumerate(labels):
        out.append(
            f'<line x1="{_f(sp[i, 0])}" y1="{_f(sp[i, 1])}" x2="{_f(sr[lab, 0])}" '
            f'y2="{_f(sr[lab, 1])}" stroke="{PALETTE[lab % len(PALETTE)]}"/>'
        )
    out.append("</g>")
    out.append('<g id="points" stroke="#000000" stroke-width="0.3">')
    order = np.argsort(depth, kind="stable") if depth is not None else range(len(ids))
    for i in order:
        lab = labels[i]
        out.append(
            f'<circle cx="{_f(sp[i, 0])}" cy="{_f(sp[i, 1])}" r="{_f(radii[i])}" '
            f'fill="{PALETTE[lab % len(PALETTE)]}" data-id="{html.escape(str(ids[i]))}" '
            f'data-cluster="{int(lab)}"/>'
        )
    out.append("</g>")
    out.append('<g id="representatives" stroke="#000000" stroke-width="1.5">')
    for c, (x, y) in enumerate(sr):
        out.append(
            f'<rect x="{_f(x - 6)}" y="{_f(y - 6)}" width="12" height="12" '
            f'fill="{PALETTE[c % len(PALETTE)]}" data-cluster="{c}"/>'
        )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_geodesics_svg(latent, curves, view: View = View()) -> str:
    """Embeddings as blue dots with geodesics overlaid as red polylines."""
    coords = latent.coords if hasattr(latent, "coords") else np.asarray(latent, dtype=float)
    polys = [np.asarray(getattr(c, "points", c), dtype=float) for c in curves]
    for p in polys:
        if p.ndim != 2 or p.shape[1] != coords.shape[1]:
            raise ValidationError("curve dimension does not match the latent points")
    xy, depth = _project(coords, view)
    pxy = [_project(p, view)[0] for p in polys]
    canvas = _Canvas([xy] + pxy, view.margin)
    sp = canvas(xy)
    radii = _radii(depth, coords.shape[0], view) * 0.7

    out = _header(f"geodesics ({len(polys)} curves)")
    out.append(f'<g id="points" fill="{DOT_COLOR}">')
    order = np.argsort(depth, kind="stable") if depth is not None else range(coords.shape[0])
    for i in order:
        out.append(f'<circle cx="{_f(sp[i, 0])}" cy="{_f(sp[i, 1])}" r="{_f(radii[i])}"/>')
    out.append("</g>")
    out.append(f'<g id="geodesics" fill="none" stroke="{CURVE_COLOR}" stroke-width="2">')
    for p in pxy:
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in canvas(p))
        out.append(f'<polyline points="{pts}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass
class ClusterReport:
    samples: dict
    sizes: dict
    image_paths: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cluster", "size", "id", "image"])
        for c, ids in self.samples.items():
            for id_ in ids:
                w.writerow([c, self.sizes[c], id_, self.image_paths.get(id_, "")])
        return buf.getvalue()

    def to_html(self):
        lines = [
            "<!DOCTYPE html>",
            '<html><head><meta charset="utf-8"><title>Cluster membership</title></head><body>',
            "<h1>Cluster membership</h1>",
        ]
        for c, ids in self.samples.items():
            lines.append(f"<h2>Cluster {c} ({self.sizes[c]} members, {len(ids)} sampled)</h2>")
            lines.append("<ul>")
            for id_ in ids:
                path = self.image_paths.get(id_)
                label = html.escape(id_)
                if path:
                    src = html.escape(str(path), quote=True)
                    lines.append(f'<li><a href="{src}"><img src="{src}" alt="{label}" height="96"></a> {label}</li>')
                else:
                    lines.append(f"<li>{label}</li>")
            lines.append("</ul>")
        lines.append("</body></html>")
        return "\n".join(lines) + "\n"


def cluster_report(clustering, ids, sample_per_cluster: int = 4, seed: int = 42, image_paths=None) -> ClusterReport:
    """Seeded random sample of member ids per cluster (small clusters are listed in full)."""
    if sample_per_cluster < 1:
        raise ValidationError("sample_per_cluster must be >= 1")
    ids = list(ids)
    labels = np.asarray(clustering.assignments)
    if len(ids) != labels.shape[0]:
        raise ValidationError("ids do not match the clustering")
    rng = np.random.default_rng(seed)
    samples, sizes = {}, {}
    for c in range(clustering.k):
        members = np.flatnonzero(labels == c)
        sizes[c] = int(members.size)
        if members.size > sample_per_cluster:
            members = np.sort(rng.choice(members, size=sample_per_cluster, replace=False))
        samples[c] = [ids[i] for i in members]
    return ClusterReport(samples, sizes, dict(image_paths or {}))


def axis_traversal(latent, component_index: int, count: int) -> list:
    """Ids at evenly spaced nearest-rank quantiles of one latent coordinate, ascending.

    Quantile ``p = j / (count - 1)`` picks sorted position ``max(ceil(p n), 1) - 1``;
    a single pick uses the median (``p = 0.5``).
    """
    coords = latent.coords
    n, d = coords.shape
    if not 0 <= component_index < d:
        raise ValidationError(f"component_index {component_index} outside 0..{d - 1}")
    if not 1 <= count <= n:
        raise ValidationError(f"count {count} outside 1..{n}")
    order = np.lexsort((np.arange(n), coords[:, component_index]))
    if count == 1:
        ranks = [-(-n // 2)]
    else:
        # exact integer ceil(j * n / (count - 1))
        ranks = [-(-j * n // (count - 1)) for j in range(count)]
    return [latent.ids[order[max(r, 1) - 1]] for r in ranks]
