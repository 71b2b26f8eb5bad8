"""Run manifests and the end-to-end pipeline.

A manifest is a JSON file; relative paths are resolved against the
manifest's directory.  Example::

    {
      "inputs": {"embeddings": "emb.csv", "labels": "labels.csv"},
      "dim": 512,
      "geometry": {"full_width": 3328, "full_height": 3328, "det_width": 416, "det_height": 416},
      "pad_frac": 0.1,
      "reduce": {"method": "pca", "d_final": 3, "k_nn": 10, "disconnect": "error"},
      "metric": {"kind": "euclidean"},
      "cluster": {"k": 10, "restarts": 8},
      "seed": 42,
      "output_dir": "run"
    }
"""

import csv
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cluster import kmeans_euclidean, kmeans_geodesic, save_assignments, select_k_elbow
from .errors import ManifestError, PalynoError
from .geometry import SlideGeometry, centered_crop, read_boxes, scale_box
from .ingest import FLOAT_FMT, LabelVector, parse_embedding_table, parse_labels, read_matrix_csv, resolve, write_matrix_csv
from .manifold import reduce, save_latent
from .render import axis_traversal, cluster_report, render_geodesics_svg, render_latent_svg
from .riemann import (
    DEFAULT_EPS_G,
    DEFAULT_MAX_ITER,
    DEFAULT_RIDGE,
    DEFAULT_SEGMENTS,
    DEFAULT_TOL,
    IdentityMap,
    MetricField,
    fit_rbf_decoder,
    geodesic_distance_matrix,
    solve_geodesic,
)
from .stats import evaluate

log = logging.getLogger(__name__)

SECTIONS = {
    "inputs": {"embeddings", "labels", "boxes", "images"},
    "reduce": {"method", "d_final", "k_nn", "disconnect"},
    "metric": {"kind", "n_points", "tol", "max_iter", "subsample", "decoder"},
    "decoder": {"kind", "m", "sigma", "ridge", "eps_g"},
    "cluster": {"k", "restarts", "select_k"},
    "report": {"sample_per_cluster", "traversal_count", "n_geodesics"},
}
TOP_LEVEL = {"inputs", "dim", "geometry", "pad_frac", "reduce", "metric", "cluster", "report", "seed", "n_jobs", "output_dir"}


@dataclass
class DecoderParams:
    kind: str = "rbf"
    m: int = None
    sigma: float = None
    ridge: float = DEFAULT_RIDGE
    eps_g: float = DEFAULT_EPS_G


@dataclass
class RunManifest:
    embeddings: Path
    base_dir: Path = Path(".")
    labels: Path = None
    boxes: Path = None
    images: dict = field(default_factory=dict)
    dim: int = 512
    geometry: SlideGeometry = field(default_factory=SlideGeometry)
    pad_frac: float = 0.1
    method: str = "pca"
    d_final: int = 3
    k_nn: int = 10
    disconnect: str = "error"
    metric: str = "euclidean"
    n_points: int = DEFAULT_SEGMENTS
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    subsample: int = None
    decoder: DecoderParams = field(default_factory=DecoderParams)
    k: int = 10
    restarts: int = 8
    select_k: tuple = None
    sample_per_cluster: int = 4
    traversal_count: int = 8
    n_geodesics: int = 5
    seed: int = 42
    n_jobs: int = 1
    output_dir: Path = Path("run")

    def validate(self):
        """Check referenced files and parameter domains; raises ManifestError."""
        for name in ("embeddings", "labels", "boxes"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ManifestError(f"{name} file not found: {p}")
        checks = [
            (self.method in ("pca", "isomap"), f"reduce.method must be pca or isomap, got {self.method!r}"),
            (self.disconnect in ("error", "largest"), "reduce.disconnect must be error or largest"),
            (self.metric in ("euclidean", "geodesic"), f"metric.kind must be euclidean or geodesic, got {self.metric!r}"),
            (self.decoder.kind in ("rbf", "identity"), "metric.decoder.kind must be rbf or identity"),
            (self.d_final >= 1, "d_final must be >= 1"),
            (self.k_nn >= 1, "k_nn must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (self.restarts >= 1, "restarts must be >= 1"),
            (self.n_points >= 2, "n_points must be >= 2"),
            (self.tol > 0, "tol must be positive"),
            (self.max_iter >= 1, "max_iter must be >= 1"),
            (self.pad_frac >= 0, "pad_frac must be >= 0"),
            (self.sample_per_cluster >= 1, "sample_per_cluster must be >= 1"),
            (self.subsample is None or self.subsample >= 2, "subsample must be >= 2"),
            (self.decoder.ridge >= 0 and self.decoder.eps_g >= 0, "ridge and eps_g must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ManifestError(msg)
        if self.select_k is not None and (len(self.select_k) != 2 or self.select_k[0] < 2):
            raise ManifestError("cluster.select_k must be [k_min, k_max] with k_min >= 2")
        return self

    def to_dict(self):
        d = asdict(self)
        d["geometry"] = asdict(self.geometry)
        for key, value in d.items():
            if isinstance(value, Path):
                d[key] = str(value)
        d["select_k"] = list(self.select_k) if self.select_k else None
        d.pop("base_dir")
        return d


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ManifestError(f"{section} must be an object")
    unknown = set(data) - allowed
    if unknown:
        raise ManifestError(f"unknown keys in {section}: {sorted(unknown)}")


def manifest_from_dict(data, base_dir="."):
    base = Path(base_dir)
    _check_keys("manifest", data, TOP_LEVEL)
    inputs = data.get("inputs", {})
    _check_keys("inputs", inputs, SECTIONS["inputs"])
    if "embeddings" not in inputs:
        raise ManifestError("inputs.embeddings is required")
    sec = {}
    for name in ("reduce", "metric", "cluster", "report"):
        sec[name] = data.get(name, {})
        _check_keys(name, sec[name], SECTIONS[name])
    dec = sec["metric"].get("decoder", {})
    _check_keys("metric.decoder", dec, SECTIONS["decoder"])

    def path(p):
        return None if p is None else resolve(base, p)

    images = inputs.get("images") or {}
    if isinstance(images, str):
        images = _read_image_map(resolve(base, images))
    try:
        geometry = SlideGeometry(**data.get("geometry", {}))
    except TypeError as exc:
        raise ManifestError(f"geometry: {exc}") from None
    red, met, clu, rep = sec["reduce"], sec["metric"], sec["cluster"], sec["report"]
    m = RunManifest(
        embeddings=path(inputs["embeddings"]),
        base_dir=base,
        labels=path(inputs.get("labels")),
        boxes=path(inputs.get("boxes")),
        images=images,
        dim=data.get("dim", 512),
        geometry=geometry,
        pad_frac=float(data.get("pad_frac", 0.1)),
        method=red.get("method", "pca"),
        d_final=int(red.get("d_final", 3)),
        k_nn=int(red.get("k_nn", 10)),
        disconnect=red.get("disconnect", "error"),
        metric=met.get("kind", "euclidean"),
        n_points=int(met.get("n_points", DEFAULT_SEGMENTS)),
        tol=float(met.get("tol", DEFAULT_TOL)),
        max_iter=int(met.get("max_iter", DEFAULT_MAX_ITER)),
        subsample=met.get("subsample"),
        decoder=DecoderParams(**dec),
        k=int(clu.get("k", 10)),
        restarts=int(clu.get("restarts", 8)),
        select_k=tuple(clu["select_k"]) if clu.get("select_k") else None,
        sample_per_cluster=int(rep.get("sample_per_cluster", 4)),
        traversal_count=int(rep.get("traversal_count", 8)),
        n_geodesics=int(rep.get("n_geodesics", 5)),
        seed=int(data.get("seed", 42)),
        n_jobs=int(data.get("n_jobs", 1)),
        output_dir=resolve(base, data.get("output_dir", "run")),
    )
    return m


def load_manifest(path, validate=True):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    m = manifest_from_dict(data, path.parent)
    return m.validate() if validate else m


def _read_image_map(path):
    with open(path, newline="") as fh:
        return {row["id"]: row["path"] for row in csv.DictReader(fh)}


# artifact helpers ----------------------------------------------------------


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_distance_matrix(path, ids, dist):
    write_matrix_csv(path, ids, dist, header=["id"] + list(ids))


def load_distance_matrix(path):
    ids, dist, header = read_matrix_csv(path)
    if header[1:] != ids:
        raise ManifestError(f"{path}: column ids do not match row ids")
    return ids, dist


def save_representatives(path, clustering, coords, ids):
    reps = clustering.representative_coords(coords)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "medoid_id"] + [f"c{j}" for j in range(reps.shape[1])])
        for c, row in enumerate(reps):
            medoid = ids[clustering.representatives[c]] if clustering.metric == "geodesic" else ""
            w.writerow([c, medoid] + [format(float(v), FLOAT_FMT) for v in row])


def load_representatives(path):
    """Returns (coords k x d, medoid ids or None)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    coords = np.array([[float(v) for v in r[2:]] for r in rows])
    medoids = [r[1] for r in rows]
    return coords, (medoids if all(medoids) else None)


def load_assignments(path):
    return parse_labels(path, column="cluster")


def save_curves(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = curves[0].points.shape[1] if curves else 0
        w.writerow(["curve", "step"] + [f"c{j}" for j in range(d)])
        for ci, c in enumerate(curves):
            for s, p in enumerate(c.points):
                w.writerow([ci, s] + [format(float(v), FLOAT_FMT) for v in p])


def load_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    curves = {}
    for r in rows:
        curves.setdefault(int(r[0]), []).append([float(v) for v in r[2:]])
    return [np.array(curves[k]) for k in sorted(curves)]


def build_metric(m: RunManifest, latent, embeddings):
    """Metric field from the manifest's decoder settings; returns (MetricField, description)."""
    if m.decoder.kind == "identity":
        return MetricField(IdentityMap(latent.dim), m.decoder.eps_g), {"kind": "identity"}
    dec = fit_rbf_decoder(latent, embeddings, m.decoder.m, m.decoder.sigma, m.decoder.ridge, seed=m.seed)
    return MetricField(dec, m.decoder.eps_g), dec.describe()


def subsample_latent(latent, size, seed):
    if size is None or size >= latent.n:
        return latent
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(latent.n, size=size, replace=False))
    return latent.subset(keep)


# pipeline ------------------------------------------------------------------


class _Stage:
    def __init__(self, name, timings):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if isinstance(exc, PalynoError) and not getattr(exc, "stage", None):
            exc.stage = self.name
            exc.args = (f"[{self.name}] {exc}",)
        return False


def run_pipeline(manifest: RunManifest, output_dir=None) -> Path:
    """Execute ingest -> reduce -> (decoder, geodesic distances) -> cluster -> reports.

    Every artifact is written under the output directory together with
    ``run_log.json``; rerunning the same manifest reproduces all artifacts
    byte for byte (only the timestamps and timings in the log change).
    """
    manifest.validate()
    out = Path(output_dir or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    started = datetime.now(timezone.utc).isoformat()
    artifacts = []

    def emit(name):
        artifacts.append(name)
        return out / name

    with _Stage("ingest", timings):
        emb = parse_embedding_table(manifest.embeddings, manifest.dim, source_tag=manifest.embeddings.name)
        labels = parse_labels(manifest.labels) if manifest.labels else None
        summary = {"n": emb.n, "dim": emb.dim, "source": emb.source_tag, "scale": manifest.geometry.scale}
        if manifest.boxes:
            crops = [
                (b.index, centered_crop(scale_box(b, manifest.geometry), manifest.geometry, manifest.pad_frac))
                for b in read_boxes(manifest.boxes)
            ]
            with open(emit("crops.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "x0", "y0", "x1", "y1"])
                for idx, c in crops:
                    w.writerow([idx, *c.as_tuple()])
            summary["n_crops"] = len(crops)
        write_json(emit("ingest.json"), summary)

    with _Stage("reduce", timings):
        latent = reduce(emb, manifest.method, manifest.d_final, manifest.k_nn, manifest.disconnect)
        save_latent(emit("latent.csv"), latent)
        write_json(emit("reduction.json"), latent.model)

    dist = None
    metric = None
    if manifest.metric == "geodesic":
        with _Stage("geodesic", timings):
            latent = subsample_latent(latent, manifest.subsample, manifest.seed)
            metric, desc = build_metric(manifest, latent, emb)
            dist, report = geodesic_distance_matrix(
                metric, latent, manifest.n_points, manifest.tol, manifest.max_iter, manifest.n_jobs
            )
            report["decoder"] = desc
            report["ids"] = list(latent.ids)
            save_distance_matrix(emit("geodesic_distances.csv"), latent.ids, dist)
            write_json(emit("geodesic_report.json"), report)

    with _Stage("cluster", timings):
        data = dist if dist is not None else latent.coords
        k = manifest.k
        if manifest.select_k:
            k_min, k_max = manifest.select_k
            sel = select_k_elbow(data, k_min, k_max, manifest.metric, manifest.seed, manifest.restarts, manifest.n_jobs)
            write_json(emit("k_selection.json"), sel.to_dict())
            k = sel.chosen_k
        if manifest.metric == "geodesic":
            clustering = kmeans_geodesic(dist, k, manifest.seed, manifest.restarts, manifest.n_jobs)
        else:
            clustering = kmeans_euclidean(latent, k, manifest.seed, manifest.restarts, manifest.n_jobs)
        save_assignments(emit("assignments.csv"), latent.ids, clustering)
        save_representatives(emit("representatives.csv"), clustering, latent.coords, latent.ids)
        write_json(emit("clustering.json"), {"k": clustering.k, "metric": clustering.metric, "objective": clustering.objective, "seed": clustering.seed})

    with _Stage("render", timings):
        if latent.dim in (2, 3):
            emit("latent.svg").write_text(render_latent_svg(latent, clustering))
            if metric is not None and manifest.n_geodesics > 0:
                rng = np.random.default_rng(manifest.seed)
                curves = []
                for _ in range(manifest.n_geodesics):
                    i, j = rng.choice(latent.n, size=2, replace=False)
                    curves.append(
                        solve_geodesic(metric, latent.coords[i], latent.coords[j], manifest.n_points, manifest.tol, manifest.max_iter)
                    )
                save_curves(emit("geodesic_curves.csv"), curves)
                emit("geodesics.svg").write_text(render_geodesics_svg(latent, curves))
        rep = cluster_report(clustering, latent.ids, manifest.sample_per_cluster, manifest.seed, manifest.images)
        emit("report.html").write_text(rep.to_html())
        emit("report.csv").write_text(rep.to_csv())
        count = min(manifest.traversal_count, latent.n)
        write_json(
            emit("traversal.json"),
            {f"axis{j}": axis_traversal(latent, j, count) for j in range(latent.dim)},
        )

    if labels is not None:
        with _Stage("eval", timings):
            system = LabelVector(latent.ids, clustering.assignments.tolist())
            k_eval = max(clustering.k, max(labels.labels, default=0) + 1)
            write_json(emit("eval.json"), evaluate(labels, system, k_eval, best_match=True))

    write_json(
        out / "run_log.json",
        {
            "manifest": manifest.to_dict(),
            "seed": manifest.seed,
            "k_used": int(clustering.k),
            "artifacts": artifacts,
            "versions": {
                "palyno": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "started_at": started,
            "timings": timings,
        },
    )
    return out

