"""``palyno`` command line.

Every subcommand accepts ``--manifest``; file inputs then default to the
manifest's inputs and to artifacts in its output directory, and parameters
default to the manifest's values.  Exit codes: 0 ok, 2 validation error,
3 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .cluster import kmeans_euclidean, kmeans_geodesic, save_assignments, select_k_elbow
from .errors import ManifestError, NumericalError, PalynoError, ValidationError
from .geometry import centered_crop, read_boxes, scale_box
from .ingest import parse_embedding_table, parse_labels
from .manifold import load_latent, reduce, save_latent
from .pipeline import (
    RunManifest,
    build_metric,
    load_assignments,
    load_curves,
    load_distance_matrix,
    load_manifest,
    load_representatives,
    run_pipeline,
    save_curves,
    save_distance_matrix,
    save_representatives,
    subsample_latent,
    write_json,
)
from .render import cluster_report, render_geodesics_svg, render_latent_svg
from .riemann import IdentityMap, MetricField, SphereChart, geodesic_distance_matrix, solve_geodesic
from .stats import evaluate

log = logging.getLogger("palyno")


def _manifest(args):
    if getattr(args, "manifest", None):
        return load_manifest(args.manifest)
    return None


def _out_dir(args, m):
    out = Path(args.out) if args.out else (m.output_dir if m else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick(value, m, attr, default):
    if value is not None:
        return value
    if m is not None:
        return getattr(m, attr)
    return default


def _need(path, what):
    if path is None:
        raise ValidationError(f"{what} is required (pass it explicitly or via --manifest)")
    return Path(path)


def _artifact(explicit, m, name):
    if explicit:
        return Path(explicit)
    return m.output_dir / name if m else None


def _coords_arg(text, what):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ValidationError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _k_range(text):
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise ValidationError(f"--select-k expects MIN..MAX, got {text!r}") from None


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# subcommands -----------------------------------------------------------------


def cmd_ingest(args):
    m = _manifest(args)
    if m is None:
        raise ManifestError("ingest needs --manifest")
    out = _out_dir(args, m)
    emb = parse_embedding_table(m.embeddings, m.dim)
    summary = {"n": emb.n, "dim": emb.dim, "scale": m.geometry.scale}
    if m.labels:
        summary["n_labels"] = len(parse_labels(m.labels))
    if m.boxes:
        rows = ["index,x0,y0,x1,y1"]
        for b in read_boxes(m.boxes):
            c = centered_crop(scale_box(b, m.geometry), m.geometry, m.pad_frac)
            rows.append(",".join(str(v) for v in (b.index, *c.as_tuple())))
        (out / "crops.csv").write_text("\n".join(rows) + "\n")
        summary["n_crops"] = len(rows) - 1
    write_json(out / "ingest.json", summary)
    _print_json(summary)


def cmd_reduce(args):
    m = _manifest(args)
    out = _out_dir(args, m)
    emb_path = _need(args.embeddings or (m.embeddings if m else None), "--embeddings")
    emb = parse_embedding_table(emb_path, m.dim if m else None)
    latent = reduce(
        emb,
        _pick(args.method, m, "method", "pca"),
        _pick(args.d_final, m, "d_final", 3),
        _pick(args.k_nn, m, "k_nn", 10),
        _pick(args.disconnect, m, "disconnect", "error"),
    )
    save_latent(out / "latent.csv", latent)
    write_json(out / "reduction.json", latent.model)
    _print_json(latent.model)


def _metric_for(args, m, latent):
    kind = args.decoder or (m.decoder.kind if m else "rbf")
    eps = args.eps_g if args.eps_g is not None else (m.decoder.eps_g if m else 1e-9)
    if kind == "identity":
        return MetricField(IdentityMap(latent.dim), eps), {"kind": "identity"}
    if kind == "sphere-chart":
        return MetricField(SphereChart(), eps), {"kind": "sphere-chart"}
    emb = parse_embedding_table(_need(args.embeddings or (m.embeddings if m else None), "--embeddings"))
    base = m or RunManifest(embeddings=None)
    base.decoder.kind = "rbf"
    for attr, value in (("m", args.centers), ("sigma", args.sigma), ("ridge", args.ridge)):
        if value is not None:
            setattr(base.decoder, attr, value)
    base.decoder.eps_g = eps
    base.seed = args.seed
    return build_metric(base, latent, emb)


def cmd_gdist(args):
    m = _manifest(args)
    out = _out_dir(args, m)
    latent = load_latent(_need(_artifact(args.latent, m, "latent.csv"), "--latent"))
    latent = subsample_latent(latent, _pick(args.subsample, m, "subsample", None), args.seed)
    metric, desc = _metric_for(args, m, latent)
    dist, report = geodesic_distance_matrix(
        metric,
        latent,
        _pick(args.n_points, m, "n_points", 64),
        _pick(args.tol, m, "tol", 1e-6),
        _pick(args.max_iter, m, "max_iter", 500),
        _pick(args.n_jobs, m, "n_jobs", 1),
    )
    report["decoder"] = desc
    report["ids"] = list(latent.ids)
    save_distance_matrix(out / "geodesic_distances.csv", latent.ids, dist)
    write_json(out / "geodesic_report.json", report)
    _print_json({k: report[k] for k in ("n_points", "n_diverged", "n_unconverged", "max_orientation_gap")})


def cmd_geodesic(args):
    m = _manifest(args)
    out = _out_dir(args, m)
    latent = None
    if args.from_id or args.to_id or (args.decoder or (m.decoder.kind if m else "rbf")) == "rbf":
        latent = load_latent(_need(_artifact(args.latent, m, "latent.csv"), "--latent"))
    lookup = {id_: i for i, id_ in enumerate(latent.ids)} if latent else {}

    def endpoint(id_, coords, which):
        if id_:
            if id_ not in lookup:
                raise ValidationError(f"unknown id {id_!r}")
            return latent.coords[lookup[id_]]
        if coords:
            return _coords_arg(coords, which)
        raise ValidationError(f"give --{which} or --{which}-coords")

    a = endpoint(args.from_id, args.from_coords, "from")
    b = endpoint(args.to_id, args.to_coords, "to")
    if args.decoder == "sphere-chart" and latent is None:
        metric, desc = MetricField(SphereChart(), args.eps_g or 1e-9), {"kind": "sphere-chart"}
    elif latent is None:
        metric, desc = MetricField(IdentityMap(a.shape[0]), args.eps_g or 1e-9), {"kind": "identity"}
    else:
        metric, desc = _metric_for(args, m, latent)
    if a.shape != b.shape or a.shape[0] != metric.dim:
        raise ValidationError(f"endpoints must both have dimension {metric.dim}")
    curve = solve_geodesic(
        metric,
        a,
        b,
        _pick(args.n_points, m, "n_points", 64),
        _pick(args.tol, m, "tol", 1e-6),
        _pick(args.max_iter, m, "max_iter", 500),
    )
    save_curves(out / "geodesic.csv", [curve])
    summary = curve.summary()
    summary["decoder"] = desc
    write_json(out / "geodesic.json", summary)
    _print_json(summary)


def cmd_cluster(args):
    m = _manifest(args)
    out = _out_dir(args, m)
    metric = _pick(args.metric, m, "metric", "euclidean")
    k = _pick(args.k, m, "k", 10)
    restarts = _pick(args.restarts, m, "restarts", 8)
    n_jobs = _pick(args.n_jobs, m, "n_jobs", 1)
    select = _k_range(args.select_k) if args.select_k else (m.select_k if m else None)
    latent = load_latent(_need(_artifact(args.latent, m, "latent.csv"), "--latent"))
    if metric == "geodesic":
        ids, dist = load_distance_matrix(_need(_artifact(args.distances, m, "geodesic_distances.csv"), "--distances"))
        lookup = {id_: i for i, id_ in enumerate(latent.ids)}
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise ValidationError(f"{len(missing)} distance-matrix ids missing from the latent file")
        latent = latent.subset([lookup[i] for i in ids])
        data = dist
    else:
        data = latent.coords
    result = {}
    if select:
        sel = select_k_elbow(data, select[0], select[1], metric, args.seed, restarts, n_jobs)
        write_json(out / "k_selection.json", sel.to_dict())
        k = sel.chosen_k
        result["k_selection"] = sel.to_dict()
    if metric == "geodesic":
        cl = kmeans_geodesic(data, k, args.seed, restarts, n_jobs)
    else:
        cl = kmeans_euclidean(data, k, args.seed, restarts, n_jobs)
    save_assignments(out / "assignments.csv", latent.ids, cl)
    save_representatives(out / "representatives.csv", cl, latent.coords, latent.ids)
    result.update(k=cl.k, metric=cl.metric, objective=cl.objective)
    write_json(out / "clustering.json", {"k": cl.k, "metric": cl.metric, "objective": cl.objective, "seed": cl.seed})
    _print_json(result)


def cmd_eval(args):
    m = _manifest(args)
    human = parse_labels(_need(args.human or (m.labels if m else None), "--human"))
    system = load_assignments(_need(_artifact(args.system, m, "assignments.csv"), "--system"))
    k = args.k if args.k is not None else max(human.labels + system.labels, default=0) + 1
    result = evaluate(human, system, k, best_match=args.best_match)
    if args.out:
        write_json(args.out, result)
    _print_json(result)


class _LoadedClustering:
    """Assignments + representatives reloaded from CSV, shaped like a Clustering."""

    def __init__(self, labels, reps, medoids, ids):
        self.assignments = np.asarray(labels)
        self.metric = "geodesic" if medoids else "euclidean"
        if medoids:
            lookup = {id_: i for i, id_ in enumerate(ids)}
            self.representatives = np.array([lookup[mid] for mid in medoids])
        else:
            self.representatives = reps
        self.k = len(reps)

    def representative_coords(self, coords):
        if self.metric == "geodesic":
            return np.asarray(coords)[self.representatives]
        return self.representatives


def _load_clustering(args, m, latent):
    asg = load_assignments(_need(_artifact(args.assignments, m, "assignments.csv"), "--assignments"))
    by_id = asg.as_dict()
    missing = [i for i in latent.ids if i not in by_id]
    if missing:
        latent = latent.subset([i for i, id_ in enumerate(latent.ids) if id_ in by_id])
    labels = [by_id[i] for i in latent.ids]
    rep_path = _artifact(args.representatives, m, "representatives.csv")
    if rep_path is not None and rep_path.is_file():
        reps, medoids = load_representatives(rep_path)
    else:
        k = max(labels) + 1
        lab = np.asarray(labels)
        reps = np.stack([latent.coords[lab == c].mean(axis=0) for c in range(k)])
        medoids = None
    return latent, _LoadedClustering(labels, reps, medoids, latent.ids)


def cmd_plot(args):
    m = _manifest(args)
    out = _out_dir(args, m)
    latent = load_latent(_need(_artifact(args.latent, m, "latent.csv"), "--latent"))
    written = []
    if args.curves:
        curves = load_curves(args.curves)
        (out / "geodesics.svg").write_text(render_geodesics_svg(latent, curves))
        written.append("geodesics.svg")
    else:
        latent, cl = _load_clustering(args, m, latent)
        (out / "latent.svg").write_text(render_latent_svg(latent, cl))
        written.append("latent.svg")
    _print_json({"written": written})


def cmd_report(args):
    m = _manifest(args)
    out = _out_dir(args, m)
    asg = load_assignments(_need(_artifact(args.assignments, m, "assignments.csv"), "--assignments"))
    cl = SimpleNamespace(assignments=np.asarray(asg.labels), k=max(asg.labels, default=-1) + 1)
    images = m.images if m else {}
    rep = cluster_report(cl, asg.ids, _pick(args.sample, m, "sample_per_cluster", 4), args.seed, images)
    (out / "report.html").write_text(rep.to_html())
    (out / "report.csv").write_text(rep.to_csv())
    _print_json({"clusters": rep.sizes})


def cmd_run(args):
    m = _manifest(args)
    if m is None:
        raise ManifestError("run needs --manifest")
    if args.n_jobs is not None:
        m.n_jobs = args.n_jobs
    if args.seed_given:
        m.seed = args.seed
    out = run_pipeline(m, args.out)
    _print_json({"output_dir": str(out)})


# parser -----------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--manifest", help="run manifest (JSON)")
    p.add_argument("--out", help="output directory (default: the manifest's output_dir)")


def _add_geodesic_opts(p):
    p.add_argument("--latent", help="latent coordinates CSV (id,c0,...)")
    p.add_argument("--embeddings", help="embeddings CSV, needed to fit the RBF decoder")
    p.add_argument("--decoder", choices=["rbf", "identity", "sphere-chart"])
    p.add_argument("--centers", type=int, help="number of RBF centers (default min(n, 200))")
    p.add_argument("--sigma", type=float, help="RBF bandwidth (default: median latent distance)")
    p.add_argument("--ridge", type=float)
    p.add_argument("--eps-g", type=float, help="metric regularizer added to J^T J")
    p.add_argument("--n-points", type=int, help="curve segments (default 64)")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="palyno", description="Latent-space analysis of microscopy-image embeddings.")
    parser.add_argument("--seed", type=int, default=None, help="global seed (default 42)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and compute crop rectangles")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("reduce", help="PCA or Isomap reduction")
    _add_common(p)
    p.add_argument("--embeddings")
    p.add_argument("--method", choices=["pca", "isomap"])
    p.add_argument("--d-final", type=int)
    p.add_argument("--k-nn", type=int)
    p.add_argument("--disconnect", choices=["error", "largest"])
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("gdist", help="geodesic distance matrix")
    _add_common(p)
    _add_geodesic_opts(p)
    p.add_argument("--subsample", type=int, help="seeded random subset size")
    p.add_argument("--n-jobs", type=int)
    p.set_defaults(func=cmd_gdist)

    p = sub.add_parser("geodesic", help="one geodesic between two points")
    _add_common(p)
    _add_geodesic_opts(p)
    p.add_argument("--from", dest="from_id", help="start point id")
    p.add_argument("--to", dest="to_id", help="end point id")
    p.add_argument("--from-coords", help="start point as comma-separated coordinates")
    p.add_argument("--to-coords", help="end point as comma-separated coordinates")
    p.set_defaults(func=cmd_geodesic)

    p = sub.add_parser("cluster", help="k-means / k-medoids clustering")
    _add_common(p)
    p.add_argument("--latent")
    p.add_argument("--distances", help="geodesic distance matrix CSV (metric=geodesic)")
    p.add_argument("--k", type=int)
    p.add_argument("--metric", choices=["euclidean", "geodesic"])
    p.add_argument("--restarts", type=int)
    p.add_argument("--select-k", help="elbow search range MIN..MAX")
    p.add_argument("--n-jobs", type=int)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", help="agreement between human labels and cluster assignments")
    p.add_argument("--manifest")
    p.add_argument("--human", help="labels CSV (id,label)")
    p.add_argument("--system", help="assignments CSV (id,cluster)")
    p.add_argument("--k", type=int)
    p.add_argument("--best-match", action="store_true")
    p.add_argument("--out", help="write the JSON result to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="SVG latent scatter or geodesic overlay")
    _add_common(p)
    p.add_argument("--latent")
    p.add_argument("--assignments")
    p.add_argument("--representatives")
    p.add_argument("--curves", help="curve CSV from `geodesic`; draws geodesics.svg")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", help="cluster membership report (HTML + CSV)")
    _add_common(p)
    p.add_argument("--assignments")
    p.add_argument("--sample", type=int, help="members sampled per cluster")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline from a manifest")
    _add_common(p)
    p.add_argument("--n-jobs", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 42
    try:
        args.func(args)
    except PalynoError as exc:
        print(f"palyno: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"palyno: error: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"palyno: numerical error: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    return 0
