"""
Clustering embeddings and scoring them against labels
=====================================================

A stand-in for a labelled image collection: 650 embeddings of dimension
512 drawn around 10 planted centres.  The whole analysis runs through one
manifest, then the agreement numbers are recomputed by hand.
"""

import json
import sys
from pathlib import Path

from palyno.cluster import select_k_elbow
from palyno.datasets import planted_embeddings
from palyno.ingest import LabelVector, parse_labels, save_embedding_table, save_labels
from palyno.manifold import load_latent
from palyno.pipeline import load_manifest, run_pipeline
from palyno.stats import best_match_agreement, cohen_kappa, contingency

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "planted"
out.mkdir(parents=True, exist_ok=True)

emb, labels = planted_embeddings(650, 512, 10, seed=0)
save_embedding_table(out / "emb.csv", emb)
save_labels(out / "labels.csv", labels)

manifest = {
    "inputs": {"embeddings": "emb.csv", "labels": "labels.csv"},
    "dim": 512,
    "reduce": {"method": "pca", "d_final": 3},
    "cluster": {"k": 10},
    "output_dir": "run",
}
(out / "manifest.json").write_text(json.dumps(manifest, indent=2))
run = run_pipeline(load_manifest(out / "manifest.json"))
print("artifacts:", sorted(p.name for p in run.iterdir()))

# the same numbers as run/eval.json, computed step by step
system = parse_labels(run / "assignments.csv", column="cluster")
table = contingency(labels, system, 10)
print("raw agreement (arbitrary cluster ids):", table.counts.trace() / table.n)
mapping, rate = best_match_agreement(labels, system, 10)
print("best one-to-one matching:", mapping, "agreement", rate)

# kappa after relabelling the clusters with the matching
relabel = {c: h for h, c in enumerate(mapping)}
matched = LabelVector(system.ids, [relabel[c] for c in system.labels])
res = cohen_kappa(contingency(labels, matched, 10))
print(f"kappa {res.kappa:.3f}  95% CI ({res.ci_low:.3f}, {res.ci_high:.3f})")

# would the elbow rule have found k=10 on its own?
lat = load_latent(run / "latent.csv")
sel = select_k_elbow(lat.coords, 2, 14)
print("elbow choice:", sel.chosen_k, "weak" if sel.weak_elbow else "clear")
