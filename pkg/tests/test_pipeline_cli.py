import json

import numpy as np
import pytest

from _helpers import artifact_bytes, write_run
from palyno.cli import main
from palyno.datasets import as_embeddings, planted_embeddings, swiss_roll
from palyno.errors import ManifestError
from palyno.ingest import parse_labels
from palyno.pipeline import load_manifest, manifest_from_dict, run_pipeline

PCA_ARTIFACTS = {
    "ingest.json",
    "latent.csv",
    "reduction.json",
    "assignments.csv",
    "representatives.csv",
    "clustering.json",
    "latent.svg",
    "report.html",
    "report.csv",
    "traversal.json",
    "eval.json",
    "run_log.json",
}


@pytest.fixture(scope="module")
def planted():
    return planted_embeddings(n=200, dim=32, k=10, seed=0)


@pytest.fixture
def pca_manifest(tmp_path, planted):
    emb, labels = planted
    return write_run(tmp_path, emb, {"reduce": {"method": "pca", "d_final": 3}, "cluster": {"k": 10}}, labels)


@pytest.fixture
def roll_manifest(tmp_path):
    X, _ = swiss_roll(24, seed=0, height=8)
    cfg = {
        "reduce": {"method": "isomap", "d_final": 2, "k_nn": 8},
        "metric": {"kind": "geodesic", "n_points": 12},
        "cluster": {"k": 3},
        "report": {"n_geodesics": 2},
    }
    return write_run(tmp_path, as_embeddings(X), cfg)


# pipeline ----------------------------------------------------------------------------------


def test_pca_run_writes_expected_artifacts(pca_manifest):
    out = run_pipeline(load_manifest(pca_manifest))
    assert {p.name for p in out.iterdir()} == PCA_ARTIFACTS
    log = json.loads((out / "run_log.json").read_text())
    assert log["k_used"] == 10 and log["seed"] == 42
    assert set(log["timings"]) == {"ingest", "reduce", "cluster", "render", "eval"}
    assert sorted(log["artifacts"]) == sorted(PCA_ARTIFACTS - {"run_log.json"})
    assert json.loads((out / "eval.json").read_text())["best_match_agreement"] >= 0.95
    assert len(parse_labels(out / "assignments.csv", column="cluster")) == 200


def test_missing_embeddings_fail_before_any_stage(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"inputs": {"embeddings": "nope.csv"}, "output_dir": "run"}))
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(path)
    m = load_manifest(path, validate=False)
    with pytest.raises(ManifestError):
        run_pipeline(m)
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize(
    "data",
    [
        {"inputs": {"embeddings": "e.csv"}, "colour": 1},
        {"inputs": {"embeddings": "e.csv"}, "reduce": {"mehtod": "pca"}},
        {"inputs": {"embeddings": "e.csv"}, "metric": {"decoder": {"sigmaa": 1}}},
        {"inputs": {}},
    ],
)
def test_manifest_key_checks(data):
    with pytest.raises(ManifestError):
        manifest_from_dict(data)


def test_manifest_value_checks(pca_manifest):
    m = load_manifest(pca_manifest)
    m.method = "umap"
    with pytest.raises(ManifestError):
        m.validate()


def test_geodesic_run(roll_manifest):
    out = run_pipeline(load_manifest(roll_manifest))
    rep = json.loads((out / "geodesic_report.json").read_text())
    assert rep["n_diverged"] == 0
    assert rep["max_orientation_gap"] < 1e-4
    D = np.loadtxt(out / "geodesic_distances.csv", delimiter=",", skiprows=1, usecols=range(1, 25))
    assert np.allclose(D, D.T) and np.all(np.diag(D) == 0)
    for name in ("geodesics.svg", "geodesic_curves.csv", "latent.svg"):
        assert (out / name).is_file()


def test_rerun_is_byte_identical_and_thread_independent(roll_manifest, tmp_path):
    m = load_manifest(roll_manifest)
    a = artifact_bytes(run_pipeline(m, tmp_path / "a"))
    b = artifact_bytes(run_pipeline(m, tmp_path / "b"))
    m.n_jobs = 3
    c = artifact_bytes(run_pipeline(m, tmp_path / "c"))
    assert a == b == c


def test_select_k_overrides_k(tmp_path):
    emb, labels = planted_embeddings(n=120, dim=16, k=4, seed=1, center_scale=3.0)
    path = write_run(tmp_path, emb, {"reduce": {"d_final": 3}, "cluster": {"k": 9, "select_k": [2, 7]}}, labels)
    out = run_pipeline(load_manifest(path))
    sel = json.loads((out / "k_selection.json").read_text())
    assert sel["chosen_k"] == 4
    assert json.loads((out / "run_log.json").read_text())["k_used"] == 4


# CLI --------------------------------------------------------------------------------


def test_cli_run_exit_zero(pca_manifest, capsys):
    assert main(["run", "--manifest", str(pca_manifest)]) == 0
    out = json.loads(capsys.readouterr().out)["output_dir"]
    assert (pca_manifest.parent / "run" / "latent.csv").is_file()
    assert out.endswith("run")


def test_cli_stagewise(pca_manifest, capsys):
    d = pca_manifest.parent
    m = ["--manifest", str(pca_manifest)]
    assert main(["reduce", *m]) == 0
    assert main(["cluster", *m, "--k", "10"]) == 0
    capsys.readouterr()
    assert main(["eval", "--human", str(d / "labels.csv"), "--system", str(d / "run" / "assignments.csv"), "--k", "10", "--best-match"]) == 0
    assert json.loads(capsys.readouterr().out)["best_match_agreement"] >= 0.95
    assert main(["plot", *m]) == 0
    assert main(["report", *m, "--sample", "2"]) == 0
    assert (d / "run" / "latent.svg").is_file() and (d / "run" / "report.csv").is_file()


def test_cli_eval_output(pca_manifest, tmp_path):
    d = pca_manifest.parent
    assert main(["run", "--manifest", str(pca_manifest)]) == 0
    res = tmp_path / "eval_out.json"
    args = ["eval", "--human", str(d / "labels.csv"), "--system", str(d / "run" / "assignments.csv"), "--k", "10"]
    assert main([*args, "--best-match", "--out", str(res)]) == 0
    assert json.loads(res.read_text())["best_match_agreement"] >= 0.95


def test_cli_geodesic_between_coordinates(tmp_path, capsys):
    args = ["geodesic", "--decoder", "sphere-chart", "--from-coords", "0.8,-1", "--to-coords", "0.8,1", "--n-points", "40", "--out", str(tmp_path)]
    assert main(args) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == json.loads((tmp_path / "geodesic.json").read_text())
    # great-circle distance between the two chart points
    a = np.array([np.sin(0.8) * np.cos(-1), np.sin(0.8) * np.sin(-1), np.cos(0.8)])
    b = np.array([np.sin(0.8) * np.cos(1), np.sin(0.8) * np.sin(1), np.cos(0.8)])
    assert summary["length"] == pytest.approx(np.arccos(a @ b), rel=5e-3)
    assert summary["n_segments"] == 40


def test_cli_missing_file_exit_two(tmp_path, capsys):
    assert main(["run", "--manifest", str(tmp_path / "absent.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_bad_manifest_key_exit_two(tmp_path, capsys):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"inputs": {"embeddings": "x.csv"}, "bogus": 1}))
    assert main(["run", "--manifest", str(path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_cli_disconnected_graph_exit_three(tmp_path, capsys):
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(10, 3)), 1000 + rng.normal(size=(10, 3))])
    path = write_run(tmp_path, as_embeddings(X), {"reduce": {"method": "isomap", "d_final": 2, "k_nn": 3}, "cluster": {"k": 2}})
    assert main(["run", "--manifest", str(path)]) == 3
    assert "reduce" in capsys.readouterr().err


def test_cli_seed_flag_overrides_manifest(pca_manifest, capsys):
    assert main(["--seed", "7", "run", "--manifest", str(pca_manifest)]) == 0
    log = json.loads((pca_manifest.parent / "run" / "run_log.json").read_text())
    assert log["seed"] == 7
