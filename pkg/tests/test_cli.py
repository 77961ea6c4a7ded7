import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from dash_grn import cli
from dash_grn import evaluation as ev
from dash_grn import model
from dash_grn import simulator as sim

SMALL = {
    "simulate": {"k": 5, "n_traj": 100, "n_sub": 10},
    "model": {"output_scale": 0.1},
    "train": {"max_epochs": 8, "n_sub": 5, "lr0": 0.01, "schedule": {"events": [[3, 0.5], [6, 0.1]]}},
    "lambda_grid": [0.5],
}


def run(*args, ok=True):
    result = CliRunner().invoke(cli.main, [str(a) for a in args])
    if ok:
        assert result.exit_code == 0, result.output
    return result


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def data(tmp_path, config):
    out = tmp_path / "data"
    run("simulate", "--config", config, "--seed", 3, "--out", out)
    return out


def test_simulate_writes_split_and_manifest(data):
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["split"] == {"train": 88, "val": 6, "test": 6}
    assert set(manifest["seeds"]) == set(cli.SEED_PURPOSES)
    for name in ("train.csv", "val.csv", "test.csv", "network.tsv", "prior_P.tsv", "prior_C.tsv"):
        assert manifest["outputs"][name] == cli.sha256(data / name)


def test_simulate_rerun_is_byte_identical(tmp_path, config, data):
    again = tmp_path / "again"
    run("simulate", "--config", config, "--seed", 3, "--out", again)
    for name in ("train.csv", "val.csv", "test.csv", "network.tsv", "prior_P.tsv", "prior_C.tsv"):
        assert (again / name).read_bytes() == (data / name).read_bytes()
    other = tmp_path / "other"
    run("simulate", "--config", config, "--seed", 4, "--out", other)
    assert (other / "train.csv").read_bytes() != (data / "train.csv").read_bytes()


def test_seeds_are_distinct_per_purpose():
    seeds = cli.derive_seeds(0)
    assert len(set(seeds.values())) == len(seeds)
    assert cli.derive_seeds(0) == seeds != cli.derive_seeds(1)


def test_train_smoke_is_fast(tmp_path, config, data):
    t0 = time.perf_counter()
    run("train", "--config", config, "--data", data, "--out", tmp_path / "run", "--lambda1", 0.5, "--lambda2", 0.5)
    assert time.perf_counter() - t0 < 5
    p, meta = model.load_checkpoint(tmp_path / "run" / "checkpoint.json")
    assert meta["method"] == "dash" and p.k == 5
    assert (tmp_path / "run" / "history.csv").read_text().startswith("epoch,")


def test_method_none_stays_dense(tmp_path, config, data):
    run("train", "--config", config, "--data", data, "--out", tmp_path / "run", "--method", "none")
    p, _ = model.load_checkpoint(tmp_path / "run" / "checkpoint.json")
    assert ev.sparsity(p) == 0.0


def test_dash_one_one_equals_bioprune(tmp_path, config, data):
    run("train", "--config", config, "--data", data, "--out", tmp_path / "a", "--lambda1", 1, "--lambda2", 1)
    run("train", "--config", config, "--data", data, "--out", tmp_path / "b", "--method", "bioprune")
    a, _ = model.load_checkpoint(tmp_path / "a" / "checkpoint.json")
    b, _ = model.load_checkpoint(tmp_path / "b" / "checkpoint.json")
    for name in a.weight_names:
        np.testing.assert_array_equal(a.masks[name], b.masks[name])


@pytest.mark.parametrize("method", ["imp", "pinn", "mp-posthoc"])
def test_other_methods_run(tmp_path, config, data, method):
    cfg = dict(SMALL, posthoc_repeats=2, posthoc_grid=[0.5, 0.75])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    run("train", "--config", path, "--data", data, "--out", tmp_path / method, "--method", method)
    manifest = json.loads((tmp_path / method / "manifest.json").read_text())
    assert manifest["result"]["method"] == method
    if method == "pinn":
        assert manifest["config"]["train"]["tau"] == cli.PINN_DEFAULT_TAU


def perfect_checkpoint(path, net):
    """One hidden unit per regulator, writing exactly to that regulator's targets."""
    k = net.k
    p = model.init_phoenix(k, m=k, seed=0, gene_names=net.gene_names)
    eye = np.eye(k)
    p.masks = {"w_sigma": eye, "w_pi": np.zeros((k, k)),
               "u_sigma": (net.A != 0).astype(float), "u_pi": np.zeros((k, k))}
    model.save_checkpoint(p, path, {"method": "oracle"})


def test_evaluate_perfect_support(tmp_path, data):
    net_A = ev.read_edge_tsv(data / "network.tsv", sim.gene_names(5))
    perfect_checkpoint(tmp_path / "oracle.json", sim.GroundTruthNetwork(sim.gene_names(5), net_A))
    out = tmp_path / "eval"
    run("evaluate", tmp_path / "oracle.json", "--reference", data / "network.tsv", "--out", out)
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["models"][0]["balanced_accuracy"] == 100.0
    assert (out / "oracle.grn.tsv").exists()


def test_evaluate_scatter_and_pathways(tmp_path, config, data):
    run("train", "--config", config, "--data", data, "--out", tmp_path / "r1", "--method", "none")
    run("train", "--config", config, "--data", data, "--out", tmp_path / "r2", "--method", "imp")
    gmt = ev.write_gmt({"first": ["G1", "G2"], "rest": ["G3", "G4", "G5"]}, tmp_path / "sets.gmt")
    out = tmp_path / "eval"
    run("evaluate", tmp_path / "r1" / "checkpoint.json", tmp_path / "r2" / "checkpoint.json",
        "--reference", data / "network.tsv", "--test", data / "test.csv", "--genesets", gmt,
        "--n-init", 5, "--permutations", 20, "--out", out)
    svg = (out / "scatter.svg").read_text()
    assert svg.count('class="point"') == 2
    assert ">none<" in svg and ">imp<" in svg
    assert (out / "none.pathways.csv").read_text().startswith("name,PS,p,z\n")
    metrics = json.loads((out / "metrics.json").read_text())
    assert [m["label"] for m in metrics["models"]] == ["none", "imp"]
    assert all("test_mse" in m for m in metrics["models"])


def test_scatter_svg_golden():
    svg = cli.scatter_svg([("a<b", 50.0, 100.0)], width=200, height=150)
    assert svg.splitlines()[0] == ('<svg xmlns="http://www.w3.org/2000/svg" width="200" height="150" '
                                   'viewBox="0 0 200 150" font-family="sans-serif" font-size="11">')
    assert '<circle class="point" cx="120.0" cy="20.0" r="4" fill="#1f77b4"/>' in svg
    assert '<text class="label" x="126.0" y="14.0">a&lt;b</text>' in svg
    assert svg == cli.scatter_svg([("a<b", 50.0, 100.0)], width=200, height=150)


def test_missing_reference_is_usage_error(tmp_path, config, data):
    run("train", "--config", config, "--data", data, "--out", tmp_path / "run", "--method", "none")
    missing = tmp_path / "nope.tsv"
    result = run("evaluate", tmp_path / "run" / "checkpoint.json", "--reference", missing,
                 "--out", tmp_path / "eval", ok=False)
    assert result.exit_code == 2
    assert "nope.tsv" in result.output


def test_unknown_config_key_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"simulate": {"genes": 5}}))
    result = run("simulate", "--config", bad, "--out", tmp_path / "x", ok=False)
    assert result.exit_code == 2
    assert "genes" in result.output


def test_missing_priors_for_dash_is_usage_error(tmp_path, config, data):
    (data / "prior_P.tsv").unlink()
    result = run("train", "--config", config, "--data", data, "--out", tmp_path / "r",
                 "--lambda1", 0.5, "--lambda2", 0.5, ok=False)
    assert result.exit_code == 2


def test_divergence_exits_one(tmp_path, config, data, monkeypatch):
    init = model.init_model

    def blown(*args, **kwargs):
        p = init(*args, **kwargs)
        return p.replace(u_pi=np.full_like(p.u_pi, -40.0), w_pi=np.full_like(p.w_pi, -5.0))

    monkeypatch.setattr(cli.mdl, "init_model", blown)
    with np.errstate(all="ignore"):
        result = run("train", "--config", config, "--data", data, "--out", tmp_path / "r", "--method", "none", ok=False)
    assert result.exit_code == 1
    assert "diverged" in result.output
    assert (tmp_path / "r" / "manifest.json").exists()


def test_cv_single_cell_passthrough_is_deterministic(tmp_path, config, data):
    for name in ("a", "b"):
        run("cv", "--config", config, "--data", data, "--out", tmp_path / name, "--grid", "0.5")
    a = json.loads((tmp_path / "a" / "cv.json").read_text())
    assert a["best"] == {"lambda1": 0.5, "lambda2": 0.5}
    assert len(a["table"]) == 1
    assert (tmp_path / "a" / "cv.json").read_bytes() == (tmp_path / "b" / "cv.json").read_bytes()


def test_threads_env_fallback(monkeypatch):
    monkeypatch.delenv("DASH_GRN_THREADS", raising=False)
    assert cli.resolve_threads(None) == 1
    monkeypatch.setenv("DASH_GRN_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv("DASH_GRN_THREADS", "many")
    with pytest.raises(cli.ConfigurationError):
        cli.resolve_threads(None)
