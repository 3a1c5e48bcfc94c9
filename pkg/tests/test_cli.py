import json

import pytest

from rankcore.cli import main
from rankcore.dataset import SynthConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full CLI workflow: gen -> spi -> train -> select -> rank -> report."""
    root = tmp_path_factory.mktemp("cli")
    cfg = SynthConfig(n_regions=8, n_subjects=8, n_prototypes=2, seed=11)
    (root / "synth.json").write_text(json.dumps(cfg.to_dict()))

    assert main(["gen", "--config", str(root / "synth.json"),
                 "--out", str(root / "data"), "--quiet"]) == 0
    assert main(["spi", "--data", str(root / "data"), "--out", str(root / "fc"),
                 "--ops", "pearson,cov_empirical,spearman", "--quiet"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "trained"),
                 "--epochs", "4", "--quiet"]) == 0
    return root


def test_gen_writes_manifest(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["n_regions"] == 8
    assert len(manifest["samples"]) == 40  # 8 subjects x 5 segments


def test_spi_store_layout(workspace):
    index = json.loads((workspace / "fc" / "index.json").read_text())
    assert sorted(index["operators"]) == ["cov_empirical", "pearson", "spearman"]
    assert len(index["operators"]["pearson"]) == 40


def test_train_outputs(workspace):
    out = workspace / "trained"
    assert (out / "params.bin").exists()
    assert (out / "sps.csv").read_text().startswith("sample_id,sps,epochs")
    assert (out / "trace.csv").exists()
    assert (out / "trace.png").exists()


@pytest.mark.parametrize("method", ["sclcs", "sclcs-dense", "random", "kmeans"])
def test_select_methods(workspace, method, tmp_path):
    out = tmp_path / f"{method}.json"
    args = ["select", "--method", method, "--sps", str(workspace / "trained" / "sps.csv"),
            "--ratio", "0.25", "--seed", "3", "--out", str(out), "--quiet"]
    if method == "kmeans":
        args += ["--fc", str(workspace / "fc")]
    assert main(args) == 0
    payload = json.loads(out.read_text())
    assert payload["method"] == method
    assert len(payload["sample_ids"]) == 10  # round(0.25 * 40)


def test_select_kmeans_requires_store(workspace, tmp_path):
    with pytest.raises(SystemExit):
        main(["select", "--method", "kmeans", "--sps", str(workspace / "trained" / "sps.csv"),
              "--ratio", "0.25", "--out", str(tmp_path / "x.json"), "--quiet"])


def test_rank_and_report(workspace, tmp_path):
    full = tmp_path / "full.json"
    assert main(["rank", "--fc", str(workspace / "fc"), "--full",
                 "--task", "fingerprint", "--out", str(full), "--quiet"]) == 0
    payload = json.loads(full.read_text())
    assert payload["sample_count"] == 40
    assert [e["rank"] for e in payload["entries"]] == [1, 2, 3]

    coreset = tmp_path / "coreset.json"
    assert main(["select", "--method", "random", "--sps",
                 str(workspace / "trained" / "sps.csv"), "--ratio", "0.5",
                 "--seed", "1", "--out", str(coreset), "--quiet"]) == 0
    run = tmp_path / "run.json"
    assert main(["rank", "--fc", str(workspace / "fc"), "--subset", str(coreset),
                 "--task", "fingerprint", "--out", str(run), "--quiet"]) == 0
    run_payload = json.loads(run.read_text())
    assert run_payload["provenance"]["subset"]["method"] == "random"

    report = tmp_path / "report.json"
    assert main(["report", "--truth", str(full), "--runs", str(run),
                 "--ks", "1,2", "--out", str(report), "--quiet"]) == 0
    cells = json.loads(report.read_text())["tasks"]["fingerprint"]["methods"]
    assert "random" in cells
    assert (tmp_path / "figures" / "fingerprint_ndcg.png").exists()


def test_fit_subcommand(workspace, tmp_path):
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", str(workspace / "data"), "--target", "pearson",
                 "--epochs", "10", "--out", str(out), "--quiet"]) == 0
    payload = json.loads(out.read_text())
    assert payload["operator"] == "pearson"
    assert {"train_mse_start", "train_mse_end", "test_mse"} <= set(payload)


def test_validate_subcommand(tmp_path):
    out = tmp_path / "validate.json"
    assert main(["validate", "--which", "interference", "--out", str(out), "--quiet"]) == 0
    payload = json.loads(out.read_text())
    assert payload["ok"]
    assert payload["which"] == ["interference"]


def test_cli_error_paths(tmp_path):
    # missing dataset directory surfaces as a clean non-zero exit
    assert main(["spi", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "fc"),
                 "--quiet"]) == 2
    # unknown operator name
    assert main(["rank", "--fc", str(tmp_path / "nope"), "--full", "--task",
                 "fingerprint", "--out", str(tmp_path / "r.json"), "--quiet"]) == 2
