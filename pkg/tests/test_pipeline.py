import json

import pytest

from rankcore.dataset import SynthConfig
from rankcore.pipeline import PipelineConfig, run_pipeline
from rankcore.training import TrainConfig


def small_config(**kw):
    base = dict(
        synth=SynthConfig(n_regions=10, n_subjects=12, n_prototypes=2, seed=5),
        train=TrainConfig(epochs=4, batch_size=8, n_heads=2, head_dim=4,
                          value_dim=4, out_dim=4, seed=0),
        ops=("pearson", "cov_empirical", "spearman", "pdist_euclidean"),
        methods=("sclcs", "sclcs-dense", "random", "kmeans"),
        ratios=(0.5,),
        seeds=(0, 1),
        tasks=("fingerprint", "diagnosis"),
        ks=(2, 4),
    )
    base.update(kw)
    return PipelineConfig(**base)


def run(cfg, out, **kw):
    kw.setdefault("with_figures", False)
    return run_pipeline(cfg, out, **kw)


def test_pipeline_report_structure(tmp_path, monkeypatch):
    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache"))
    code, report = run(small_config(), tmp_path / "out")
    assert code == 0
    written = json.loads((tmp_path / "out" / "report.json").read_text())
    assert written == json.loads(json.dumps(report))
    for task in ("fingerprint", "diagnosis"):
        cells = written["tasks"][task]["methods"]
        assert sorted(cells) == ["kmeans", "random", "sclcs", "sclcs-dense"]
        for method in cells:
            cell = cells[method]["2"]["0.5"]
            assert cell["n_runs"] == 2
            assert len(cell["values"]) == 2
            assert 0.0 <= cell["mean"] <= 1.0
        assert written["tasks"][task]["std_convention"] == "population"


def test_pipeline_rerun_hits_cache_and_matches_bytes(tmp_path, monkeypatch):
    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache"))
    cfg = small_config()
    run(cfg, tmp_path / "out1")
    first = (tmp_path / "out1" / "report.json").read_bytes()

    events = []
    code, _ = run(cfg, tmp_path / "out2",
                  log=lambda stage, event, **kw: events.append((stage, event)))
    assert code == 0
    second = (tmp_path / "out2" / "report.json").read_bytes()
    assert first == second
    stage_events = [e for e in events if e[1] in ("cache_hit", "start")]
    assert stage_events and all(event == "cache_hit" for _, event in stage_events)


def test_pipeline_fresh_caches_byte_identical(tmp_path, monkeypatch):
    cfg = small_config(seeds=(0,))
    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache_a"))
    run(cfg, tmp_path / "out_a")
    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache_b"))
    run(cfg, tmp_path / "out_b")
    a = (tmp_path / "out_a" / "report.json").read_bytes()
    b = (tmp_path / "out_b" / "report.json").read_bytes()
    assert a == b


def test_pipeline_ratio_one_gives_perfect_consistency(tmp_path, monkeypatch):
    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache"))
    cfg = small_config(ratios=(1.0,), seeds=(0,), beta=0.0)
    code, report = run(cfg, tmp_path / "out")
    assert code == 0
    for task in cfg.tasks:
        for method, by_k in report["tasks"][task]["methods"].items():
            for k, by_ratio in by_k.items():
                assert by_ratio["1"]["mean"] == pytest.approx(1.0, abs=1e-12), (task, method, k)


def test_pipeline_figures_written(tmp_path, monkeypatch):
    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache"))
    cfg = small_config(seeds=(0,))
    code, _ = run_pipeline(cfg, tmp_path / "out", with_figures=True)
    assert code == 0
    assert (tmp_path / "out" / "figures" / "diagnosis_ndcg.png").exists()
    assert (tmp_path / "out" / "figures" / "fingerprint_ndcg.png").exists()


def test_pipeline_validate_flag_gates_exit_code(tmp_path, monkeypatch):
    import rankcore.pipeline as pl

    monkeypatch.setenv("RANKCORE_CACHE", str(tmp_path / "cache"))
    monkeypatch.setattr(
        pl, "run_validator_suite",
        lambda which, seed=0, dataset=None: {"ok": False, "which": [which], "results": {}},
    )
    cfg = small_config(seeds=(0,))
    code, report = run(cfg, tmp_path / "out", validate=True)
    assert code == 1
    assert report["validators_ok"] is False
    assert json.loads((tmp_path / "out" / "validate.json").read_text())["ok"] is False


def test_pipeline_config_round_trip(tmp_path):
    cfg = small_config()
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    loaded = PipelineConfig.from_json(path)
    assert loaded == cfg


def test_pipeline_config_validation():
    with pytest.raises(ValueError, match="ratio"):
        small_config(ratios=(0.0,))
    with pytest.raises(ValueError, match="seed"):
        small_config(seeds=())
    with pytest.raises(ValueError, match="reference operator"):
        small_config(ops=("spearman",), methods=("kmeans",))
