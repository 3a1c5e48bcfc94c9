"""End-to-end orchestration: generate -> spi -> train -> select -> rank -> report.

Stages are cached under a content hash of their parameters plus the hashes of
the stages they consume, so editing one knob invalidates only dependent
artifacts. Reports embed no timestamps or absolute paths: two runs with the
same config produce byte-identical JSON.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import figures
from .benchmark import Ranking, consistency_report, rank_spis
from .dataset import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset, window_dataset
from .encoder import FitConfig, save_params
from .fcstore import FcStore, compute_all
from .selection import (
    CoreSet,
    select_density_balanced,
    select_kmeans,
    select_random,
    select_topk_sps,
)
from .spi import get_operators
from .sps import SpsRecord
from .training import TrainConfig, train
from . import validators as V

__all__ = ["PipelineConfig", "run_pipeline", "run_validator_suite"]

METHODS = ("sclcs", "sclcs-dense", "random", "kmeans")
LogFn = Callable[..., None]


def _noop_log(stage: str, event: str, **fields: Any) -> None:
    pass


@dataclass(frozen=True)
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = METHODS
    ratios: tuple[float, ...] = (0.1, 0.3, 0.5)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    tasks: tuple[str, ...] = ("fingerprint", "diagnosis")
    ks: tuple[int, ...] = (5, 10, 20)
    ops: tuple[str, ...] | None = None
    beta: float = 0.2
    eps_reg: float = 1e-8
    reference_op: str = "pearson"
    pair_cap: int = 20000

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("need at least one seed")
        for r in self.ratios:
            if not (0.0 < r <= 1.0):
                raise ValueError(f"ratio {r} outside (0, 1]")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if "kmeans" in self.methods:
            ops = self.ops if self.ops is not None else tuple(
                op.name for op in get_operators()
            )
            if self.reference_op not in ops:
                raise ValueError(
                    f"kmeans reference operator {self.reference_op!r} not in configured ops"
                )

    def to_dict(self) -> dict[str, Any]:
        return {
            "synth": self.synth.to_dict(),
            "train": dataclasses.asdict(self.train),
            "methods": list(self.methods),
            "ratios": list(self.ratios),
            "seeds": list(self.seeds),
            "tasks": list(self.tasks),
            "ks": list(self.ks),
            "ops": list(self.ops) if self.ops is not None else None,
            "beta": self.beta,
            "eps_reg": self.eps_reg,
            "reference_op": self.reference_op,
            "pair_cap": self.pair_cap,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PipelineConfig":
        d = dict(d)
        kwargs: dict[str, Any] = {}
        if "synth" in d:
            kwargs["synth"] = SynthConfig.from_dict(d.pop("synth"))
        if "train" in d:
            kwargs["train"] = TrainConfig(**d.pop("train"))
        for key in ("methods", "ratios", "seeds", "tasks", "ks"):
            if key in d:
                kwargs[key] = tuple(d.pop(key))
        if "ops" in d:
            ops = d.pop("ops")
            kwargs["ops"] = tuple(ops) if ops is not None else None
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _StageCache:
    def __init__(self, root: Path, log: LogFn):
        self.root = root
        self.log = log
        self.root.mkdir(parents=True, exist_ok=True)

    def run(self, name: str, key_obj: Any, builder: Callable[[Path], None]) -> tuple[Path, str]:
        digest = _digest(key_obj)
        stage_dir = self.root / f"{name}-{digest}"
        marker = stage_dir / "_done.json"
        if marker.exists():
            self.log(name, "cache_hit", key=digest)
            return stage_dir, digest
        stage_dir.mkdir(parents=True, exist_ok=True)
        self.log(name, "start", key=digest)
        try:
            builder(stage_dir)
        except Exception as exc:
            raise RuntimeError(f"stage {name!r} failed: {exc}") from exc
        marker.write_text(json.dumps({"stage": name, "key": key_obj}, sort_keys=True, default=str))
        self.log(name, "done", key=digest)
        return stage_dir, digest


def _coreset_for(
    method: str,
    m: int,
    ratio: float,
    seed: int,
    sps: SpsRecord,
    store: FcStore,
    cfg: PipelineConfig,
) -> CoreSet:
    if method == "sclcs":
        return select_topk_sps(sps, m, ratio=ratio)
    if method == "sclcs-dense":
        return select_density_balanced(
            sps, m, beta=cfg.beta, eps_reg=cfg.eps_reg, seed=seed, ratio=ratio
        )
    if method == "random":
        return select_random(sorted(sps.scores), m, seed=seed, ratio=ratio)
    if method == "kmeans":
        return select_kmeans(store, m, reference_op=cfg.reference_op, seed=seed, ratio=ratio)
    raise ValueError(f"unknown method {method!r}")


def run_pipeline(
    cfg: PipelineConfig,
    out: str | Path,
    jobs: int = 1,
    validate: bool = False,
    with_figures: bool = True,
    log: LogFn | None = None,
) -> tuple[int, dict[str, Any]]:
    """Execute every stage with caching; returns (exit_code, report dict).

    The report follows the methods x k x ratio consistency layout with
    per-seed values and is also written to ``<out>/report.json``.
    """
    log = log or _noop_log
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache_root = Path(os.environ.get("RANKCORE_CACHE", out / "cache"))
    cache = _StageCache(cache_root, log)

    ops = get_operators(list(cfg.ops) if cfg.ops is not None else None)
    op_key = [[op.name, op.kind, op.params] for op in ops]

    # --- data ---------------------------------------------------------------
    def build_gen(stage_dir: Path) -> None:
        raw = generate_synthetic(cfg.synth)
        windowed = window_dataset(raw, cfg.synth.window_len, cfg.synth.stride)
        save_dataset(windowed, stage_dir / "data")

    gen_dir, gen_key = cache.run("gen", {"synth": cfg.synth.to_dict()}, build_gen)
    dataset = load_dataset(gen_dir / "data")

    # --- connectivity store ---------------------------------------------------
    def build_spi(stage_dir: Path) -> None:
        summary = compute_all(dataset, ops, stage_dir / "fc", jobs=jobs)
        if summary.failed:
            raise RuntimeError(f"{summary.failed} operator/sample computations failed")

    spi_dir, spi_key = cache.run("spi", {"gen": gen_key, "ops": op_key}, build_spi)
    store = FcStore(spi_dir / "fc")

    # --- encoder training -----------------------------------------------------
    def build_train(stage_dir: Path) -> None:
        params, sps, trace = train(dataset, cfg.train)
        save_params(params, stage_dir / "params.bin")
        sps.save_csv(stage_dir / "sps.csv")
        trace.save_csv(stage_dir / "trace.csv")
        if with_figures:
            figures.save_trace_figure(trace.rows, stage_dir / "trace.png")

    train_dir, train_key = cache.run(
        "train", {"gen": gen_key, "train": dataclasses.asdict(cfg.train)}, build_train
    )
    sps = SpsRecord.load_csv(train_dir / "sps.csv")

    # --- rankings --------------------------------------------------------------
    def ranking_stage(name: str, key_obj: Any, sample_ids: Sequence[str], task: str,
                      seed: int) -> Ranking:
        def build(stage_dir: Path) -> None:
            ranking = rank_spis(
                store, sample_ids, task, pair_cap=cfg.pair_cap, seed=seed,
                dataset_id=dataset.name,
            )
            ranking.to_json(stage_dir / "ranking.json")

        stage_dir, _ = cache.run(name, key_obj, build)
        return Ranking.from_json(stage_dir / "ranking.json")

    full_rankings: dict[str, Ranking] = {}
    for task in cfg.tasks:
        full_rankings[task] = ranking_stage(
            f"rank-full-{task}",
            {"spi": spi_key, "task": task, "pair_cap": cfg.pair_cap, "seed": cfg.seeds[0]},
            dataset.sample_ids,
            task,
            cfg.seeds[0],
        )

    n_total = len(dataset.sample_ids)
    runs: dict[str, list[tuple[CoreSet, Ranking]]] = {task: [] for task in cfg.tasks}
    for method in cfg.methods:
        for ratio in cfg.ratios:
            m = int(round(ratio * n_total))
            for seed in cfg.seeds:
                select_key = {
                    "train": train_key,
                    "spi": spi_key,
                    "method": method,
                    "ratio": ratio,
                    "m": m,
                    "seed": seed,
                    "beta": cfg.beta,
                    "eps_reg": cfg.eps_reg,
                    "reference_op": cfg.reference_op,
                }

                def build_select(stage_dir: Path) -> None:
                    coreset = _coreset_for(method, m, ratio, seed, sps, store, cfg)
                    coreset.to_json(stage_dir / "coreset.json")

                sel_dir, sel_key = cache.run(
                    f"select-{method}-r{ratio:g}-s{seed}", select_key, build_select
                )
                coreset = CoreSet.from_json(sel_dir / "coreset.json")
                for task in cfg.tasks:
                    ranking = ranking_stage(
                        f"rank-{method}-r{ratio:g}-s{seed}-{task}",
                        {"spi": spi_key, "subset": sel_key, "task": task,
                         "pair_cap": cfg.pair_cap, "seed": seed},
                        coreset.sample_ids,
                        task,
                        seed,
                    )
                    runs[task].append((coreset, ranking))

    # --- report ------------------------------------------------------------------
    report: dict[str, Any] = {
        "config_hash": _digest(cfg.to_dict()),
        "methods": list(cfg.methods),
        "ratios": list(cfg.ratios),
        "seeds": list(cfg.seeds),
        "ks": list(cfg.ks),
        "tasks": {},
    }
    for task in cfg.tasks:
        report["tasks"][task] = consistency_report(
            full_rankings[task], runs[task], ks=cfg.ks
        ).as_dict()

    exit_code = 0
    if validate:
        # validators run on their own calibrated inputs, not the pipeline's
        # dataset: they check the machinery, not this particular run
        validation = run_validator_suite("all", seed=cfg.seeds[0])
        (out / "validate.json").write_text(json.dumps(validation, indent=2, sort_keys=True))
        report["validators_ok"] = validation["ok"]
        if not validation["ok"]:
            exit_code = 1

    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if with_figures:
        figures.save_report_figures(report, out / "figures")
    log("pipeline", "done", exit_code=exit_code)
    return exit_code, report


# ---------------------------------------------------------------------------
# validator suite used by the CLI and by ``run_pipeline(validate=True)``

def _default_mixture() -> V.MixtureModel:
    return V.MixtureModel(
        prototypes=(np.zeros((2, 2)), np.ones((2, 2))),
        weights=np.array([0.5, 0.5]),
    )


def _random_mixture(k: int, seed: int) -> V.MixtureModel:
    rng = np.random.default_rng(seed)
    protos = tuple(rng.standard_normal((3, 3)) for _ in range(k))
    w = rng.dirichlet(np.ones(k))
    return V.MixtureModel(prototypes=protos, weights=w)


def _uniform_two_cluster() -> V.TwoClusterModel:
    return V.TwoClusterModel(
        pi_p=0.5,
        dist_p=V.ScoreDistribution.uniform(0.0, 1.0),
        dist_q=V.ScoreDistribution.uniform(0.5, 1.5),
        rho=0.5,
    )


def _cluster_pool(seed: int, spread: float = 0.05) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    base_a = np.zeros((3, 3))
    base_b = np.full((3, 3), 2.0)
    pool = [base_a + spread * rng.standard_normal((3, 3)) for _ in range(30)]
    pool += [base_b + spread * rng.standard_normal((3, 3)) for _ in range(30)]
    return pool


def run_validator_suite(
    which: str = "all",
    seed: int = 0,
    dataset: Dataset | None = None,
) -> dict[str, Any]:
    """Run the requested validators with desk-scale budgets; returns one report
    dict with an overall ``ok``."""
    known = ("interference", "mixture", "topk", "coverage", "discrepancy",
             "consistency", "universal")
    wanted = list(known) if which == "all" else [which]
    unknown = set(wanted) - set(known)
    if unknown:
        raise ValueError(f"unknown validator(s) {sorted(unknown)}")

    results: dict[str, Any] = {}
    if "interference" in wanted:
        per_h = {
            str(h): V.validate_interference(h, n_regions=16, support_size=2, seed=seed + h)
            for h in (2, 4, 8)
        }
        results["interference"] = {"ok": all(r["ok"] for r in per_h.values()), "per_heads": per_h}
    if "mixture" in wanted:
        base = V.validate_mixture(_default_mixture(), trials=10000, seed=seed)
        random_models = [
            V.validate_mixture(_random_mixture(3, seed + 100 + i), trials=2000, seed=seed + i)
            for i in range(3)
        ]
        results["mixture"] = {
            "ok": base["ok"] and all(r["bounds"]["ok"] for r in random_models),
            "isotropic_two_prototype": base,
            "random_three_prototype": random_models,
        }
    if "topk" in wanted:
        results["topk"] = V.validate_topk_bias(
            _uniform_two_cluster(), n_grid=(10**3, 10**4, 10**5), trials=200, seed=seed
        )
    if "coverage" in wanted:
        pool = _cluster_pool(seed)
        eps = max(
            float(np.linalg.norm(a - b))
            for group in (pool[:30], pool[30:])
            for a in group
            for b in group
        )
        results["coverage"] = V.validate_epsilon_coverage(
            pool, eps=eps, delta=0.1, trials=200, seed=seed
        )
    if "discrepancy" in wanted:
        pool = _cluster_pool(seed + 1)
        rng = np.random.default_rng(seed + 2)
        eps = 1.0
        flat = [m.ravel() for m in pool]
        projection = []
        for i, m in enumerate(pool):
            near = [
                j
                for j, other in enumerate(pool)
                if float(np.linalg.norm(m - other)) <= eps
            ]
            projection.append(int(near[rng.integers(len(near))]))
        anchor = pool[0]
        results["discrepancy"] = V.validate_discrepancy(
            pool,
            weights=np.full(len(pool), 1.0 / len(pool)),
            projection=projection,
            f=lambda mat: float(np.linalg.norm(mat - anchor)),
            lipschitz=1.0,
            eps=eps,
        )
    if "consistency" in wanted:
        kinds = {
            kind: V.validate_sps_consistency(kind, l_grid=(100, 1000, 10000), seed=seed)
            for kind in ("uniform", "ar1", "mixture")
        }
        results["consistency"] = {"ok": all(r["ok"] for r in kinds.values()), "kinds": kinds}
    if "universal" in wanted:
        if dataset is None:
            # train/test MSE parity needs many subjects and low-capacity heads;
            # small datasets or wide heads memorize per-window estimator noise
            synth = SynthConfig(n_regions=12, n_subjects=180, n_prototypes=2, seed=7)
            dataset = window_dataset(generate_synthetic(synth), synth.window_len, synth.stride)
        ops = get_operators(
            ["pearson", "cov_empirical", "spearman", "pdist_euclidean", "plv_mean", "mi_gaussian"]
        )
        results["universal"] = V.validate_universal(
            dataset, ops,
            FitConfig(max_epochs=250, lr=5e-3, n_heads=2, head_dim=2, value_dim=2,
                      out_dim=2, seed=seed),
        )

    return {"ok": all(r["ok"] for r in results.values()), "which": wanted, "results": results}
