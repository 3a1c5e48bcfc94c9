"""Command-line entry point: one binary orchestrating the whole pipeline.

Subcommands: gen, spi, fit, train, select, rank, report, validate, pipeline.
Logs are line-delimited JSON on stderr; the human summary goes to stdout.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import figures
from .benchmark import Ranking, consistency_report, rank_spis
from .dataset import SynthConfig, generate_synthetic, load_dataset, save_dataset, window_dataset
from .encoder import FitConfig, fit_to_target, save_params
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
from .pipeline import PipelineConfig, run_pipeline, run_validator_suite
from .training import TrainConfig, train

_QUIET = False


def _log(stage: str, event: str, **fields) -> None:
    record = {"ts": round(time.time(), 3), "stage": stage, "event": event, **fields}
    print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr)


def _say(message: str) -> None:
    if not _QUIET:
        print(message)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommand implementations

def _cmd_gen(args: argparse.Namespace) -> int:
    cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else SynthConfig(seed=args.seed)
    raw = generate_synthetic(cfg)
    windowed = window_dataset(raw, cfg.window_len, cfg.stride)
    save_dataset(windowed, args.out)
    _log("gen", "done", samples=len(windowed.samples), out=args.out)
    _say(f"wrote {len(windowed.samples)} segments from {cfg.n_subjects} subjects to {args.out}")
    return 0


def _cmd_spi(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    names = args.ops.split(",") if args.ops else None
    ops = get_operators(names)
    summary = compute_all(dataset, ops, args.out, jobs=args.jobs, force=args.force)
    _log("spi", "done", **summary.as_dict())
    _say(
        f"computed={summary.computed} skipped={summary.skipped} failed={summary.failed} "
        f"({len(ops)} operators x {len(dataset.samples)} samples)"
    )
    return 0 if summary.failed == 0 else 1


def _cmd_fit(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    (op,) = get_operators([args.target])
    cfg = FitConfig(max_epochs=args.epochs, lr=args.lr, seed=args.seed)
    report = fit_to_target(dataset, op, cfg)
    _write_json(Path(args.out), report.as_dict())
    _log("fit", "done", **report.as_dict())
    _say(
        f"{op.name}: train MSE {report.train_mse_start:.4g} -> {report.train_mse_end:.4g}, "
        f"test MSE {report.test_mse:.4g}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    cfg = TrainConfig(seed=args.seed) if args.epochs is None else TrainConfig(seed=args.seed, epochs=args.epochs)
    params, sps, trace = train(dataset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(params, out / "params.bin")
    sps.save_csv(out / "sps.csv")
    trace.save_csv(out / "trace.csv")
    if not args.no_figures:
        figures.save_trace_figure(trace.rows, out / "trace.png")
    _log("train", "done", epochs=cfg.epochs, final_loss=trace.rows[-1].loss)
    _say(
        f"trained {cfg.epochs} epochs; loss {trace.rows[0].loss:.4g} -> {trace.rows[-1].loss:.4g}; "
        f"wrote params.bin, sps.csv, trace.csv in {out}"
    )
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    sps = SpsRecord.load_csv(args.sps)
    n = len(sps.scores)
    m = int(round(args.ratio * n))
    if args.method == "sclcs":
        coreset = select_topk_sps(sps, m, ratio=args.ratio)
    elif args.method == "sclcs-dense":
        coreset = select_density_balanced(
            sps, m, beta=args.beta, seed=args.seed, ratio=args.ratio
        )
    elif args.method == "random":
        coreset = select_random(sorted(sps.scores), m, seed=args.seed, ratio=args.ratio)
    elif args.method == "kmeans":
        if not args.fc:
            raise SystemExit("--fc <store dir> is required for the kmeans method")
        coreset = select_kmeans(
            FcStore(args.fc), m, reference_op=args.ref_op, seed=args.seed, ratio=args.ratio
        )
    else:  # pragma: no cover - argparse restricts choices
        raise SystemExit(f"unknown method {args.method}")
    coreset.to_json(args.out)
    _log("select", "done", method=args.method, size=len(coreset.sample_ids))
    _say(f"selected {len(coreset.sample_ids)}/{n} samples via {args.method} -> {args.out}")
    return 0


def _cmd_rank(args: argparse.Namespace) -> int:
    store = FcStore(args.fc)
    if args.full:
        sample_ids = store.sample_ids()
        subset_info = "full"
    else:
        coreset = CoreSet.from_json(args.subset)
        sample_ids = list(coreset.sample_ids)
        subset_info = {"method": coreset.method, "ratio": coreset.ratio, "params": coreset.params}
    ranking = rank_spis(store, sample_ids, args.task, pair_cap=args.pair_cap, seed=args.seed)
    ranking = Ranking(
        entries=ranking.entries,
        task=ranking.task,
        dataset_id=ranking.dataset_id,
        sample_ids=ranking.sample_ids,
        provenance={**ranking.provenance, "subset": subset_info},
    )
    ranking.to_json(args.out)
    top = ranking.entries[0]
    _log("rank", "done", task=args.task, operators=len(ranking.entries))
    _say(f"ranked {len(ranking.entries)} operators on {len(sample_ids)} samples; "
         f"top: {top.operator_name} ({top.score:.3f}) -> {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    full = Ranking.from_json(args.truth)
    runs = []
    for path in args.runs.split(","):
        ranking = Ranking.from_json(path.strip())
        subset = ranking.provenance.get("subset")
        if not isinstance(subset, dict):
            raise SystemExit(f"{path}: ranking carries no core-set provenance; "
                             "produce it with `rankcore rank --subset`")
        coreset = CoreSet(
            sample_ids=ranking.sample_ids,
            method=subset["method"],
            ratio=subset.get("ratio"),
            params=subset.get("params", {}),
        )
        runs.append((coreset, ranking))
    ks = tuple(int(k) for k in args.ks.split(","))
    report = consistency_report(full, runs, ks=ks).as_dict()
    payload = {"tasks": {full.task: report}}
    _write_json(Path(args.out), payload)
    if not args.no_figures:
        figures.save_report_figures(payload, Path(args.out).parent / "figures")
    _log("report", "done", runs=len(runs))
    _say(f"aggregated {len(runs)} runs against {args.truth} -> {args.out}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    result = run_validator_suite(args.which, seed=args.seed)
    _write_json(Path(args.out), result)
    for name, sub in result["results"].items():
        _say(f"validator {name}: {'PASS' if sub['ok'] else 'FAIL'}")
    _log("validate", "done", ok=result["ok"])
    return 0 if result["ok"] else 1


def _cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    code, report = run_pipeline(
        cfg,
        args.out,
        jobs=args.jobs,
        validate=args.validate,
        with_figures=not args.no_figures,
        log=_log,
    )
    _say(f"pipeline report written to {Path(args.out) / 'report.json'} (exit {code})")
    return code


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankcore", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
    common.add_argument("--seed", type=int, default=0, help="seed for seedable steps")
    common.add_argument("--quiet", action="store_true", help="suppress the stdout summary")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic windowed dataset")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("spi", parents=[common], help="compute the connectivity store")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ops", help="comma-separated operator names (default: all 20)")
    p.add_argument("--force", action="store_true", help="recompute existing files")
    p.set_defaults(fn=_cmd_spi)

    p = sub.add_parser("fit", parents=[common], help="fit the encoder to an operator target")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("train", parents=[common], help="contrastive training + stability scores")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("select", parents=[common], help="build a core-set")
    p.add_argument("--method", required=True, choices=["sclcs", "sclcs-dense", "random", "kmeans"])
    p.add_argument("--sps", required=True, help="sps.csv from `rankcore train`")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--fc", help="connectivity store (kmeans only)")
    p.add_argument("--ref-op", default="pearson", help="reference operator (kmeans only)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("rank", parents=[common], help="rank operators on a sample subset")
    p.add_argument("--fc", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--subset", help="coreset.json")
    group.add_argument("--full", action="store_true")
    p.add_argument("--task", required=True, choices=["fingerprint", "diagnosis"])
    p.add_argument("--pair-cap", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_rank)

    p = sub.add_parser("report", parents=[common], help="aggregate rankings into nDCG tables")
    p.add_argument("--truth", required=True, help="full-data ranking.json")
    p.add_argument("--runs", required=True, help="comma-separated core-set ranking.json paths")
    p.add_argument("--ks", default="5,10,20")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("validate", parents=[common], help="run the formal-guarantee validators")
    p.add_argument(
        "--which",
        default="all",
        choices=["interference", "mixture", "topk", "coverage", "discrepancy",
                 "consistency", "universal", "all"],
    )
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    p.add_argument("--config", help="PipelineConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--validate", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    global _QUIET
    args = _build_parser().parse_args(argv)
    _QUIET = bool(getattr(args, "quiet", False))
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        _log(args.command, "error", error=f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
