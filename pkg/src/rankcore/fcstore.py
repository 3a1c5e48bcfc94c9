"""Persistent store of per-(operator, sample) connectivity matrices.

Layout: ``<root>/<operator_name>/<sample_id>.csv`` holding an N x N CSV, plus
``<root>/index.json`` listing completed pairs and carrying sample metadata so
downstream ranking can run from the store alone. Files are written once via
atomic rename, so a partially finished run can resume by skipping existing
files.
"""
from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, TimeSeriesSample
from .spi import FcMatrix, SpiOperator, compute_fc

__all__ = ["ComputeSummary", "compute_all", "FcStore", "write_index"]


@dataclass
class ComputeSummary:
    computed: int = 0
    skipped: int = 0
    failed: int = 0
    failures: list[dict[str, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "computed": self.computed,
            "skipped": self.skipped,
            "failed": self.failed,
            "failures": self.failures,
        }


def _fc_path(root: Path, op_name: str, sample_id: str) -> Path:
    return root / op_name / f"{sample_id}.csv"


def _write_matrix(path: Path, values: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            np.savetxt(fh, values, fmt="%.17g", delimiter=",")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _compute_one(op: SpiOperator, sample: TimeSeriesSample) -> tuple[str, str, np.ndarray | None, str]:
    try:
        fc = compute_fc(op, sample)
        return op.name, sample.sample_id, fc.values, ""
    except Exception as exc:  # per-pair failures are recorded, not fatal
        return op.name, sample.sample_id, None, f"{type(exc).__name__}: {exc}"


def write_index(root: Path, dataset: Dataset | None = None) -> dict:
    """Scan the store directory and (re)write ``index.json``."""
    root = Path(root)
    operators: dict[str, list[str]] = {}
    for op_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        sids = sorted(p.name[: -len(".csv")] for p in op_dir.glob("*.csv"))
        if sids:
            operators[op_dir.name] = sids
    index: dict = {"operators": operators}
    if dataset is not None:
        index["n_regions"] = dataset.n_regions
        index["samples"] = {
            s.sample_id: {
                "subject_id": s.subject_id,
                "class_label": s.class_label,
                "site_id": s.site_id,
            }
            for s in dataset.samples
        }
    else:
        existing = root / "index.json"
        if existing.exists():
            prev = json.loads(existing.read_text())
            for key in ("n_regions", "samples"):
                if key in prev:
                    index[key] = prev[key]
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return index


def compute_all(
    d: Dataset,
    ops: list[SpiOperator],
    out: str | Path,
    jobs: int = 1,
    force: bool = False,
) -> ComputeSummary:
    """Compute every (operator, sample) pair into the store.

    Existing files are skipped unless ``force``; pairs are independent and may
    run on multiple worker processes. Per-pair operator failures are counted
    and recorded without aborting the run.
    """
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    summary = ComputeSummary()

    todo: list[tuple[SpiOperator, TimeSeriesSample]] = []
    for op in ops:
        for sample in d.samples:
            path = _fc_path(root, op.name, sample.sample_id)
            if path.exists() and not force:
                summary.skipped += 1
            else:
                todo.append((op, sample))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_compute_one, *zip(*todo), chunksize=8))
    else:
        results = [_compute_one(op, sample) for op, sample in todo]

    for op_name, sample_id, values, err in results:
        if values is None:
            summary.failed += 1
            summary.failures.append({"operator": op_name, "sample_id": sample_id, "error": err})
        else:
            _write_matrix(_fc_path(root, op_name, sample_id), values)
            summary.computed += 1

    write_index(root, d)
    return summary


class FcStore:
    """Read-side view over a computed store directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        index_path = self.root / "index.json"
        if not index_path.exists():
            raise FileNotFoundError(f"no index.json in {self.root}")
        self._index = json.loads(index_path.read_text())

    @property
    def operators(self) -> list[str]:
        return sorted(self._index["operators"])

    def sample_ids(self, op_name: str | None = None) -> list[str]:
        if op_name is not None:
            return list(self._index["operators"][op_name])
        all_ids: set[str] = set()
        for sids in self._index["operators"].values():
            all_ids.update(sids)
        return sorted(all_ids)

    @property
    def sample_meta(self) -> dict[str, dict]:
        return self._index.get("samples", {})

    def has(self, op_name: str, sample_id: str) -> bool:
        return _fc_path(self.root, op_name, sample_id).exists()

    def load(self, op_name: str, sample_id: str) -> FcMatrix:
        path = _fc_path(self.root, op_name, sample_id)
        if not path.exists():
            raise FileNotFoundError(f"missing FC entry {op_name}/{sample_id}")
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        return FcMatrix(operator_name=op_name, sample_id=sample_id, values=values)
