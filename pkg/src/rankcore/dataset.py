"""Synthetic multivariate time-series datasets with planted covariance prototypes.

Samples are N-region x T-timepoint matrices grouped by subject. The generator
plants K block-structured correlation prototypes, assigns subjects to them
round-robin, and emits AR(1)-smoothed Gaussian series so that downstream
connectivity estimates recover the planted structure.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "TimeSeriesSample",
    "Dataset",
    "SynthConfig",
    "prototype_matrices",
    "generate_synthetic",
    "window_dataset",
    "save_dataset",
    "load_dataset",
]

_EIG_FLOOR = 1e-6


@dataclass(frozen=True)
class TimeSeriesSample:
    """One windowed segment: an N x T real matrix plus subject/class metadata."""

    sample_id: str
    subject_id: str
    class_label: int
    data: np.ndarray
    site_id: str | None = None

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"sample {self.sample_id!r}: data must be 2-D, got ndim={arr.ndim}")
        n, t = arr.shape
        if n < 2 or t < 8:
            raise ValueError(
                f"sample {self.sample_id!r}: need at least 2 regions and 8 time points, got {n}x{t}"
            )
        if not np.isfinite(arr).all():
            raise ValueError(f"sample {self.sample_id!r}: non-finite entries in data")
        if self.class_label not in (0, 1):
            raise ValueError(f"sample {self.sample_id!r}: class_label must be 0 or 1")
        object.__setattr__(self, "data", arr)

    @property
    def n_regions(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of samples sharing a region count."""

    samples: tuple[TimeSeriesSample, ...]
    name: str = "dataset"
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValueError("dataset has no samples")
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample_id values in dataset")
        n = self.samples[0].n_regions
        if any(s.n_regions != n for s in self.samples):
            raise ValueError("all samples must share the same region count")
        by_subject: dict[str, int] = {}
        for s in self.samples:
            prev = by_subject.setdefault(s.subject_id, s.class_label)
            if prev != s.class_label:
                raise ValueError(f"subject {s.subject_id!r} has inconsistent class labels")

    @property
    def n_regions(self) -> int:
        return self.samples[0].n_regions

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.subject_id, None)
        return list(seen)

    def by_id(self, sample_id: str) -> TimeSeriesSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted-prototype generator.

    ``class_map`` sends each prototype index to a 0/1 label; by default
    prototype k maps to k mod 2 so the label structure is cohort-level.
    """

    n_regions: int = 16
    t_total: int = 210
    window_len: int = 70
    stride: int = 35
    n_subjects: int = 60
    n_prototypes: int = 4
    prototype_separation: float = 0.6
    subject_jitter: float = 0.1
    noise_sigma: float = 0.3
    ar_coeff: float = 0.3
    class_map: dict[int, int] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_prototypes < 1:
            raise ValueError("n_prototypes must be >= 1")
        if not (0.0 < self.prototype_separation <= 1.0):
            raise ValueError("prototype_separation must lie in (0, 1]")
        if self.window_len > self.t_total:
            raise ValueError("window_len must not exceed t_total")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.subject_jitter < 0 or self.noise_sigma < 0:
            raise ValueError("subject_jitter and noise_sigma must be >= 0")
        if not (0.0 <= self.ar_coeff < 1.0):
            raise ValueError("ar_coeff must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.class_map is not None:
            missing = [k for k in range(self.n_prototypes) if k not in self.class_map]
            if missing:
                raise ValueError(f"class_map missing prototypes {missing}")
            bad = [v for v in self.class_map.values() if v not in (0, 1)]
            if bad:
                raise ValueError("class_map values must be 0 or 1")

    def label_of(self, prototype: int) -> int:
        if self.class_map is not None:
            return self.class_map[prototype]
        return prototype % 2

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["class_map"] is not None:
            d["class_map"] = {str(k): v for k, v in d["class_map"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        d = dict(d)
        if d.get("class_map") is not None:
            d["class_map"] = {int(k): int(v) for k, v in d["class_map"].items()}
        return cls(**d)


def _project_positive_definite(mat: np.ndarray) -> np.ndarray:
    """Clip eigenvalues at a small floor and renormalize the diagonal to 1."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, _EIG_FLOOR, None)
    repaired = (vecs * vals) @ vecs.T
    diag = np.diag(repaired).copy()
    if np.any(diag <= 0):
        raise ValueError("degenerate matrix: non-positive diagonal after eigenvalue clipping")
    scale = 1.0 / np.sqrt(diag)
    repaired = repaired * np.outer(scale, scale)
    np.fill_diagonal(repaired, 1.0)
    return (repaired + repaired.T) / 2.0


def _seed_streams(cfg: SynthConfig) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    proto_ss, subj_ss, series_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    return (
        np.random.default_rng(proto_ss),
        np.random.default_rng(subj_ss),
        np.random.default_rng(series_ss),
    )


def prototype_matrices(cfg: SynthConfig) -> list[np.ndarray]:
    """Build the K planted prototype correlation matrices for a config.

    Each prototype partitions the regions into random blocks; within-block
    correlation equals ``prototype_separation``, off-block correlation is 0,
    and the result is repaired to a positive-definite correlation matrix.
    """
    rng, _, _ = _seed_streams(cfg)
    n = cfg.n_regions
    n_blocks = max(2, min(n, n // 4 if n >= 8 else 2))
    protos = []
    for _ in range(cfg.n_prototypes):
        perm = rng.permutation(n)
        blocks = np.array_split(perm, n_blocks)
        c = np.zeros((n, n))
        for block in blocks:
            c[np.ix_(block, block)] = cfg.prototype_separation
        np.fill_diagonal(c, 1.0)
        protos.append(_project_positive_definite(c))
    return protos


def _subject_covariance(proto: np.ndarray, jitter: float, rng: np.random.Generator) -> np.ndarray:
    n = proto.shape[0]
    if jitter == 0.0:
        return proto
    noise = rng.standard_normal((n, n))
    return _project_positive_definite(proto + jitter * (noise + noise.T) / 2.0)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Emit one full-length series per subject; a pure function of the config."""
    protos = prototype_matrices(cfg)
    _, subj_rng, series_rng = _seed_streams(cfg)

    samples = []
    for i in range(cfg.n_subjects):
        proto_idx = i % cfg.n_prototypes
        cov = _subject_covariance(protos[proto_idx], cfg.subject_jitter, subj_rng)
        chol = np.linalg.cholesky(cov)
        x = chol @ series_rng.standard_normal((cfg.n_regions, cfg.t_total))
        if cfg.ar_coeff > 0.0:
            x = lfilter([1.0], [1.0, -cfg.ar_coeff], x, axis=1)
        sd = x.std(axis=1, ddof=0)
        sd[sd == 0.0] = 1.0
        x = x / sd[:, None]
        if cfg.noise_sigma > 0.0:
            x = x + cfg.noise_sigma * series_rng.standard_normal(x.shape)
        subject_id = f"sub{i:03d}"
        samples.append(
            TimeSeriesSample(
                sample_id=subject_id,
                subject_id=subject_id,
                class_label=cfg.label_of(proto_idx),
                data=x,
            )
        )
    return Dataset(samples=tuple(samples), name="synthetic", provenance={"synth_config": cfg.to_dict()})


def window_dataset(raw: Dataset, window_len: int, stride: int) -> Dataset:
    """Slice each sample into overlapping segments; trailing partial windows are dropped.

    A length-T sample yields floor((T - window_len)/stride) + 1 segments with
    ids ``<parent>#<k>``; subject, class, and site metadata are inherited.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    segments = []
    for s in raw.samples:
        t = s.n_timepoints
        if window_len > t:
            raise ValueError(
                f"window_len {window_len} exceeds series length {t} for sample {s.sample_id!r}"
            )
        starts = range(0, t - window_len + 1, stride)
        for k, start in enumerate(starts):
            segments.append(
                TimeSeriesSample(
                    sample_id=f"{s.sample_id}#{k}",
                    subject_id=s.subject_id,
                    class_label=s.class_label,
                    site_id=s.site_id,
                    data=s.data[:, start : start + window_len].copy(),
                )
            )
    provenance = dict(raw.provenance)
    provenance["windowing"] = {"window_len": window_len, "stride": stride, "parent": raw.name}
    return Dataset(samples=tuple(segments), name=f"{raw.name}-windowed", provenance=provenance)


def save_dataset(d: Dataset, directory: str | Path) -> Path:
    """Write ``manifest.json`` plus one headerless N x T CSV per sample."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(d.samples):
        fname = f"s{i:05d}.csv"
        np.savetxt(directory / fname, s.data, fmt="%.17g", delimiter=",")
        entries.append(
            {
                "sample_id": s.sample_id,
                "subject_id": s.subject_id,
                "class_label": s.class_label,
                "site_id": s.site_id,
                "file": fname,
            }
        )
    manifest = {
        "name": d.name,
        "n_regions": d.n_regions,
        "provenance": d.provenance,
        "samples": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def _parse_sample_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for row_idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            parsed = []
            for col_idx, cell in enumerate(cells):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path.name}: non-numeric cell at row {row_idx}, column {col_idx}: {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path.name}: empty sample file")
    width = len(rows[0])
    for row_idx, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path.name}: ragged row {row_idx} (expected {width} columns)")
    return np.asarray(rows, dtype=float)


def load_dataset(directory: str | Path) -> Dataset:
    """Load a dataset saved by :func:`save_dataset`; round-trips bit-exactly."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["samples"]:
        path = directory / entry["file"]
        if not path.exists():
            raise FileNotFoundError(f"manifest references missing sample file {entry['file']!r}")
        data = _parse_sample_csv(path)
        if data.shape[0] != manifest["n_regions"]:
            raise ValueError(
                f"{entry['file']!r}: {data.shape[0]} rows but manifest declares "
                f"{manifest['n_regions']} regions"
            )
        samples.append(
            TimeSeriesSample(
                sample_id=entry["sample_id"],
                subject_id=entry["subject_id"],
                class_label=int(entry["class_label"]),
                site_id=entry.get("site_id"),
                data=data,
            )
        )
    return Dataset(
        samples=tuple(samples),
        name=manifest.get("name", "dataset"),
        provenance=manifest.get("provenance", {}),
    )
