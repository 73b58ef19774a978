"""ROI time-series ingestion, brain-graph construction and synthetic cohorts.

Time-series CSVs hold one column per ROI and one row per time point. The
brain graph connects every unordered ROI pair, gives each ROI a self-loop
(C(110, 2) + 110 = 6105 edges) and links every ROI to an extra global-mean
node (110 more), for 111 nodes and 6215 edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import AdjacencyMatrix, rng_stream
from .population import GENDERS, PhenotypeRecord

N_ROIS = 110
N_NODES = N_ROIS + 1
N_EDGES = N_ROIS * (N_ROIS - 1) // 2 + N_ROIS + N_ROIS


class TimeSeriesFormatError(ValueError):
    """Malformed time-series file; carries the offending location."""

    def __init__(self, path, message, row=None, column=None):
        self.path, self.row, self.column = str(path), row, column
        loc = "".join(f" {k} {v}" for k, v in (("row", row), ("column", column)) if v is not None)
        super().__init__(f"{path}:{loc}: {message}" if loc else f"{path}: {message}")


@dataclass(frozen=True)
class TimePolicy:
    length: int | None = None
    mode: str = "truncate"  # or "pad"
    zscore: bool = True
    transposed: bool = False
    header: bool = False
    n_rois: int = N_ROIS

    def __post_init__(self):
        if self.mode not in ("truncate", "pad"):
            raise ValueError(f"unknown time-length mode {self.mode!r}")
        if self.length is not None and self.length < 2:
            raise ValueError("time length must be at least 2")


@dataclass
class SubjectGraph:
    subject_id: str
    feats: np.ndarray
    adj: AdjacencyMatrix
    label: int | None = None

    @property
    def n_nodes(self) -> int:
        return self.adj.n


@dataclass
class ManifestEntry:
    subject_id: str
    timeseries: str
    phenotype_ref: str | None = None


@dataclass
class CohortManifest:
    entries: list[ManifestEntry]
    phenotype_csv: str | None = None
    atlas_scheme: str = "ho110+global"
    policy: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest subject ids must be unique")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def time_policy(self) -> TimePolicy:
        return TimePolicy(**self.policy)

    def validate(self) -> None:
        missing = [e.timeseries for e in self.entries if not self.resolve(e.timeseries).is_file()]
        if self.phenotype_csv and not self.resolve(self.phenotype_csv).is_file():
            missing.append(self.phenotype_csv)
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "atlas_scheme": self.atlas_scheme,
            "phenotype_csv": self.phenotype_csv,
            "policy": self.policy,
            "subjects": [
                {"subject_id": e.subject_id, "timeseries": e.timeseries, "phenotype_ref": e.phenotype_ref}
                for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "CohortManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(s["subject_id"], s["timeseries"], s.get("phenotype_ref"))
            for s in doc["subjects"]
        ]
        return cls(
            entries,
            phenotype_csv=doc.get("phenotype_csv"),
            atlas_scheme=doc.get("atlas_scheme", "ho110+global"),
            policy=doc.get("policy", {}),
            root=path.parent,
        )


def zscore_rows(ts: np.ndarray) -> np.ndarray:
    mean = ts.mean(axis=1, keepdims=True)
    std = ts.std(axis=1, keepdims=True)
    out = np.zeros_like(ts)
    ok = std[:, 0] > 0
    out[ok] = (ts[ok] - mean[ok]) / std[ok]
    return out


def apply_policy(ts: np.ndarray, policy: TimePolicy) -> np.ndarray:
    """Truncate, z-score, then zero-pad symmetrically (rows are ROIs)."""
    ts = np.asarray(ts, dtype=np.float64)
    if policy.length is not None and ts.shape[1] > policy.length:
        ts = ts[:, : policy.length]
    if policy.zscore:
        ts = zscore_rows(ts)
    if policy.length is not None and ts.shape[1] < policy.length:
        if policy.mode != "pad":
            raise ValueError(f"series has {ts.shape[1]} points, fewer than the required {policy.length}")
        missing = policy.length - ts.shape[1]
        left = missing // 2
        ts = np.pad(ts, ((0, 0), (left, missing - left)))
    return ts


def read_timeseries_raw(path, policy: TimePolicy | None = None) -> np.ndarray:
    """Parse the CSV into a (n_rois, T) array without any normalization."""
    policy = policy or TimePolicy()
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise TimeSeriesFormatError(path, f"cannot read file: {exc}") from exc
    if policy.header and lines:
        lines = lines[1:]
    rows = []
    for r, line in enumerate(lines, start=2 if policy.header else 1):
        if not line.strip():
            continue
        cells = line.split(",")
        vals = []
        for c, cell in enumerate(cells, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise TimeSeriesFormatError(path, f"non-numeric cell {cell.strip()!r}", row=r, column=c) from None
            if not np.isfinite(v):
                raise TimeSeriesFormatError(path, "non-finite value", row=r, column=c)
            vals.append(v)
        if rows and len(vals) != len(rows[0]):
            raise TimeSeriesFormatError(path, f"expected {len(rows[0])} columns, found {len(vals)}", row=r)
        rows.append(vals)
    if not rows:
        raise TimeSeriesFormatError(path, "empty file")
    arr = np.array(rows, dtype=np.float64)
    if not policy.transposed:
        arr = arr.T
    if arr.shape[0] != policy.n_rois:
        raise TimeSeriesFormatError(path, f"expected {policy.n_rois} ROIs, found {arr.shape[0]}")
    if arr.shape[1] < 2:
        raise TimeSeriesFormatError(path, f"need at least 2 time points, found {arr.shape[1]}")
    return arr


def load_timeseries(path, policy: TimePolicy | None = None) -> np.ndarray:
    """Read a subject's ROI table and return a (n_rois, T) feature matrix."""
    policy = policy or TimePolicy()
    return apply_policy(read_timeseries_raw(path, policy), policy)


def write_timeseries(path, ts) -> None:
    """Write a (n_rois, T) array as T rows x n_rois columns, shortest round-trip repr."""
    ts = np.asarray(ts, dtype=np.float64)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for row in ts.T:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


_BRAIN_ADJ: dict[int, AdjacencyMatrix] = {}


def brain_adjacency(n_rois: int = N_ROIS) -> AdjacencyMatrix:
    """All ROI pairs, ROI self-loops, and a global node linked to every ROI; unit weights."""
    if n_rois not in _BRAIN_ADJ:
        dense = np.ones((n_rois + 1, n_rois + 1))
        dense[n_rois, n_rois] = 0.0
        _BRAIN_ADJ[n_rois] = AdjacencyMatrix.from_dense(dense)
    return _BRAIN_ADJ[n_rois]


def build_brain_graph(ts, subject_id: str = "", label: int | None = None) -> SubjectGraph:
    """Append the global-mean node to a (n_rois, T) matrix and attach the brain adjacency."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2:
        raise ValueError("time series must be a 2-D (ROI x time) matrix")
    feats = np.vstack([ts, ts.mean(axis=0, keepdims=True)])
    feats.setflags(write=False)
    return SubjectGraph(subject_id, feats, brain_adjacency(ts.shape[0]), label)


# --- synthetic cohorts --------------------------------------------------

SYNTH_SITES = ("SITE_A", "SITE_B", "SITE_C")


@dataclass
class SyntheticCohort:
    raw: list[np.ndarray]
    records: list[PhenotypeRecord]
    labels: np.ndarray
    signature: np.ndarray
    policy: TimePolicy

    @property
    def graphs(self) -> list[SubjectGraph]:
        return [
            build_brain_graph(apply_policy(ts, self.policy), rec.subject_id, int(lab))
            for ts, rec, lab in zip(self.raw, self.records, self.labels)
        ]


def synth_timeseries(n_subjects: int, T: int, class_gap: float, seed: int, n_rois: int = N_ROIS, n_signature: int = 6):
    """Raw synthetic ROI series.

    Background ROIs are independent AR(1) noise. In class-1 subjects a fixed
    set of signature ROIs additionally carries a shared +/-1 block waveform
    scaled by ``class_gap`` (in noise standard deviations) and a raised
    amplitude, so those ROIs are coupled and stand out from their
    neighbourhood. With ``class_gap == 0`` both classes share one distribution.
    """
    if n_subjects < 4:
        raise ValueError("synthetic cohort needs at least 4 subjects")
    if class_gap < 0:
        raise ValueError("class_gap must be non-negative")
    setup = rng_stream(seed, "synth", "setup")
    signature = np.sort(setup.choice(n_rois, size=n_signature, replace=False))
    block = max(2, T // 16)
    template = np.repeat(setup.choice([-1.0, 1.0], size=-(-T // block)), block)[:T]
    labels = np.arange(n_subjects) % 2
    labels = labels[setup.permutation(n_subjects)]
    raw = []
    for s in range(n_subjects):
        rng = rng_stream(seed, "synth", "subject", s)
        eps = rng.standard_normal((n_rois, T))
        noise = np.empty_like(eps)
        noise[:, 0] = eps[:, 0]
        for t in range(1, T):
            noise[:, t] = 0.3 * noise[:, t - 1] + np.sqrt(1 - 0.09) * eps[:, t]
        ts = 100.0 + noise
        if labels[s] == 1 and class_gap > 0:
            ts[signature] = 100.0 + (1.0 + 0.5 * class_gap) * (class_gap * template + noise[signature])
        raw.append(ts)
    return raw, labels, signature


def synth_cohort(n_subjects: int, T: int = 64, class_gap: float = 3.0, seed: int = 0, policy: TimePolicy | None = None) -> SyntheticCohort:
    """Balanced two-class cohort with phenotypes over three sites; deterministic per seed.

    Phenotypes (age uniform in [7, 58], gender, site) are drawn independently
    of the label, so any class signal comes from the imaging side only.
    """
    raw, labels, signature = synth_timeseries(n_subjects, T, class_gap, seed)
    pheno_rng = rng_stream(seed, "synth", "phenotype")
    records = []
    for s in range(n_subjects):
        age = round(float(pheno_rng.uniform(7.0, 58.0)), 2)
        gender = GENDERS[int(pheno_rng.integers(2))]
        site = SYNTH_SITES[int(pheno_rng.integers(len(SYNTH_SITES)))]
        records.append(PhenotypeRecord(f"sub-{s:04d}", age, gender, site, None, int(labels[s])))
    return SyntheticCohort(raw, records, labels, signature, policy or TimePolicy(length=T))
