"""Subject-level population graph built from phenotypes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import AdjacencyMatrix

GENDERS = ("male", "female")

_GENDER_ALIASES = {"m": "male", "male": "male", "1": "male", "f": "female", "female": "female", "2": "female"}


# 1 = ASD, 0 = control; ABIDE's native coding uses 2 for controls
_DX_CODES = {"1": 1, "0": 0, "2": 0}


class PhenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class PhenotypeRecord:
    subject_id: str
    age: float
    gender: str
    site: str
    handedness: str | None = None
    dx_group: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.age) and self.age > 0):
            raise PhenotypeError(f"{self.subject_id}: age must be finite and positive, got {self.age}")
        gender = _GENDER_ALIASES.get(str(self.gender).strip().lower())
        if gender is None:
            raise PhenotypeError(f"{self.subject_id}: unknown gender {self.gender!r}")
        object.__setattr__(self, "gender", gender)
        if not str(self.site).strip():
            raise PhenotypeError(f"{self.subject_id}: site is required")


@dataclass(frozen=True)
class PhenotypeSchema:
    age_min: float
    age_max: float
    sites: tuple[str, ...]
    handedness: tuple[str, ...] = ()
    include_handedness: bool = False

    @classmethod
    def from_records(cls, records, include_handedness: bool = False) -> "PhenotypeSchema":
        records = list(records)
        if not records:
            raise PhenotypeError("cannot build a schema from an empty cohort")
        ages = [r.age for r in records]
        sites = tuple(sorted({r.site for r in records}))
        hands = tuple(sorted({r.handedness for r in records if r.handedness}))
        return cls(min(ages), max(ages), sites, hands, include_handedness)

    @property
    def dim(self) -> int:
        extra = len(self.handedness) if self.include_handedness else 0
        return 1 + len(GENDERS) + len(self.sites) + extra


@dataclass
class PopulationGraph:
    adjacency: AdjacencyMatrix
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    masks: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.adjacency.n

    def with_features(self, features, labels) -> "PopulationGraph":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.shape[0] != self.n or labels.shape[0] != self.n:
            raise ValueError("features and labels must have one row per subject")
        return PopulationGraph(self.adjacency, features, labels, dict(self.masks))


def encode_phenotype(rec: PhenotypeRecord, schema: PhenotypeSchema) -> np.ndarray:
    """[min-max scaled age] ++ one-hot(gender) ++ one-hot(site)."""
    if rec.site not in schema.sites:
        raise PhenotypeError(f"{rec.subject_id}: site {rec.site!r} not in schema")
    span = schema.age_max - schema.age_min
    age = 0.0 if span <= 0 else (rec.age - schema.age_min) / span
    vec = np.zeros(schema.dim)
    vec[0] = age
    vec[1 + GENDERS.index(rec.gender)] = 1.0
    vec[3 + schema.sites.index(rec.site)] = 1.0
    if schema.include_handedness and rec.handedness in schema.handedness:
        vec[3 + len(schema.sites) + schema.handedness.index(rec.handedness)] = 1.0
    return vec


def phenotype_similarity(mu, mv) -> float:
    """Absolute cosine similarity of two phenotype vectors."""
    mu = np.asarray(mu, dtype=np.float64)
    mv = np.asarray(mv, dtype=np.float64)
    return abs(float(np.dot(mu, mv)) / (float(np.linalg.norm(mu)) * float(np.linalg.norm(mv))))


def similarity_matrix(vectors) -> np.ndarray:
    m = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    sim = np.abs((m @ m.T) / np.outer(norms, norms))
    sim = np.minimum(sim, 1.0)
    # mirror the upper triangle so Sim(u, v) and Sim(v, u) are the same float
    return np.triu(sim) + np.triu(sim, 1).T


def build_population_graph(records, threshold: float = 0.5, schema: PhenotypeSchema | None = None) -> PopulationGraph:
    """Binary graph with an edge wherever Sim(u, v) > threshold (u != v)."""
    records = list(records)
    if len(records) < 2:
        raise PhenotypeError("population graph needs at least two subjects")
    schema = schema or PhenotypeSchema.from_records(records)
    sim = similarity_matrix([encode_phenotype(r, schema) for r in records])
    adj = (sim > threshold).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    return PopulationGraph(AdjacencyMatrix.from_dense(adj))


def read_phenotype_csv(path) -> list[PhenotypeRecord]:
    """Columns: subject_id, age, gender, site, handedness (may be blank), dx_group."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "age", "gender", "site"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise PhenotypeError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                dx = (row.get("dx_group") or "").strip()
                out.append(
                    PhenotypeRecord(
                        subject_id=row["subject_id"].strip(),
                        age=float(row["age"]),
                        gender=row["gender"],
                        site=row["site"].strip(),
                        handedness=(row.get("handedness") or "").strip() or None,
                        dx_group=_DX_CODES[dx] if dx else None,
                    )
                )
            except (ValueError, TypeError, KeyError) as exc:
                raise PhenotypeError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_phenotype_csv(path, records) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "age", "gender", "site", "handedness", "dx_group"])
        for r in records:
            w.writerow([r.subject_id, repr(float(r.age)), r.gender, r.site, r.handedness or "",
                        "" if r.dx_group is None else r.dx_group])
