"""Multi-modal subject cohorts: connectivity vectors, volumes, synthesis and I/O.

A connectivity vector is the row-major upper triangle (diagonal excluded) of a
symmetric component-correlation matrix. Volumes are 3-D grids normalized to
[-1, 1]. Either modality may be absent for a given subject.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.model_selection import StratifiedKFold

DIAGNOSES = ("CN", "AD")
LABELS = {"CN": 0, "AD": 1}
SYMMETRY_TOL = 1e-6


class CohortError(ValueError):
    """Raised for malformed cohorts, records or cohort files."""


def n_components_from_length(length: int) -> int:
    """Return C such that C*(C-1)/2 == length, or raise CohortError."""
    if length < 1:
        raise CohortError(f"connectivity length {length} is not triangular")
    c = int(round((1 + math.sqrt(1 + 8 * length)) / 2))
    if c * (c - 1) // 2 != length:
        raise CohortError(f"connectivity length {length} is not of the form C*(C-1)/2")
    return c


def vectorize_upper_triangle(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise CohortError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=SYMMETRY_TOL, rtol=0):
        raise CohortError("matrix is not symmetric")
    if np.any(np.abs(m) > 1):
        raise CohortError("matrix entries must lie in [-1, 1]")
    rows, cols = np.triu_indices(m.shape[0], k=1)
    return m[rows, cols]


def devectorize(vec) -> np.ndarray:
    """Rebuild the symmetric matrix (unit diagonal) from a connectivity vector."""
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1:
        raise CohortError("connectivity vector must be 1-D")
    c = n_components_from_length(v.size)
    m = np.eye(c)
    rows, cols = np.triu_indices(c, k=1)
    m[rows, cols] = v
    m[cols, rows] = v
    return m


def _frozen(arr, dtype=np.float32) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: str
    diagnosis: str
    fnc: np.ndarray | None = None
    t1: np.ndarray | None = None

    def __post_init__(self):
        if self.diagnosis not in LABELS:
            raise CohortError(f"{self.subject_id}: unknown diagnosis {self.diagnosis!r}")
        if self.fnc is None and self.t1 is None:
            raise CohortError(f"{self.subject_id}: at least one modality is required")
        if self.fnc is not None:
            fnc = _frozen(self.fnc)
            if fnc.ndim != 1:
                raise CohortError(f"{self.subject_id}: fnc must be 1-D")
            n_components_from_length(fnc.size)
            if np.any(np.abs(fnc) > 1) or not np.all(np.isfinite(fnc)):
                raise CohortError(f"{self.subject_id}: fnc entries must lie in [-1, 1]")
            object.__setattr__(self, "fnc", fnc)
        if self.t1 is not None:
            t1 = _frozen(self.t1)
            if t1.ndim != 3:
                raise CohortError(f"{self.subject_id}: t1 must be 3-D")
            object.__setattr__(self, "t1", t1)

    @property
    def label(self) -> int:
        return LABELS[self.diagnosis]

    @property
    def is_paired(self) -> bool:
        return self.fnc is not None and self.t1 is not None

    def same_as(self, other: "SubjectRecord") -> bool:
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.subject_id == other.subject_id
            and self.diagnosis == other.diagnosis
            and eq(self.fnc, other.fnc)
            and eq(self.t1, other.t1)
        )


@dataclass(frozen=True, eq=False)
class Cohort:
    records: tuple
    fnc_dim: int
    volume_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        n_components_from_length(self.fnc_dim)
        seen = set()
        for r in self.records:
            if r.subject_id in seen:
                raise CohortError(f"duplicate subject id {r.subject_id!r}")
            seen.add(r.subject_id)
            if r.fnc is not None and r.fnc.size != self.fnc_dim:
                raise CohortError(
                    f"{r.subject_id}: fnc length {r.fnc.size} != cohort fnc_dim {self.fnc_dim}"
                )
            if r.t1 is not None and r.t1.shape != self.volume_shape:
                raise CohortError(
                    f"{r.subject_id}: volume shape {r.t1.shape} != {self.volume_shape}"
                )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_components(self) -> int:
        return n_components_from_length(self.fnc_dim)

    @property
    def ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def is_complete(self) -> bool:
        return all(r.is_paired for r in self.records)

    def paired(self) -> "Cohort":
        """The subset P of records carrying both modalities, in cohort order."""
        return self.with_records(r for r in self.records if r.is_paired)

    def with_records(self, records: Iterable[SubjectRecord]) -> "Cohort":
        return replace(self, records=tuple(records))

    def subset(self, ids: Iterable[str]) -> "Cohort":
        wanted = set(ids)
        missing = wanted - set(self.ids)
        if missing:
            raise CohortError(f"unknown subject ids: {sorted(missing)[:5]}")
        return self.with_records(r for r in self.records if r.subject_id in wanted)

    def record(self, subject_id: str) -> SubjectRecord:
        for r in self.records:
            if r.subject_id == subject_id:
                return r
        raise KeyError(subject_id)

    def fnc_array(self) -> np.ndarray:
        """Stack present connectivity vectors, shape (n, F)."""
        rows = [r.fnc for r in self.records if r.fnc is not None]
        return np.stack(rows) if rows else np.zeros((0, self.fnc_dim), np.float32)

    def t1_array(self) -> np.ndarray:
        """Stack present volumes, shape (n, D1, D2, D3)."""
        vols = [r.t1 for r in self.records if r.t1 is not None]
        return np.stack(vols) if vols else np.zeros((0, *self.volume_shape), np.float32)

    def counts(self) -> dict:
        out = {}
        for dx in DIAGNOSES:
            recs = [r for r in self.records if r.diagnosis == dx]
            out[dx] = {
                "fnc": sum(r.fnc is not None for r in recs),
                "t1": sum(r.t1 is not None for r in recs),
                "paired": sum(r.is_paired for r in recs),
            }
        return out

    def same_as(self, other: "Cohort") -> bool:
        return (
            self.fnc_dim == other.fnc_dim
            and self.volume_shape == other.volume_shape
            and len(self) == len(other)
            and all(a.same_as(b) for a, b in zip(self.records, other.records))
        )


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic cohort with a known cross-modal mapping.

    ``missing_fnc_fraction`` and ``missing_t1_fraction`` are either one fraction
    applied per class or a mapping ``{"CN": f, "AD": f}``.
    """

    n_cn: int = 32
    n_ad: int = 32
    missing_fnc_fraction: float | Mapping[str, float] = 0.0
    n_components: int = 8
    volume_shape: tuple = (16, 16, 16)
    latent_dim: int = 4
    effect_size: float = 0.3
    noise_sigma: float = 0.1
    seed: int = 0
    missing_t1_fraction: float | Mapping[str, float] = 0.0
    latent_scale: float = 0.25
    n_affected_pairs: int = 5
    fnc_effect_scale: float = 1.0


@dataclass(frozen=True, eq=False)
class GroundTruth:
    region: tuple  # ((lo, hi), (lo, hi), (lo, hi)) half-open voxel box
    affected_pairs: np.ndarray
    pair_signs: np.ndarray
    latents: dict = field(default_factory=dict)

    def region_mask(self, shape) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        mask[tuple(slice(lo, hi) for lo, hi in self.region)] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "region": [list(b) for b in self.region],
            "affected_pairs": self.affected_pairs.tolist(),
            "pair_signs": self.pair_signs.tolist(),
            "latents": {k: v.tolist() for k, v in self.latents.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            region=tuple(tuple(b) for b in d["region"]),
            affected_pairs=np.asarray(d["affected_pairs"], dtype=np.int64),
            pair_signs=np.asarray(d["pair_signs"], dtype=np.float64),
            latents={k: np.asarray(v) for k, v in d["latents"].items()},
        )


def _fraction_for(frac, dx: str) -> float:
    f = frac[dx] if isinstance(frac, Mapping) else frac
    if not 0.0 <= f <= 1.0:
        raise CohortError(f"missing fraction {f} outside [0, 1]")
    return float(f)


def atrophy_region(shape) -> tuple:
    """Fixed box (a quarter of each axis) off the volume centre."""
    centre = (0.35, 0.55, 0.45)
    box = []
    for dim, c in zip(shape, centre):
        half = max(1, int(round(dim / 8)))
        mid = int(round(c * (dim - 1)))
        lo = min(max(0, mid - half), dim - 2 * half)
        box.append((lo, lo + 2 * half))
    return tuple(box)


def generate_synthetic_cohort(spec: SyntheticSpec) -> tuple[Cohort, GroundTruth]:
    """Draw a two-class cohort whose modalities share a latent vector.

    Each subject has latent ``z``. The volume is a smooth template, plus smooth
    latent fields weighted by ``z``, minus ``effect_size`` inside a fixed box for
    AD, plus white noise, clipped to [-1, 1]. The connectivity vector is
    ``tanh`` of a base pattern, a linear map of ``z``, signed AD offsets on a
    fixed set of pairs, and white noise.
    """
    if spec.n_cn <= 0 or spec.n_ad <= 0:
        raise CohortError("n_cn and n_ad must be positive")
    if spec.n_components < 2:
        raise CohortError("need at least 2 components")
    if spec.latent_dim < 1 or spec.effect_size < 0 or spec.noise_sigma < 0:
        raise CohortError("latent_dim must be >= 1; effect_size and noise_sigma >= 0")
    shape = tuple(int(s) for s in spec.volume_shape)
    n_pairs = spec.n_components * (spec.n_components - 1) // 2
    rng = np.random.default_rng(spec.seed)

    # fixed structure shared by all subjects
    grid = np.stack(np.meshgrid(*[np.linspace(0, 1, s) for s in shape], indexing="ij"))
    r2 = (((grid - 0.5) / 0.3) ** 2).sum(axis=0)
    template = 0.6 * np.exp(-r2 / 2) - 0.3
    region = atrophy_region(shape)
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(lo, hi) for lo, hi in region)] = True
    sigma = max(1.0, min(shape) / 8)
    fields = np.stack([gaussian_filter(rng.standard_normal(shape), sigma) for _ in range(spec.latent_dim)])
    fields /= fields.reshape(spec.latent_dim, -1).std(axis=1)[:, None, None, None]
    fields *= spec.latent_scale
    base = rng.normal(0.0, 0.3, n_pairs)
    fnc_map = rng.normal(0.0, 1.0, (spec.latent_dim, n_pairs)) * (2 * spec.latent_scale / np.sqrt(spec.latent_dim))
    n_aff = min(spec.n_affected_pairs, n_pairs)
    affected = np.sort(rng.choice(n_pairs, size=n_aff, replace=False))
    signs = np.where(np.arange(n_aff) % 2 == 0, 1.0, -1.0)

    diagnoses = ["CN"] * spec.n_cn + ["AD"] * spec.n_ad
    n = len(diagnoses)
    z = rng.standard_normal((n, spec.latent_dim))
    noise_v = rng.standard_normal((n, *shape)) * spec.noise_sigma
    noise_f = rng.standard_normal((n, n_pairs)) * spec.noise_sigma

    # missingness, stratified by class
    drop_fnc = np.zeros(n, dtype=bool)
    drop_t1 = np.zeros(n, dtype=bool)
    for dx in DIAGNOSES:
        idx = np.flatnonzero(np.array(diagnoses) == dx)
        n_t1 = int(round(_fraction_for(spec.missing_t1_fraction, dx) * idx.size))
        n_fnc = int(round(_fraction_for(spec.missing_fnc_fraction, dx) * idx.size))
        if n_t1 + n_fnc > idx.size:
            raise CohortError(f"{dx}: missing fractions would leave subjects without any modality")
        perm = rng.permutation(idx)
        drop_t1[perm[:n_t1]] = True
        drop_fnc[perm[n_t1:n_t1 + n_fnc]] = True

    records = []
    latents = {}
    for i, dx in enumerate(diagnoses):
        sid = f"sub-{i:04d}"
        is_ad = dx == "AD"
        vol = template + np.tensordot(z[i], fields, axes=1) + noise_v[i]
        if is_ad:
            vol = vol - spec.effect_size * mask
        vol = np.clip(vol, -1.0, 1.0)
        pre = base + z[i] @ fnc_map + noise_f[i]
        if is_ad:
            pre[affected] += spec.fnc_effect_scale * spec.effect_size * signs
        fnc = np.tanh(pre)
        records.append(SubjectRecord(
            sid, dx,
            fnc=None if drop_fnc[i] else fnc,
            t1=None if drop_t1[i] else vol,
        ))
        latents[sid] = z[i]
    cohort = Cohort(tuple(records), fnc_dim=n_pairs, volume_shape=shape)
    return cohort, GroundTruth(region, affected, signs, latents)


# ---------------------------------------------------------------------------
# folds


def stratified_kfold(cohort: Cohort, k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Split subject ids into k folds stratified on diagnosis."""
    if k < 2:
        raise CohortError("k must be >= 2")
    labels = cohort.labels
    for dx, lab in LABELS.items():
        n = int((labels == lab).sum())
        if 0 < n < k:
            raise CohortError(f"class {dx} has {n} members, fewer than k={k}")
    if len(set(labels.tolist())) < 2:
        raise CohortError("stratified folds need both classes")
    ids = np.array(cohort.ids)
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % (2**32))
    folds = []
    for train_idx, test_idx in skf.split(np.zeros(len(ids)), labels):
        folds.append((ids[train_idx].tolist(), ids[test_idx].tolist()))
    return folds


# ---------------------------------------------------------------------------
# files


def _read_delimited(path: Path) -> list[list[str]]:
    text = path.read_text()
    delim = "\t" if path.suffix.lower() in {".tsv", ".tab"} else ","
    return [row for row in csv.reader(text.splitlines(), delimiter=delim) if row]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_fnc_table(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CohortError(f"FNC table not found: {path}")
    rows = _read_delimited(path)
    if rows and not all(_is_number(v) for v in rows[0]):
        rows = rows[1:]
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise CohortError(f"{path}: FNC rows have inconsistent lengths {sorted(lengths)}")
    table = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    if table.size:
        n_components_from_length(table.shape[1])
    return table


def load_cohort(volume_dir, fnc_table, manifest, intensity_range: Sequence[float] | None = None) -> Cohort:
    """Read a cohort from NIfTI volumes, a delimited FNC table and a manifest.

    Manifest columns: ``subject_id, diagnosis, volume_path, fnc_row_index``;
    the last two may be blank. Volumes are rescaled linearly to [-1, 1] using
    the cohort-wide minimum and maximum unless ``intensity_range`` fixes them.
    """
    import nibabel as nib

    volume_dir = Path(volume_dir)
    manifest = Path(manifest)
    if not manifest.exists():
        raise CohortError(f"manifest not found: {manifest}")
    table = read_fnc_table(fnc_table) if fnc_table is not None else np.zeros((0, 1))
    with manifest.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    required = {"subject_id", "diagnosis"}
    if rows and not required <= set(rows[0]):
        raise CohortError(f"{manifest}: manifest needs columns {sorted(required)}")

    entries = []
    shape = None
    for row in rows:
        sid = row["subject_id"].strip()
        vol = None
        vpath = (row.get("volume_path") or "").strip()
        if vpath:
            p = volume_dir / vpath
            if not p.exists():
                raise CohortError(f"{sid}: volume file not found: {p}")
            vol = np.asarray(nib.load(str(p)).get_fdata(dtype=np.float64))
            if vol.ndim == 4 and vol.shape[3] == 1:
                vol = vol[..., 0]
            if shape is None:
                shape = vol.shape
            elif vol.shape != shape:
                raise CohortError(f"{sid}: volume shape {vol.shape} differs from {shape}")
        fnc = None
        fidx = (row.get("fnc_row_index") or "").strip()
        if fidx:
            i = int(fidx)
            if not 0 <= i < len(table):
                raise CohortError(f"{sid}: fnc_row_index {i} outside table of {len(table)} rows")
            fnc = table[i]
        entries.append((sid, row["diagnosis"].strip(), fnc, vol))

    if shape is not None:
        if intensity_range is None:
            lo = min(v.min() for *_, v in entries if v is not None)
            hi = max(v.max() for *_, v in entries if v is not None)
        else:
            lo, hi = intensity_range
        if hi <= lo:
            raise CohortError("volume intensity range is degenerate")
    records = []
    for sid, dx, fnc, vol in entries:
        if vol is not None:
            vol = np.clip(2.0 * (vol - lo) / (hi - lo) - 1.0, -1.0, 1.0)
        records.append(SubjectRecord(sid, dx, fnc=fnc, t1=vol))
    fnc_dim = table.shape[1] if len(table) else None
    if fnc_dim is None:
        raise CohortError("cohort has no FNC table rows; fnc_dim cannot be inferred")
    return Cohort(tuple(records), fnc_dim=fnc_dim, volume_shape=shape or (1, 1, 1))


def save_cohort(cohort: Cohort, directory) -> dict:
    """Write ``manifest.csv``, ``fnc.csv`` and ``volumes/<id>.nii`` under ``directory``.

    Volumes are stored as float32 NIfTI with an identity affine, uncompressed so
    that identical cohorts produce identical bytes.
    """
    import nibabel as nib

    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    fnc_rows = []
    manifest_rows = []
    for r in cohort.records:
        vpath = ""
        if r.t1 is not None:
            vpath = f"{r.subject_id}.nii"
            img = nib.Nifti1Image(np.asarray(r.t1, dtype=np.float32), np.eye(4))
            nib.save(img, str(directory / "volumes" / vpath))
        fidx = ""
        if r.fnc is not None:
            fidx = str(len(fnc_rows))
            fnc_rows.append(r.fnc)
        manifest_rows.append([r.subject_id, r.diagnosis, vpath, fidx])
    with (directory / "fnc.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in fnc_rows:
            w.writerow([repr(float(v)) for v in row])
    with (directory / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "diagnosis", "volume_path", "fnc_row_index"])
        w.writerows(manifest_rows)
    return {
        "volume_dir": directory / "volumes",
        "fnc_table": directory / "fnc.csv",
        "manifest": directory / "manifest.csv",
    }


def read_cohort_dir(directory) -> Cohort:
    """Load a cohort written by :func:`save_cohort` (values already in [-1, 1])."""
    directory = Path(directory)
    if not (directory / "manifest.csv").exists():
        raise CohortError(f"{directory}: no manifest.csv; not a saved cohort directory")
    return load_cohort(directory / "volumes", directory / "fnc.csv", directory / "manifest.csv",
                       intensity_range=(-1.0, 1.0))
