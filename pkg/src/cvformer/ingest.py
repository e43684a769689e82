"""Subject time series -> functional connectivity -> the two model views.

Also writes the synthetic two-class datasets used for every desk-scale run.

File formats
------------
Series file
    UTF-8 text, one time point per line, ``M`` comma-separated decimals.
    An optional first line starting with ``#`` is ignored.
Manifest
    ``key = value`` header lines (``roi_count``, ``num_classes``, ``seed`` ...),
    a blank line, then a CSV table ``id,path,label,split``.  Paths are
    relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.txt"
TABLE_HEADER = ["id", "path", "label", "split"]
SPLITS = ("train", "val", "test")


class LoadError(ValueError):
    """A subject or manifest file could not be read or failed validation."""


class ConfigError(ValueError):
    """Invalid generator or run configuration."""


@dataclass
class SubjectRecord:
    id: str
    series: np.ndarray  # T x M
    label: int


@dataclass
class ViewPair:
    roi_features: np.ndarray  # M x M correlation profile rows
    adjacency: np.ndarray  # M x M binary, zero diagonal


@dataclass
class SubjectEntry:
    id: str
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    roi_count: int
    num_classes: int
    subjects: list[SubjectEntry]
    seed: int = 0
    extra: dict[str, str] = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def split(self, name: str) -> list[SubjectEntry]:
        return [s for s in self.subjects if s.split == name]


def split_counts(n: int) -> tuple[int, int, int]:
    """70/10/20 split sizes; val and test round down so train absorbs the rest."""
    n_val = n // 10
    n_test = (2 * n) // 10
    return n - n_val - n_test, n_val, n_test


# ---------------------------------------------------------------------------
# manifest io

def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write("# cvformer dataset manifest\n")
    buf.write(f"roi_count = {manifest.roi_count}\n")
    buf.write(f"num_classes = {manifest.num_classes}\n")
    buf.write(f"seed = {manifest.seed}\n")
    for key, value in manifest.extra.items():
        buf.write(f"{key} = {value}\n")
    buf.write("\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    for s in manifest.subjects:
        writer.writerow([s.id, s.path, s.label, s.split])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    header: dict[str, str] = {}
    table_start = None
    for i, line in enumerate(lines):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.replace(" ", "") == ",".join(TABLE_HEADER):
            table_start = i + 1
            break
        if "=" not in stripped:
            raise LoadError(f"{path}:{i + 1}: expected 'key = value', got {stripped!r}")
        key, value = stripped.split("=", 1)
        header[key.strip()] = value.strip()
    if table_start is None:
        raise LoadError(f"{path}: missing subject table header {','.join(TABLE_HEADER)}")
    try:
        roi_count = int(header.pop("roi_count"))
        num_classes = int(header.pop("num_classes"))
        seed = int(header.pop("seed", "0"))
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{path}: bad or missing header field ({exc})") from exc

    subjects = []
    for row in csv.reader(lines[table_start:]):
        if not row:
            continue
        if len(row) != 4:
            raise LoadError(f"{path}: subject row {row!r} needs 4 fields")
        sid, rel, label, split = (x.strip() for x in row)
        if split not in SPLITS:
            raise LoadError(f"{path}: subject {sid} has unknown split {split!r}")
        label_int = int(label)
        if not 0 <= label_int < num_classes:
            raise LoadError(f"{path}: subject {sid} label {label_int} outside [0, {num_classes})")
        subjects.append(SubjectEntry(sid, rel, label_int, split))
    return DatasetManifest(roi_count, num_classes, subjects, seed, header, path.parent)


# ---------------------------------------------------------------------------
# subjects

def _parse_series(text: str) -> np.ndarray:
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ValueError("no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"ragged rows with widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def load_subject(entry: SubjectEntry | str | Path, manifest: DatasetManifest) -> SubjectRecord:
    """Read and validate one subject's series file.

    ``entry`` may be a manifest row or a bare path; a bare path is matched
    against the manifest to recover the id and label.
    """
    if isinstance(entry, SubjectEntry):
        path = manifest.base_dir / entry.path
        sid, label = entry.id, entry.label
    else:
        path = Path(entry)
        match = next(
            (s for s in manifest.subjects
             if (manifest.base_dir / s.path).resolve() == path.resolve()),
            None,
        )
        sid = match.id if match else path.stem
        label = match.label if match else 0

    try:
        series = _parse_series(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"subject {sid}: cannot parse {path}: {exc}") from exc
    if series.shape[0] < 2:
        raise LoadError(f"subject {sid}: need at least 2 time points, got {series.shape[0]}")
    if series.shape[1] != manifest.roi_count:
        raise LoadError(
            f"subject {sid}: {series.shape[1]} columns but manifest declares "
            f"roi_count={manifest.roi_count}"
        )
    constant = np.flatnonzero(np.ptp(series, axis=0) == 0)
    if constant.size:
        raise LoadError(f"subject {sid}: column {int(constant[0])} is constant")
    return SubjectRecord(sid, series, label)


# ---------------------------------------------------------------------------
# connectivity

def compute_fcn(series) -> np.ndarray:
    """Pearson correlation between the columns of a T x M series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"compute_fcn needs a T x M series with T >= 2, got {x.shape}")
    centred = x - x.mean(axis=0)
    norms = np.sqrt((centred * centred).sum(axis=0))
    if (norms == 0).any():
        raise ValueError(f"compute_fcn: column {int(np.flatnonzero(norms == 0)[0])} is constant")
    z = centred / norms
    fcn = np.clip(z.T @ z, -1.0, 1.0)
    fcn = 0.5 * (fcn + fcn.T)
    np.fill_diagonal(fcn, 1.0)
    return fcn


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """The ceil(q*n)-th smallest value (1-based rank, at least 1)."""
    ordered = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if ordered.size == 0:
        raise ValueError("nearest_rank of an empty set")
    rank = math.ceil(Fraction(str(percentile)) * ordered.size / 100)
    rank = min(max(rank, 1), ordered.size)
    return float(ordered[rank - 1])


def threshold_fcn(fcn: np.ndarray, percentile: float = 70) -> np.ndarray:
    """Binary adjacency keeping pairs strictly above the nearest-rank percentile
    of the strict upper-triangle correlations."""
    fcn = np.asarray(fcn, dtype=np.float64)
    m = fcn.shape[0]
    iu = np.triu_indices(m, k=1)
    if iu[0].size == 0:
        return np.zeros_like(fcn)
    cut = nearest_rank(fcn[iu], percentile)
    upper = np.zeros_like(fcn)
    upper[iu] = (fcn[iu] > cut).astype(np.float64)
    return upper + upper.T


def build_views(fcn: np.ndarray, percentile: float = 70) -> ViewPair:
    fcn = np.asarray(fcn, dtype=np.float64)
    return ViewPair(roi_features=fcn.copy(), adjacency=threshold_fcn(fcn, percentile))


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    """All subjects of a manifest, preprocessed into stacked views."""

    ids: list[str]
    roi: np.ndarray  # n x M x M
    adjacency: np.ndarray  # n x M x M
    labels: np.ndarray  # n
    splits: dict[str, np.ndarray]
    num_classes: int

    @property
    def roi_count(self) -> int:
        return self.roi.shape[1]

    def views(self, index: int) -> ViewPair:
        return ViewPair(self.roi[index], self.adjacency[index])


def load_dataset(manifest_path: str | Path, percentile: float = 70) -> Dataset:
    manifest = read_manifest(manifest_path)
    records = [load_subject(entry, manifest) for entry in manifest.subjects]
    pairs = [build_views(compute_fcn(r.series), percentile) for r in records]
    splits = {
        name: np.array([i for i, s in enumerate(manifest.subjects) if s.split == name], dtype=np.int64)
        for name in SPLITS
    }
    return Dataset(
        ids=[r.id for r in records],
        roi=np.stack([p.roi_features for p in pairs]),
        adjacency=np.stack([p.adjacency for p in pairs]),
        labels=np.array([r.label for r in records], dtype=np.int64),
        splits=splits,
        num_classes=manifest.num_classes,
    )


def coupled_blocks(m: int) -> tuple[range, range]:
    """The two RoI blocks whose coupling separates the synthetic classes."""
    size = m // 3
    return range(0, size), range(size, 2 * size)


def synth_series(rng: np.random.Generator, m: int, t: int, coupling: float) -> np.ndarray:
    """One subject from the two-block latent-factor model.

    RoIs in block A load on factor ``a``, block B on ``b = c*a + sqrt(1-c^2)*g``,
    the remaining RoIs are independent noise.  Unit loadings and unit noise
    put the within-block correlation near 0.5 and the A-B correlation near
    ``c / 2``.
    """
    block_a, block_b = coupled_blocks(m)
    a = rng.standard_normal(t)
    g = rng.standard_normal(t)
    b = coupling * a + math.sqrt(1.0 - coupling * coupling) * g
    x = rng.standard_normal((t, m))
    x[:, block_a.start:block_a.stop] += a[:, None]
    x[:, block_b.start:block_b.stop] += b[:, None]
    # BOLD-like units: arbitrary positive gain and baseline per RoI
    gain = rng.uniform(0.5, 2.0, size=m)
    baseline = rng.uniform(50.0, 150.0, size=m)
    return baseline + gain * x


def gen_synth(
    out_dir: str | Path,
    num_subjects: int,
    m: int,
    t: int,
    effect: float,
    seed: int,
) -> Path:
    """Write a balanced two-class synthetic dataset; returns the manifest path.

    Class 1 couples the two designated RoI blocks with strength ``effect``,
    class 0 leaves them independent.  Output is byte-identical for a seed.
    """
    if num_subjects < 2 or num_subjects % 2:
        raise ConfigError(f"num_subjects must be a positive even number, got {num_subjects}")
    if m < 8:
        raise ConfigError(f"need at least 8 RoIs, got {m}")
    if t < 32:
        raise ConfigError(f"need at least 32 time points, got {t}")
    if not 0.0 <= effect <= 1.0:
        raise ConfigError(f"effect must lie in [0, 1], got {effect}")

    out_dir = Path(out_dir)
    (out_dir / "series").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat([0, 1], num_subjects // 2))
    # alternate the classes so every split is balanced to within one subject
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)]
    order = np.stack(per_class, axis=1).reshape(-1)
    n_train, n_val, n_test = split_counts(num_subjects)
    split_of = np.empty(num_subjects, dtype=object)
    split_of[order[:n_test]] = "test"
    split_of[order[n_test:n_test + n_val]] = "val"
    split_of[order[n_test + n_val:]] = "train"

    width = max(4, len(str(num_subjects - 1)))
    entries = []
    for i in range(num_subjects):
        sid = f"sub-{i:0{width}d}"
        rel = f"series/{sid}.csv"
        series = synth_series(rng, m, t, effect if labels[i] == 1 else 0.0)
        buf = io.StringIO()
        buf.write(f"# {sid}\n")
        np.savetxt(buf, series, fmt="%.6f", delimiter=",")
        (out_dir / rel).write_text(buf.getvalue(), encoding="utf-8")
        entries.append(SubjectEntry(sid, rel, int(labels[i]), str(split_of[i])))

    manifest = DatasetManifest(
        roi_count=m,
        num_classes=2,
        subjects=entries,
        seed=seed,
        extra={"timepoints": str(t), "effect": repr(float(effect))},
        base_dir=out_dir,
    )
    return write_manifest(manifest, out_dir / MANIFEST_NAME)
