"""Ordered point sets with index-level correspondence.

A shape is an ``(N, 3)`` array whose row ``i`` denotes the same surface
location in every member of a dataset. This module holds the containers,
the synthetic ellipsoid family used for experiments, normalization, the
mean shape and k-nearest-neighbour attention mask, and PSET1 file I/O.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PSET_MAGIC = "PSET1"
DATASET_MAGIC = "PSETDS1"
NO_LABEL = -1


class PointSetFormatError(ValueError):
    """Raised for malformed, truncated or non-finite point-set files."""


@dataclass
class OrderedPointSet:
    points: np.ndarray
    label: int | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite values")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Normalization:
    """Affine map ``normalized = (raw - shift) / scale``."""

    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - np.asarray(self.shift)) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + np.asarray(self.shift)

    def then(self, other: "Normalization") -> "Normalization":
        """Composition: apply ``self`` first, then ``other``."""
        shift = np.asarray(self.shift) + self.scale * np.asarray(other.shift)
        return Normalization(tuple(float(v) for v in shift), self.scale * other.scale)


@dataclass
class ShapeDataset:
    """A stack of ordered point sets sharing the same N.

    ``points`` has shape ``(M, N, 3)``; ``labels`` uses ``-1`` for unlabeled.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    subject_ids: list[str] | None = None
    normalization: Normalization = field(default_factory=Normalization)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            if self.points.size == 0:
                self.points = self.points.reshape(0, 0, 3)
            else:
                raise ValueError(f"points must be (M, N, 3), got {self.points.shape}")
        m = self.points.shape[0]
        if self.labels is None:
            self.labels = np.full(m, NO_LABEL, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(m)
        if self.subject_ids is None:
            self.subject_ids = [f"s{i:05d}" for i in range(m)]
        if len(self.subject_ids) != m:
            raise ValueError("subject_ids length does not match number of shapes")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> OrderedPointSet:
        label = int(self.labels[i])
        return OrderedPointSet(
            self.points[i].copy(), None if label == NO_LABEL else label, self.subject_ids[i]
        )

    def __iter__(self) -> Iterator[OrderedPointSet]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_sets(cls, sets: Sequence[OrderedPointSet], normalization: Normalization | None = None):
        if not sets:
            raise ValueError("no point sets given")
        n = {s.n_points for s in sets}
        if len(n) != 1:
            raise ValueError(f"point sets have differing N: {sorted(n)}")
        labels = [NO_LABEL if s.label is None else s.label for s in sets]
        return cls(
            np.stack([s.points for s in sets]),
            np.array(labels),
            [s.subject_id for s in sets],
            normalization or Normalization(),
        )

    def subset(self, index) -> "ShapeDataset":
        index = np.asarray(index)
        return ShapeDataset(
            self.points[index],
            self.labels[index],
            [self.subject_ids[i] for i in np.arange(len(self))[index]],
            self.normalization,
        )

    def with_class(self, label: int) -> "ShapeDataset":
        return self.subset(np.flatnonzero(self.labels == label))


# ---------------------------------------------------------------------------
# synthetic family


def fibonacci_angles(n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar and azimuthal angles of the spherical Fibonacci lattice."""
    i = np.arange(n_points, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n_points
    theta = np.arccos(z)
    phi = np.mod(i * math.pi * (3.0 - math.sqrt(5.0)), 2.0 * math.pi)
    return theta, phi


def ellipsoid_points(radii, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    a, b, c = radii
    st = np.sin(theta)
    return np.stack([a * st * np.cos(phi), b * st * np.sin(phi), c * np.cos(theta)], axis=-1)


def ellipsoid_normals(radii, points: np.ndarray) -> np.ndarray:
    n = points / np.asarray(radii, dtype=np.float64) ** 2
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def default_atrophy_indices(n_points: int, fraction: float = 0.125) -> tuple[int, ...]:
    """The lattice points closest to a fixed direction on the unit sphere."""
    theta, phi = fibonacci_angles(n_points)
    unit = ellipsoid_points((1.0, 1.0, 1.0), theta, phi)
    direction = np.array([0.6, 0.64, 0.48])
    direction /= np.linalg.norm(direction)
    count = max(1, int(round(fraction * n_points)))
    order = np.argsort(-(unit @ direction), kind="stable")
    return tuple(sorted(int(i) for i in order[:count]))


@dataclass(frozen=True)
class SyntheticFamilyConfig:
    """Two-class ellipsoid family; class 1 carries a localized inward dent.

    ``atrophy_indices=None`` selects ``default_atrophy_indices(n_points)``.
    ``n_subjects`` is per class.
    """

    n_points: int = 64
    n_subjects: int = 500
    radii: tuple[float, float, float] = (1.0, 0.6, 0.45)
    radius_jitter: float = 0.04
    atrophy_indices: tuple[int, ...] | None = None
    atrophy_depth: float = 0.15
    depth_jitter: float = 0.2
    surface_noise: float = 0.01
    seed: int = 0

    def resolved_atrophy_indices(self) -> tuple[int, ...]:
        if self.atrophy_indices is None:
            return default_atrophy_indices(self.n_points)
        return tuple(int(i) for i in self.atrophy_indices)

    def validate(self):
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        for name in ("radius_jitter", "surface_noise", "depth_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.radii) <= 0:
            raise ValueError("radii must be positive")
        for i in self.resolved_atrophy_indices():
            if not 0 <= i < self.n_points:
                raise ValueError(f"atrophy index {i} out of range [0, {self.n_points})")


def gen_synthetic(cfg: SyntheticFamilyConfig) -> ShapeDataset:
    """Generate ``2 * cfg.n_subjects`` shapes, class 0 first, then class 1."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    theta, phi = fibonacci_angles(cfg.n_points)
    atrophy = np.array(cfg.resolved_atrophy_indices(), dtype=np.int64)
    base = np.asarray(cfg.radii, dtype=np.float64)

    shapes, labels, ids = [], [], []
    for label in (0, 1):
        for j in range(cfg.n_subjects):
            radii = base + cfg.radius_jitter * rng.standard_normal(3)
            pts = ellipsoid_points(radii, theta, phi)
            if label == 1 and atrophy.size:
                depth = cfg.atrophy_depth * (1.0 + cfg.depth_jitter * rng.standard_normal())
                normals = ellipsoid_normals(radii, pts[atrophy])
                pts[atrophy] -= depth * normals
            pts += cfg.surface_noise * rng.standard_normal(pts.shape)
            shapes.append(pts)
            labels.append(label)
            ids.append(f"c{label}_{j:05d}")
    return ShapeDataset(np.stack(shapes), np.array(labels), ids)


# ---------------------------------------------------------------------------
# normalization, statistics, mask


def center_scale(ds: ShapeDataset) -> ShapeDataset:
    """Remove the dataset-global centroid and scale to unit RMS point norm."""
    if len(ds) == 0:
        raise ValueError("cannot normalize an empty dataset")
    pts = ds.points
    centroid = pts.reshape(-1, 3).mean(axis=0)
    centered = pts - centroid
    rms = math.sqrt(float(np.mean(np.sum(centered**2, axis=-1))))
    if rms <= 0.0 or not math.isfinite(rms):
        raise ValueError("degenerate dataset: all points coincide")
    step = Normalization(tuple(float(v) for v in centroid), rms)
    return replace(ds, points=centered / rms, normalization=ds.normalization.then(step))


def mean_shape(ds: ShapeDataset) -> OrderedPointSet:
    if len(ds) == 0:
        raise ValueError("mean of an empty dataset")
    return OrderedPointSet(ds.points.mean(axis=0), None, "mean")


def knn_mask(mean: OrderedPointSet | np.ndarray, k: int) -> np.ndarray:
    """Boolean ``(N, N)`` mask: each row allows itself and its k nearest points.

    Ties are broken toward the lower index. The mask is not symmetrized.
    """
    pts = mean.points if isinstance(mean, OrderedPointSet) else np.asarray(mean, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N={n}, got {k}")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    allow = np.zeros((n, n), dtype=bool)
    allow[np.arange(n)[:, None], order] = True
    np.fill_diagonal(allow, True)
    return allow


@dataclass
class GroupDifference:
    field: np.ndarray
    signed: np.ndarray
    normals: np.ndarray


def outward_normals(points: np.ndarray) -> np.ndarray:
    """Approximate outward normals as directions from the shape centroid."""
    v = points - points.mean(axis=0)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def group_difference(a: ShapeDataset, b: ShapeDataset) -> GroupDifference:
    """Per-index displacement from the mean of ``a`` to the mean of ``b``.

    ``signed`` projects each displacement on the outward normal of the mean
    of ``a``; negative values are inward (atrophy).
    """
    if a.n_points != b.n_points:
        raise ValueError(f"mismatched N: {a.n_points} vs {b.n_points}")
    ref = mean_shape(a).points
    disp = mean_shape(b).points - ref
    normals = outward_normals(ref)
    return GroupDifference(disp, np.sum(disp * normals, axis=-1), normals)


# ---------------------------------------------------------------------------
# PSET1 I/O


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def format_pointset(ps: OrderedPointSet) -> str:
    label = "-" if ps.label is None else str(int(ps.label))
    sid = ps.subject_id or "-"
    if any(ch in sid for ch in "\r\n"):
        raise ValueError("subject_id must be a single line")
    lines = [f"{PSET_MAGIC} {ps.n_points} {label} {sid}"]
    lines += [" ".join(_fmt(v) for v in row) for row in ps.points]
    return "\n".join(lines) + "\n"


def parse_pointset(text: str, source: str = "<string>") -> OrderedPointSet:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise PointSetFormatError(f"{source}: empty file")
    head = lines[0].split(" ", 3)
    if len(head) != 4 or head[0] != PSET_MAGIC:
        raise PointSetFormatError(f"{source}: malformed header {lines[0]!r}")
    try:
        n = int(head[1])
        label = None if head[2] == "-" else int(head[2])
    except ValueError as exc:
        raise PointSetFormatError(f"{source}: malformed header {lines[0]!r}") from exc
    if n < 1:
        raise PointSetFormatError(f"{source}: N must be positive")
    body = lines[1:]
    if len(body) < n:
        raise PointSetFormatError(f"{source}: truncated payload, expected {n} points, found {len(body)}")
    if len(body) > n:
        raise PointSetFormatError(f"{source}: {len(body) - n} trailing lines after {n} points")
    pts = np.empty((n, 3))
    for i, line in enumerate(body):
        parts = line.split(" ")
        if len(parts) != 3:
            raise PointSetFormatError(f"{source}: line {i + 2} does not hold three values")
        try:
            pts[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise PointSetFormatError(f"{source}: line {i + 2}: {exc}") from exc
    if not np.all(np.isfinite(pts)):
        raise PointSetFormatError(f"{source}: non-finite coordinates")
    sid = "" if head[3] == "-" else head[3]
    return OrderedPointSet(pts, label, sid)


def save_pointset(ps: OrderedPointSet, path: str | os.PathLike):
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write(format_pointset(ps))


def load_pointset(path: str | os.PathLike) -> OrderedPointSet:
    with open(path, "r", newline="", encoding="ascii") as fh:
        return parse_pointset(fh.read(), str(path))


def save_dataset(ds: ShapeDataset, directory: str | os.PathLike, manifest: str = "dataset.txt") -> Path:
    """Write one PSET1 file per shape plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(ds))))
    names = []
    for i, ps in enumerate(ds):
        name = f"shape_{i:0{width}d}.pset"
        save_pointset(ps, directory / name)
        names.append(name)
    nz = ds.normalization
    header = f"{DATASET_MAGIC} {len(ds)} " + " ".join(_repr_float(v) for v in (*nz.shift, nz.scale))
    path = directory / manifest
    path.write_text("\n".join([header, *names]) + "\n", encoding="ascii")
    return path


def _repr_float(v: float) -> str:
    return f"{v:.17g}"


def load_dataset(path: str | os.PathLike) -> ShapeDataset:
    """Load from a dataset manifest, or from every ``*.pset`` file in a directory."""
    path = Path(path)
    if path.is_dir():
        manifest = path / "dataset.txt"
        if manifest.exists():
            return load_dataset(manifest)
        files = sorted(path.glob("*.pset"))
        if not files:
            raise FileNotFoundError(f"no .pset files in {path}")
        return ShapeDataset.from_sets([load_pointset(f) for f in files])
    lines = path.read_text(encoding="ascii").splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 6 or head[0] != DATASET_MAGIC:
        raise PointSetFormatError(f"{path}: malformed dataset manifest header")
    count = int(head[1])
    files = [ln for ln in lines[1:] if ln.strip()]
    if len(files) != count:
        raise PointSetFormatError(f"{path}: manifest lists {len(files)} files, header says {count}")
    nz = Normalization(tuple(float(v) for v in head[2:5]), float(head[5]))
    if count == 0:
        return ShapeDataset(np.zeros((0, 0, 3)), normalization=nz)
    return ShapeDataset.from_sets([load_pointset(path.parent / f) for f in files], nz)
