"""Point-cloud distances and set-level generative metrics.

Three cloud distances are provided: Chamfer (CD), earth mover's (EMD, exact
assignment) and index-wise L2, which treats the point index as identity and
therefore penalizes generated shapes that lose correspondence. All reduce
with a mean over points so values are comparable across N.

Set metrics follow the nearest-neighbour ball construction: MMD is the mean
over real clouds of the distance to the closest generated cloud; coverage and
density use closed balls whose radius is the distance from each real cloud to
its k-th nearest other real cloud.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

KINDS = ("CD", "EMD", "L2")


def _cloud(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"cloud must be (N, 3), got {a.shape}")
    return a


def l2_dist(a, b) -> float:
    a, b = _cloud(a), _cloud(b)
    if a.shape != b.shape:
        raise ValueError(f"L2 distance needs equal N, got {a.shape[0]} and {b.shape[0]}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def chamfer(a, b) -> float:
    a, b = _cloud(a), _cloud(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    d = cdist(a, b)
    return 0.5 * float(d.min(axis=1).mean() + d.min(axis=0).mean())


def emd(a, b) -> float:
    """Mean matched distance under the optimal bijection."""
    a, b = _cloud(a), _cloud(b)
    if a.shape != b.shape:
        raise ValueError(f"EMD needs equal N, got {a.shape[0]} and {b.shape[0]}")
    d = cdist(a, b)
    rows, cols = linear_sum_assignment(d)
    return float(d[rows, cols].mean())


DISTANCES: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {"CD": chamfer, "EMD": emd, "L2": l2_dist}


def pairwise(xs, ys, kind: str) -> np.ndarray:
    """``(len(xs), len(ys))`` matrix of cloud distances."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if kind not in DISTANCES:
        raise ValueError(f"unknown distance kind {kind!r}")
    if kind == "L2":
        if xs.shape[1:] != ys.shape[1:]:
            raise ValueError("L2 distance needs equal N")
        out = np.empty((len(xs), len(ys)))
        for i, x in enumerate(xs):
            out[i] = np.linalg.norm(ys - x, axis=2).mean(axis=1)
        return out
    if kind == "CD":
        out = np.empty((len(xs), len(ys)))
        for i, x in enumerate(xs):
            d = np.linalg.norm(ys[:, None, :, :] - x[None, :, None, :], axis=3)  # (M, Nx, Ny)
            out[i] = 0.5 * (d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1))
        return out
    return np.array([[emd(x, y) for y in ys] for x in xs]).reshape(len(xs), len(ys))


def _check_sets(real, gen, k: int | None = None):
    if len(real) == 0 or len(gen) == 0:
        raise ValueError("metric needs nonempty real and generated sets")
    if k is not None and len(real) <= k:
        raise ValueError(f"need more than k={k} real clouds, got {len(real)}")


def mmd_from(d_real_gen: np.ndarray) -> float:
    return float(d_real_gen.min(axis=1).mean())


def knn_radii(d_real_real: np.ndarray, k: int) -> np.ndarray:
    """Distance from each real cloud to its k-th nearest other real cloud."""
    d = d_real_real.astype(np.float64, copy=True)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def coverage_from(d_real_gen: np.ndarray, radii: np.ndarray) -> float:
    return float(np.mean((d_real_gen <= radii[:, None]).any(axis=1)))


def density_from(d_real_gen: np.ndarray, radii: np.ndarray, k: int) -> float:
    m = d_real_gen.shape[1]
    return float((d_real_gen <= radii[:, None]).sum() / (k * m))


def mmd(real, gen, kind: str) -> float:
    _check_sets(real, gen)
    return mmd_from(pairwise(real, gen, kind))


def coverage(real, gen, kind: str, k: int = 7) -> float:
    _check_sets(real, gen, k)
    return coverage_from(pairwise(real, gen, kind), knn_radii(pairwise(real, real, kind), k))


def density(real, gen, kind: str, k: int = 7) -> float:
    _check_sets(real, gen, k)
    return density_from(pairwise(real, gen, kind), knn_radii(pairwise(real, real, kind), k), k)


@dataclass
class MetricReport:
    """MMD, coverage and density under each distance kind."""

    mmd: dict[str, float] = field(default_factory=dict)
    coverage: dict[str, float] = field(default_factory=dict)
    density: dict[str, float] = field(default_factory=dict)
    n_real: int = 0
    n_gen: int = 0
    k: int = 7

    def row(self) -> dict[str, float]:
        out = {}
        for metric in ("mmd", "coverage", "density"):
            for kind, v in getattr(self, metric).items():
                out[f"{metric}_{kind}"] = v
        return out


def evaluate_suite(real, gen, k: int = 7, kinds: Sequence[str] = KINDS,
                   real_real: Mapping[str, np.ndarray] | None = None) -> MetricReport:
    """All metrics under all distance kinds.

    ``real_real`` may pass precomputed real-vs-real matrices keyed by kind.
    """
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    _check_sets(real, gen, k)
    rep = MetricReport(n_real=len(real), n_gen=len(gen), k=k)
    for kind in kinds:
        drr = real_real[kind] if real_real and kind in real_real else pairwise(real, real, kind)
        drg = pairwise(real, gen, kind)
        radii = knn_radii(drr, k)
        rep.mmd[kind] = mmd_from(drg)
        rep.coverage[kind] = coverage_from(drg, radii)
        rep.density[kind] = density_from(drg, radii, k)
    return rep


def shuffle_indices(clouds, rng: np.random.Generator) -> np.ndarray:
    """Independently permute the point order of every cloud."""
    clouds = np.asarray(clouds)
    return np.stack([c[rng.permutation(c.shape[0])] for c in clouds])


# ---------------------------------------------------------------------------
# reports


def _columns(kinds=KINDS) -> list[str]:
    return [f"{m}_{k}" for m in ("mmd", "coverage", "density") for k in kinds]


def write_report_csv(reports: Mapping[str, MetricReport], path: str | os.PathLike):
    """One row per method, columns metric x distance (the layout of a results table)."""
    cols = _columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *cols, "n_real", "n_gen", "k"])
        for name, rep in reports.items():
            row = rep.row()
            w.writerow([name, *(repr(row.get(c, float("nan"))) for c in cols), rep.n_real, rep.n_gen, rep.k])


def read_report_csv(path: str | os.PathLike) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {r["method"]: {k: float(v) for k, v in r.items() if k != "method"} for r in csv.DictReader(fh)}


def format_report_table(reports: Mapping[str, MetricReport]) -> str:
    header1 = f"{'':<24}" + "".join(f"{m:^30}" for m in ("MMD", "Coverage", "Density"))
    header2 = f"{'':<24}" + "".join(f"{k:>10}" for _ in range(3) for k in KINDS)
    lines = [header1, header2]
    for name, rep in reports.items():
        row = rep.row()
        lines.append(f"{name:<24}" + "".join(f"{row.get(c, float('nan')):>10.4g}" for c in _columns()))
    return "\n".join(lines) + "\n"
