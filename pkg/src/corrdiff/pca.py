"""PCA point distribution model: flatten shapes, keep the top-K modes, sample."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .pointset import ShapeDataset


@dataclass
class PcaModel:
    mean: np.ndarray        # (3N,)
    components: np.ndarray  # (K, 3N), orthonormal rows
    sigmas: np.ndarray      # (K,)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_points(self) -> int:
        return self.mean.size // 3

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        """Shapes ``(M, N, 3)`` from standardized latents ``z`` of shape ``(M, K)``."""
        z = np.atleast_2d(z)
        flat = self.mean + (z * self.sigmas) @ self.components
        return flat.reshape(-1, self.n_points, 3)

    def project(self, shapes: np.ndarray) -> np.ndarray:
        """Standardized latents of ``(M, N, 3)`` shapes (zero where sigma is 0)."""
        coef = (np.asarray(shapes).reshape(len(shapes), -1) - self.mean) @ self.components.T
        return np.divide(coef, self.sigmas, out=np.zeros_like(coef), where=self.sigmas > 0)

    def save(self, path: str | os.PathLike):
        save_checkpoint(
            {"mean": self.mean[None, :], "components": self.components, "sigmas": self.sigmas[None, :]}, path
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PcaModel":
        t = load_checkpoint(path)
        for name in ("mean", "components", "sigmas"):
            if name not in t:
                raise KeyError(f"checkpoint missing tensor {name!r}")
        return cls(t["mean"][0], t["components"], t["sigmas"][0])


def _flatten(ds: ShapeDataset | np.ndarray) -> np.ndarray:
    pts = ds.points if isinstance(ds, ShapeDataset) else np.asarray(ds, dtype=np.float64)
    return pts.reshape(len(pts), -1)


def pca_fit(ds: ShapeDataset | np.ndarray, k: int = 128) -> PcaModel:
    """Top-``k`` right singular vectors of the centered, flattened data.

    Each component's sign is fixed so its largest-magnitude coordinate is positive.
    """
    x = _flatten(ds)
    m, d = x.shape
    if m < 2:
        raise ValueError("PCA needs at least two shapes")
    if not 1 <= k <= min(m - 1, d):
        raise ValueError(f"k={k} exceeds min(subjects - 1, 3N) = {min(m - 1, d)}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean, comps, s[:k] / np.sqrt(m - 1))


def pca_sample(model: PcaModel, rng: np.random.Generator, count: int) -> ShapeDataset:
    z = rng.standard_normal((count, model.n_components))
    if count == 0:
        return ShapeDataset(np.zeros((0, model.n_points, 3)))
    return ShapeDataset(model.reconstruct(z), subject_ids=[f"pca_{i:06d}" for i in range(count)])


def explained_variance(model: PcaModel, ds: ShapeDataset | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-component and cumulative fractions of the total variance of ``ds``."""
    x = _flatten(ds)
    total = float(np.sum((x - x.mean(axis=0)) ** 2) / (len(x) - 1))
    if total <= 0:
        frac = np.zeros(model.n_components)
    else:
        frac = np.clip(model.sigmas**2 / total, 0.0, 1.0)
    return frac, np.minimum(np.cumsum(frac), 1.0)
