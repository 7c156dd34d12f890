"""Variance schedules, forward noising, the noise-prediction loss, and sampling.

Timesteps are 1-based: ``t`` in ``[1, T]`` and ``sched.beta(t)`` is beta_t.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .pointset import ShapeDataset

SCHEDULE_KINDS = ("scaled-linear", "sigmoid", "cosine")


class NonFiniteError(FloatingPointError):
    """A loss or sample became NaN or infinite."""


class EpsModel(Protocol):
    def forward(self, tape: Tape, x: np.ndarray, t, labels=None) -> Tensor: ...


@dataclass(frozen=True)
class VarianceSchedule:
    kind: str
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a nonempty 1-D sequence")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("all betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    @property
    def T(self) -> int:
        return self.betas.size

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t.astype(np.int64) - 1

    def beta(self, t):
        return self.betas[self._check(t)]

    def alpha(self, t):
        return self.alphas[self._check(t)]

    def alpha_bar(self, t):
        """Cumulative product up to ``t``; ``alpha_bar(0) == 1``."""
        t = np.asarray(t)
        if np.any(t == 0):
            return np.where(t == 0, 1.0, self.alpha_bars[np.clip(t, 1, self.T) - 1])
        return self.alpha_bars[self._check(t)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T}


def _cosine_alpha_bar(x: np.ndarray, s: float = 0.008) -> np.ndarray:
    return np.cos((x + s) / (1.0 + s) * math.pi / 2.0) ** 2


def make_schedule(kind: str, T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    """Build a schedule of ``T`` betas.

    ``scaled-linear`` interpolates linearly in sqrt(beta); ``sigmoid`` maps a
    logistic curve over (-6, 6) onto [beta_start, beta_end]; ``cosine`` follows
    the squared-cosine alpha-bar curve with betas clipped to ``beta_end``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    frac = np.arange(T, dtype=np.float64) / (T - 1) if T > 1 else np.zeros(1)
    if kind == "scaled-linear":
        betas = (math.sqrt(beta_start) + frac * (math.sqrt(beta_end) - math.sqrt(beta_start))) ** 2
    elif kind == "sigmoid":
        betas = beta_start + (beta_end - beta_start) / (1.0 + np.exp(-(-6.0 + 12.0 * frac)))
    elif kind == "cosine":
        x = np.arange(T + 1, dtype=np.float64) / T
        abar = _cosine_alpha_bar(x) / _cosine_alpha_bar(np.zeros(1))
        betas = np.clip(1.0 - abar[1:] / abar[:-1], beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if T == 1:
        betas = np.array([beta_start])
    sched = VarianceSchedule(kind, betas)
    if sched.alpha_bars[-1] >= 0.05:
        warnings.warn(
            f"{kind} schedule leaves alpha_bar_T = {sched.alpha_bars[-1]:.3g}; "
            "the terminal distribution is far from N(0, I)",
            RuntimeWarning,
            stacklevel=2,
        )
    return sched


def desk_beta_end(T: int = 100, beta_start: float = 1e-4, target: float = 0.005, kind: str = "scaled-linear") -> float:
    """Smallest ``beta_end`` (bisection) whose schedule reaches ``alpha_bar_T <= target``."""
    lo, hi = beta_start, 0.999
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if make_schedule(kind, T, beta_start, mid).alpha_bars[-1] > target:
                lo = mid
            else:
                hi = mid
    return hi


# ---------------------------------------------------------------------------
# forward process


def forward_step(x_prev: np.ndarray, t: int, sched: VarianceSchedule, rng: np.random.Generator,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """One Markov noising step from ``t-1`` to ``t``."""
    beta = float(sched.beta(t))
    z = rng.standard_normal(np.shape(x_prev)) if noise is None else noise
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * z


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Closed-form marginal: ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is a scalar or one timestep per leading batch element.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    abar = np.asarray(sched.alpha_bar(t), dtype=np.float64)
    if abar.ndim:
        abar = abar.reshape(abar.shape + (1,) * (x0.ndim - abar.ndim))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


# ---------------------------------------------------------------------------
# training objective


def training_loss(model: EpsModel, x0: np.ndarray, sched: VarianceSchedule, rng: np.random.Generator,
                  labels=None, tape: Tape | None = None) -> tuple[Tensor, Tape]:
    """Noise-prediction MSE averaged over batch, points and coordinates."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    xt = forward_sample(x0, t, eps, sched)
    tape = tape or Tape()
    pred = model.forward(tape, xt, t, labels)
    loss = ad.mse(pred, eps)
    if not np.isfinite(loss.value).all():
        raise NonFiniteError(f"non-finite training loss (timesteps {t.tolist()})")
    return loss, tape


# ---------------------------------------------------------------------------
# reverse process


def _predict(model: EpsModel, x: np.ndarray, t: int, labels) -> np.ndarray:
    tt = np.full(x.shape[0], t)
    with Tape() as tape:
        return model.forward(tape, x, tt, labels).value


def reverse_mean(model: EpsModel, x_t: np.ndarray, t: int, sched: VarianceSchedule, labels=None) -> np.ndarray:
    beta, alpha, abar = float(sched.beta(t)), float(sched.alpha(t)), float(sched.alpha_bar(t))
    eps = _predict(model, x_t, t, labels)
    return (x_t - beta / math.sqrt(1.0 - abar) * eps) / math.sqrt(alpha)


def _noise(rngs, shape) -> np.ndarray:
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal(shape)
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


def reverse_step(model: EpsModel, x_t: np.ndarray, t: int, sched: VarianceSchedule, rng, labels=None) -> np.ndarray:
    """Draw ``X_{t-1}`` from the learned transition with variance beta_t.

    ``rng`` is one Generator or a list with one Generator per batch element.
    At ``t == 1`` the mean is returned without noise.
    """
    squeeze = np.ndim(x_t) == 2
    x = np.asarray(x_t, dtype=np.float64)[None] if squeeze else np.asarray(x_t, dtype=np.float64)
    mu = reverse_mean(model, x, t, sched, labels)
    if t > 1:
        mu = mu + math.sqrt(float(sched.beta(t))) * _noise(rng, mu.shape)
    if not np.all(np.isfinite(mu)):
        raise NonFiniteError(f"non-finite sample at step {t}")
    return mu[0] if squeeze else mu


def sample(model: EpsModel, sched: VarianceSchedule, count: int, seed: int = 0, labels=None,
           n_points: int | None = None, batch_size: int = 128) -> ShapeDataset:
    """Generate ``count`` shapes by running the reverse chain from N(0, I).

    Shape ``i`` draws all its noise from ``default_rng(seed + i)``, so a
    sample does not depend on batch size or on the other samples.
    """
    if n_points is None:
        n_points = model.config.n_points
    if count == 0:
        return ShapeDataset(np.zeros((0, n_points, 3)))
    if labels is not None:
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (count,)).copy()
    out = np.empty((count, n_points, 3))
    for start in range(0, count, batch_size):
        stop = min(count, start + batch_size)
        rngs = [np.random.default_rng(seed + i) for i in range(start, stop)]
        x = _noise(rngs, (stop - start, n_points, 3))
        lab = None if labels is None else labels[start:stop]
        for t in range(sched.T, 0, -1):
            x = reverse_step(model, x, t, sched, rngs, lab)
        out[start:stop] = x
    ids = [f"gen_{seed + i:06d}" for i in range(count)]
    return ShapeDataset(out, labels, ids)


# ---------------------------------------------------------------------------
# guided counterfactuals


@dataclass(frozen=True)
class GuidanceParams:
    classifier_scale: float = 0.0
    similarity_scale: float = 0.0
    t_start: int | None = None

    def validate(self, T: int):
        if self.classifier_scale < 0 or self.similarity_scale < 0:
            raise ValueError("guidance scales must be >= 0")
        if self.t_start is not None and not 0 <= self.t_start <= T:
            raise ValueError(f"t_start must lie in [0, {T}]")

    def start(self, T: int) -> int:
        return T // 2 if self.t_start is None else self.t_start


def classifier_log_prob_grad(classifier, x: np.ndarray, t: int, target) -> np.ndarray:
    """Gradient of ``log p(target | x, t)`` per batch element, wrt ``x``."""
    with Tape() as tape:
        xin = tape.parameter("x", x)
        logits = classifier.forward(tape, xin, np.full(x.shape[0], t))
        nll = ad.log_softmax_nll(logits, np.broadcast_to(target, (x.shape[0],)), reduction="sum")
        return -tape.backward(nll)["x"]


def counterfactual(model: EpsModel, classifier, x0_orig: np.ndarray, target_label: int,
                   guidance: GuidanceParams, sched: VarianceSchedule, rng: np.random.Generator,
                   condition_model: bool = True) -> np.ndarray:
    """Noise ``x0_orig`` to ``t_start`` and regenerate under guidance toward ``target_label``.

    The reverse mean is shifted by ``beta_t * (s1 * grad log p_cls(target | X_t, t)
    - s2 * grad ||X_t - X0||^2 / (3N))``. A class-conditional ``model`` is
    additionally conditioned on the target when ``condition_model`` is set.
    Accepts one shape ``(N, 3)`` or a batch ``(B, N, 3)``.
    """
    guidance.validate(sched.T)
    squeeze = np.ndim(x0_orig) == 2
    x0 = np.asarray(x0_orig, dtype=np.float64)
    x0 = x0[None] if squeeze else x0
    t_start = guidance.start(sched.T)
    if guidance.classifier_scale > 0:
        if classifier is None or not getattr(classifier, "noise_aware", False):
            raise ValueError("classifier guidance needs a noise-aware (time-conditioned) classifier")
    if t_start == 0:
        return x0[0].copy() if squeeze else x0.copy()

    labels = None
    if condition_model and getattr(getattr(model, "config", None), "n_classes", 0):
        labels = np.full(x0.shape[0], target_label)
    n_coords = x0.shape[1] * x0.shape[2]
    # the similarity pull is an explicit step toward x0; past 1 it overshoots and diverges
    pull = float(np.max(sched.betas[:t_start])) * guidance.similarity_scale * 2.0 / n_coords
    if pull > 1.0:
        raise ValueError(
            f"similarity_scale {guidance.similarity_scale:g} is unstable: beta_t * s2 * 2 / (3N) reaches "
            f"{pull:.3g} > 1 before t_start={t_start}"
        )
    x = forward_sample(x0, t_start, rng.standard_normal(x0.shape), sched)
    for t in range(t_start, 0, -1):
        beta = float(sched.beta(t))
        mu = reverse_mean(model, x, t, sched, labels)
        shift = np.zeros_like(x)
        if guidance.classifier_scale > 0:
            shift += guidance.classifier_scale * classifier_log_prob_grad(classifier, x, t, target_label)
        if guidance.similarity_scale > 0:
            shift -= guidance.similarity_scale * 2.0 * (x - x0) / n_coords
        mu = mu + beta * shift
        if t > 1:
            mu = mu + math.sqrt(beta) * rng.standard_normal(mu.shape)
        if not np.all(np.isfinite(mu)):
            raise NonFiniteError(f"non-finite counterfactual at step {t}")
        x = mu
    return x[0] if squeeze else x
