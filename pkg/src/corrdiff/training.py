"""Optimization: Adam, the diffusion training loop, shape classifiers, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, load_checkpoint, save_checkpoint
from .diffusion import NonFiniteError, VarianceSchedule, forward_sample, training_loss
from .network import NetworkConfig, NoisePredictor, init_rft, rft_forward, sinusoidal_features
from .pointset import ShapeDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    seed: int = 0
    disable_correspondence: bool = False
    mask_all_true: bool = False

    def validate(self, n_data: int | None = None):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or (n_data is not None and self.batch_size > n_data):
            raise ValueError(f"batch_size must lie in [1, {n_data}]")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")

    def network_config(self, base: NetworkConfig) -> NetworkConfig:
        """Apply the ablation switches to a network config."""
        cfg = base
        if self.disable_correspondence:
            cfg = replace(cfg, use_correspondence_embeddings=False)
        if self.mask_all_true:
            cfg = replace(cfg, mask_all_true=True)
        return cfg


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# diffusion training


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def write_loss_csv(losses, path: str | os.PathLike):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, start=1):
            w.writerow([i, repr(float(loss))])


class DiffusionTrainer:
    """Stateful minibatch trainer; a deterministic function of data, config and seed.

    Batch order for epoch ``e`` comes from ``default_rng([seed, e])`` and the
    timestep/noise draws of step ``s`` from ``default_rng([seed, s, 1])``, so
    resuming from a checkpoint only needs the step counter.
    """

    def __init__(self, model: NoisePredictor, ds: ShapeDataset, sched: VarianceSchedule, cfg: TrainConfig):
        cfg.validate(len(ds))
        self.model = model
        self.sched = sched
        self.cfg = cfg
        self.x = ds.points
        self.labels = ds.labels if model.config.n_classes else None
        if self.labels is not None and np.any(self.labels < 0):
            raise ValueError("class-conditional training needs every shape labeled")
        self.adam = AdamState()
        self.ema = {k: v.copy() for k, v in model.params.items()}
        self.step = 0
        self.losses: list[float] = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.x.shape[0] / self.cfg.batch_size)

    def _batch(self, step: int) -> np.ndarray:
        epoch, j = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(self.x.shape[0])
        return perm[j * self.cfg.batch_size : (j + 1) * self.cfg.batch_size]

    def train_step(self) -> float:
        idx = self._batch(self.step)
        rng = np.random.default_rng([self.cfg.seed, self.step, 1])
        labels = None if self.labels is None else self.labels[idx]
        loss, tape = training_loss(self.model, self.x[idx], self.sched, rng, labels)
        grads = tape.backward(loss)
        tape.clear()
        c = self.cfg
        adam_step(self.model.params, grads, self.adam, c.lr, c.beta1, c.beta2, c.eps)
        d = c.ema_decay
        for k, p in self.model.params.items():
            if d == 0:
                self.ema[k] = p.copy()
            else:
                self.ema[k] *= d
                self.ema[k] += (1.0 - d) * p
        self.step += 1
        value = float(loss.value.item())
        self.losses.append(value)
        return value

    def run(self, n_steps: int | None = None, checkpoint: str | os.PathLike | None = None,
            checkpoint_every: int = 0, log_every: int = 0) -> list[float]:
        """Train for ``n_steps`` (default: until ``cfg.epochs`` are complete)."""
        total = self.cfg.epochs * self.steps_per_epoch
        end = total if n_steps is None else min(total, self.step + n_steps)
        while self.step < end:
            try:
                loss = self.train_step()
            except NonFiniteError:
                if checkpoint is not None:
                    log.error("non-finite loss at step %d; last good state kept in %s", self.step, checkpoint)
                raise
            if checkpoint is not None and checkpoint_every and self.step % checkpoint_every == 0:
                self.save(checkpoint)
            if log_every and self.step % log_every == 0:
                log.info("step %d/%d loss %.5f", self.step, end, loss)
        return self.losses

    def ema_model(self) -> NoisePredictor:
        return NoisePredictor(self.model.config, self.model.mask, params={k: v.copy() for k, v in self.ema.items()})

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.model.state())
        for k in self.model.params:
            if k in self.adam.m:
                out[f"adam.m.{k}"] = self.adam.m[k]
                out[f"adam.v.{k}"] = self.adam.v[k]
            out[f"ema.{k}"] = self.ema[k]
        out["train.step"] = np.array([[float(self.step)]])
        out["adam.step"] = np.array([[float(self.adam.step)]])
        return out

    def save(self, path: str | os.PathLike):
        save_checkpoint(self.state_tensors(), path)

    def load(self, path: str | os.PathLike):
        tensors = load_checkpoint(path)
        model = NoisePredictor.from_state(self.model.config, tensors)
        if not np.array_equal(model.mask, self.model.mask):
            raise ValueError("checkpoint attention mask differs from the trainer's model")
        for key in ("train.step", "adam.step"):
            if key not in tensors:
                raise KeyError(f"checkpoint missing tensor {key!r}")
        self.model.params = model.params
        self.step = int(tensors["train.step"].item())
        self.adam = AdamState(step=int(tensors["adam.step"].item()))
        for k in self.model.params:
            if self.adam.step:
                for prefix, store in (("adam.m.", self.adam.m), ("adam.v.", self.adam.v)):
                    if prefix + k not in tensors:
                        raise KeyError(f"checkpoint missing tensor {prefix + k!r}")
                    store[k] = tensors[prefix + k].copy()
            if f"ema.{k}" not in tensors:
                raise KeyError(f"checkpoint missing tensor {'ema.' + k!r}")
            self.ema[k] = tensors[f"ema.{k}"].copy()
        self.losses = self.losses[: self.step]


@dataclass
class TrainResult:
    model: NoisePredictor
    ema_model: NoisePredictor
    losses: list[float]


def train_diffusion(model: NoisePredictor, ds: ShapeDataset, sched: VarianceSchedule, cfg: TrainConfig,
                    checkpoint: str | os.PathLike | None = None, loss_csv: str | os.PathLike | None = None,
                    log_every: int = 0) -> TrainResult:
    trainer = DiffusionTrainer(model, ds, sched, cfg)
    every = trainer.steps_per_epoch * 10 if checkpoint is not None else 0
    try:
        trainer.run(checkpoint=checkpoint, checkpoint_every=every, log_every=log_every)
    finally:
        if loss_csv is not None:
            write_loss_csv(trainer.losses, loss_csv)
    if checkpoint is not None:
        trainer.save(checkpoint)
    return TrainResult(trainer.model, trainer.ema_model(), trainer.losses)


# ---------------------------------------------------------------------------
# classifiers


@dataclass(frozen=True)
class ClassifierConfig:
    widths: tuple[int, ...] = (32, 64)
    n_classes: int = 2
    noise_aware: bool = False
    time_dim: int = 32
    n_steps: int = 1000
    activation: str = "relu"
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


class Classifier:
    """Row-wise encoder, mean pool over points, linear head to class logits.

    Pooling makes the output invariant to point order. The noise-aware
    variant conditions every encoder block on the diffusion timestep.
    """

    def __init__(self, config: ClassifierConfig, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(config.seed)
            td = config.time_dim if config.noise_aware else None
            params = {}
            if td:
                params["time.W"] = rng.standard_normal((td, td)) * math.sqrt(2.0 / td)
                params["time.b"] = np.zeros((1, td))
            dims = (3, *config.widths)
            for i in range(len(config.widths)):
                params.update(init_rft(rng, f"enc{i}", dims[i], dims[i + 1], td))
            params["head.W"] = rng.standard_normal((dims[-1], config.n_classes)) / math.sqrt(dims[-1])
            params["head.b"] = np.zeros((1, config.n_classes))
        self.params = dict(params)

    @property
    def noise_aware(self) -> bool:
        return self.config.noise_aware

    def forward(self, tape: Tape, x, t=None) -> Tensor:
        xt = x if isinstance(x, Tensor) else tape.constant(np.asarray(x, dtype=np.float64))
        if xt.value.ndim == 2:
            xt = ad.reshape(xt, (1, *xt.shape))
        b = xt.shape[0]
        P = {k: tape.parameter(k, v) for k, v in self.params.items()}
        act = self.config.activation
        temb = None
        if self.noise_aware:
            if t is None:
                raise ValueError("noise-aware classifier needs timesteps")
            t = np.broadcast_to(np.asarray(t), (b,))
            feats = tape.constant(sinusoidal_features(t, self.config.time_dim)[:, None, :])
            temb = ad.ACTIVATIONS[act](ad.add(ad.matmul(feats, P["time.W"]), P["time.b"]))
        h = xt
        for i in range(len(self.config.widths)):
            h = rft_forward(P, f"enc{i}", h, temb, act)
        pooled = ad.mean_rows(h)
        logits = ad.add(ad.matmul(pooled, P["head.W"]), P["head.b"])
        return ad.reshape(logits, (b, self.config.n_classes))

    def logits(self, x: np.ndarray, t=None) -> np.ndarray:
        with Tape() as tape:
            return self.forward(tape, x, t).value

    def predict(self, x: np.ndarray, t=None, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        out = []
        for s in range(0, x.shape[0], batch_size):
            tt = None if t is None else np.broadcast_to(np.asarray(t), (x.shape[0],))[s : s + batch_size]
            out.append(np.argmax(self.logits(x[s : s + batch_size], tt), axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def save(self, path: str | os.PathLike):
        save_checkpoint(self.params, path)

    @classmethod
    def load(cls, config: ClassifierConfig, path: str | os.PathLike) -> "Classifier":
        template = cls(config)
        tensors = load_checkpoint(path)
        for name, ref in template.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != ref.shape:
                raise ValueError(f"tensor {name!r} has shape {tensors[name].shape}, expected {ref.shape}")
        return cls(config, {k: tensors[k] for k in template.params})


def train_classifier(ds: ShapeDataset, config: ClassifierConfig, sched: VarianceSchedule | None = None) -> Classifier:
    """Cross-entropy training; the noise-aware variant trains on ``forward_sample(x0, t, eps)``."""
    labels = ds.labels
    if np.any(labels < 0):
        raise ValueError("classifier training needs every shape labeled")
    if np.unique(labels).size < 2:
        raise ValueError("classifier training needs at least two classes")
    if config.noise_aware:
        if sched is None:
            raise ValueError("noise-aware classifier needs a variance schedule")
        config = replace(config, n_steps=sched.T)
    clf = Classifier(config)
    state = AdamState()
    m = len(ds)
    bs = min(config.batch_size, m)
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch, 7]).permutation(m)
        for j in range(0, m, bs):
            idx = perm[j : j + bs]
            x = ds.points[idx]
            t = None
            if config.noise_aware:
                rng = np.random.default_rng([config.seed, epoch, j, 11])
                t = rng.integers(1, sched.T + 1, size=idx.size)
                x = forward_sample(x, t, rng.standard_normal(x.shape), sched)
            with Tape() as tape:
                loss = ad.log_softmax_nll(clf.forward(tape, x, t), labels[idx])
                if not np.isfinite(loss.value).all():
                    raise NonFiniteError(f"non-finite classifier loss in epoch {epoch}")
                grads = tape.backward(loss)
            adam_step(clf.params, grads, state, config.lr)
    return clf


@dataclass
class ClassificationReport:
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    accuracy: float
    f1: float

    def summary_row(self, name: str) -> dict:
        row = {"data": name}
        for c, acc in enumerate(self.per_class_accuracy):
            row[f"class{c}_accuracy"] = float(acc)
        row["accuracy"] = self.accuracy
        row["f1"] = self.f1
        return row


def classification_report(true, pred, n_classes: int = 2, positive: int = 1) -> ClassificationReport:
    """Confusion matrix (rows = true class), per-class recall, accuracy and F1 of ``positive``."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    support = cm.sum(axis=1)
    per_class = np.divide(np.diag(cm), support, out=np.zeros(n_classes), where=support > 0)
    tp = cm[positive, positive]
    fp = cm[:, positive].sum() - tp
    fn = cm[positive, :].sum() - tp
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    acc = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return ClassificationReport(cm, per_class, acc, float(f1))


def write_classification_csv(reports: Mapping[str, ClassificationReport], confusion_path, summary_path):
    with open(confusion_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["data", "true", "predicted", "count"])
        for name, rep in reports.items():
            for i, j in np.ndindex(rep.confusion.shape):
                w.writerow([name, i, j, int(rep.confusion[i, j])])
    rows = [rep.summary_row(name) for name, rep in reports.items()]
    with open(summary_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
