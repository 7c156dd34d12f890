"""Noise-prediction network for ordered point sets.

U-Net-like stack of row-wise feature transformation (RFT) blocks: every
point row passes through the same affine map, a time-conditioned
scale/shift and an activation. Learned correspondence embeddings are added
at the bottleneck, followed by masked self-attention over the mean-shape
k-nearest-neighbour graph. Decoder blocks concatenate the matching encoder
activations.

Parameter names are stable and double as CKPT1 tensor names::

    time.W time.b cls.E
    enc{i}.W enc{i}.b enc{i}.scale.W enc{i}.scale.b enc{i}.shift.W enc{i}.shift.b
    corr.E attn.Wq attn.Wk attn.Wv
    dec{i}.*  (as enc)
    head.W head.b
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


@dataclass(frozen=True)
class NetworkConfig:
    n_points: int = 512
    widths: tuple[int, ...] = (64, 128, 256)
    k: int = 50
    use_correspondence_embeddings: bool = True
    mask_all_true: bool = False
    n_classes: int = 0
    activation: str = "relu"
    time_dim: int = 64
    n_steps: int = 1000
    corr_init_std: float = 0.02

    def validate(self):
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a nonempty sequence of positive ints")
        if not self.mask_all_true and not 1 <= self.k < self.n_points:
            raise ValueError(f"k must satisfy 1 <= k < N={self.n_points}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be an even integer >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """``[sin(t w_j), cos(t w_j)]`` with geometric frequencies ``w_j = 10000^(-j/half)``.

    ``t`` may be a scalar or a 1-D array; returns ``(len(t), dim)``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _init_linear(rng, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * gain / math.sqrt(fan_in)


def init_rft(rng, prefix: str, d_in: int, d_out: int, time_dim: int | None) -> dict[str, np.ndarray]:
    p = {
        f"{prefix}.W": _init_linear(rng, d_in, d_out, math.sqrt(2.0)),
        f"{prefix}.b": np.zeros((1, d_out)),
    }
    if time_dim:
        p[f"{prefix}.scale.W"] = _init_linear(rng, time_dim, d_out, 0.1)
        p[f"{prefix}.scale.b"] = np.zeros((1, d_out))
        p[f"{prefix}.shift.W"] = _init_linear(rng, time_dim, d_out, 0.1)
        p[f"{prefix}.shift.b"] = np.zeros((1, d_out))
    return p


def rft_forward(P: Mapping[str, Tensor], prefix: str, x: Tensor, temb: Tensor | None, activation: str = "relu") -> Tensor:
    """Shared affine map on every row, time scale/shift, then activation.

    ``x`` is ``(..., N, d_in)``; ``temb`` is ``(B, 1, time_dim)`` or None.
    """
    W = P[f"{prefix}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"{prefix}: input width {x.shape[-1]} != {W.shape[0]}")
    y = ad.broadcast_add_row(ad.matmul(x, W), P[f"{prefix}.b"])
    if temb is not None and f"{prefix}.scale.W" in P:
        s = ad.add(ad.matmul(temb, P[f"{prefix}.scale.W"]), P[f"{prefix}.scale.b"])
        sh = ad.add(ad.matmul(temb, P[f"{prefix}.shift.W"]), P[f"{prefix}.shift.b"])
        y = ad.add(ad.add(y, ad.mul(y, s)), sh)
    return ad.ACTIVATIONS[activation](y)


def masked_attention(P: Mapping[str, Tensor], x: Tensor, mask: np.ndarray) -> Tensor:
    """Single-head scaled dot-product self-attention with residual."""
    z = x.shape[-1]
    q = ad.matmul(x, P["attn.Wq"])
    k = ad.matmul(x, P["attn.Wk"])
    v = ad.matmul(x, P["attn.Wv"])
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(z))
    weights = ad.softmax_rows_masked(logits, mask)
    return ad.add(x, ad.matmul(weights, v))


class NoisePredictor:
    """The epsilon-network. Parameters live in ``self.params`` as float64 arrays."""

    def __init__(self, config: NetworkConfig, mask: np.ndarray | None = None, seed: int = 0,
                 params: Mapping[str, np.ndarray] | None = None):
        config.validate()
        self.config = config
        n = config.n_points
        if config.mask_all_true or mask is None:
            if mask is None and not config.mask_all_true:
                raise ValueError("an attention mask is required unless mask_all_true is set")
            mask = np.ones((n, n), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, n):
            raise ValueError(f"mask must be ({n}, {n}), got {mask.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("attention mask has a fully-masked row")
        self.mask = mask
        self.params = dict(params) if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        c = self.config
        td = c.time_dim
        p: dict[str, np.ndarray] = {
            "time.W": _init_linear(rng, td, td, math.sqrt(2.0)),
            "time.b": np.zeros((1, td)),
        }
        if c.n_classes:
            p["cls.E"] = rng.standard_normal((c.n_classes, td)) * 0.5
        dims = (3, *c.widths)
        for i in range(len(c.widths)):
            p.update(init_rft(rng, f"enc{i}", dims[i], dims[i + 1], td))
        z = c.widths[-1]
        if c.use_correspondence_embeddings:
            p["corr.E"] = rng.standard_normal((c.n_points, z)) * c.corr_init_std
        for name in ("attn.Wq", "attn.Wk", "attn.Wv"):
            p[name] = _init_linear(rng, z, z)
        # decoder level j consumes [previous, skip from encoder level L-1-j]
        d_prev = z
        out_dims = self.decoder_widths()
        for j, d_out in enumerate(out_dims):
            skip = c.widths[len(c.widths) - 1 - j]
            p.update(init_rft(rng, f"dec{j}", d_prev + skip, d_out, td))
            d_prev = d_out
        p["head.W"] = _init_linear(rng, d_prev, 3, 0.1)
        p["head.b"] = np.zeros((1, 3))
        return p

    def decoder_widths(self) -> tuple[int, ...]:
        w = self.config.widths
        return tuple(w[::-1][1:]) + (w[0],)

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def time_embedding(self, P: Mapping[str, Tensor], t: np.ndarray, labels: np.ndarray | None) -> Tensor:
        c = self.config
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > c.n_steps):
            raise ValueError(f"timestep out of range [1, {c.n_steps}]")
        tape = P["time.W"].tape
        feats = tape.constant(sinusoidal_features(t, c.time_dim)[:, None, :])
        h = ad.add(ad.matmul(feats, P["time.W"]), P["time.b"])
        if c.n_classes:
            if labels is None:
                raise ValueError("class-conditional network requires labels")
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != t.shape or labels.min() < 0 or labels.max() >= c.n_classes:
                raise ValueError("labels must be one valid class per batch element")
            onehot = tape.constant(np.eye(c.n_classes)[labels][:, None, :])
            h = ad.add(h, ad.matmul(onehot, P["cls.E"]))
        elif labels is not None:
            raise ValueError("unconditional network given labels")
        return ad.ACTIVATIONS[c.activation](h)

    def forward(self, tape: Tape, x: np.ndarray, t, labels=None, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Evaluate on a batch ``x`` of shape ``(B, N, 3)``; ``t`` has shape ``(B,)``."""
        c = self.config
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (c.n_points, 3):
            raise ValueError(f"input must be (B, {c.n_points}, 3), got {x.shape}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        if labels is not None:
            labels = np.broadcast_to(np.asarray(labels), (x.shape[0],))
        P = params if params is not None else {k: tape.parameter(k, v) for k, v in self.params.items()}
        temb = self.time_embedding(P, t, labels)
        act = c.activation

        h = tape.constant(x)
        skips = []
        for i in range(len(c.widths)):
            h = rft_forward(P, f"enc{i}", h, temb, act)
            if i == len(c.widths) - 1 and c.use_correspondence_embeddings:
                h = ad.add(h, P["corr.E"])
            skips.append(h)
        h = masked_attention(P, h, self.mask)
        for j in range(len(c.widths)):
            h = rft_forward(P, f"dec{j}", ad.concat(h, skips[len(c.widths) - 1 - j]), temb, act)
        return ad.broadcast_add_row(ad.matmul(h, P["head.W"]), P["head.b"])

    def predict(self, x: np.ndarray, t, labels=None) -> np.ndarray:
        with Tape() as tape:
            return self.forward(tape, x, t, labels).value

    def __call__(self, x, t, labels=None) -> np.ndarray:
        return self.predict(x, t, labels)

    def copy(self) -> "NoisePredictor":
        return NoisePredictor(self.config, self.mask, params={k: v.copy() for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out["attn.mask"] = self.mask.astype(np.float64)
        return out

    @classmethod
    def from_state(cls, config: NetworkConfig, tensors: Mapping[str, np.ndarray]) -> "NoisePredictor":
        if "attn.mask" not in tensors:
            raise KeyError("checkpoint missing tensor 'attn.mask'")
        template = cls(config, tensors["attn.mask"] > 0.5)
        params = {}
        for name, ref in template.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != ref.shape:
                raise ValueError(f"tensor {name!r} has shape {tensors[name].shape}, expected {ref.shape}")
            params[name] = np.array(tensors[name], dtype=np.float64)
        template.params = params
        return template
