"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation as it is evaluated (a Wengert list)
and :meth:`Tape.backward` replays it in exact reverse order, applying the
vector-Jacobian rule registered for each op kind in :data:`VJP`.

Tensors are matrices; a leading batch axis is allowed and ops act on the
trailing two axes, broadcasting rows, columns or the batch axis.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

CKPT_MAGIC = "CKPT1"


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "node", "name")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None, name: str | None = None):
        self.value = value
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of one forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Tensor] = {}

    def clear(self):
        """Drop the recorded graph.

        Tensors point back at their tape, so a finished tape is a reference
        cycle; clearing frees its activations without waiting for the cycle
        collector.
        """
        self.nodes.clear()
        self.parameters.clear()

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc):
        self.clear()

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.parameters:
            raise TapeError(f"parameter {name!r} registered twice")
        t = self._record("leaf", (), np.asarray(value, dtype=np.float64))
        t.name = name
        self.parameters[name] = t
        return t

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, None)

    def _record(self, kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, **saved) -> Tensor:
        out = Tensor(value, self, len(self.nodes))
        self.nodes.append(Node(kind, inputs, out, saved))
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` for every registered parameter."""
        if not self.nodes:
            raise TapeError("backward called before any forward operation")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones_like(loss.value)
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or not node.inputs:
                continue
            in_grads = VJP[node.kind](g, node)
            for inp, gi in zip(node.inputs, in_grads):
                if inp.node is None or gi is None:
                    continue
                gi = _unbroadcast(gi, inp.value.shape)
                if grads[inp.node] is None:
                    grads[inp.node] = gi
                else:
                    grads[inp.node] = grads[inp.node] + gi
        return {
            name: grads[p.node] if grads[p.node] is not None else np.zeros_like(p.value)
            for name, p in self.parameters.items()
        }


def _tape_of(*tensors: Tensor) -> Tape:
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    raise TapeError("operation has no tape-bound input")


def _as_tensor(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return tape._record("matmul", (a, b), _matmul(a.value, b.value))


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one BLAS call for batched-by-shared-matrix products
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
    return np.matmul(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a.value, b.value, "add")
    return tape._record("add", (a, b), a.value + b.value)


def broadcast_add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a ``(1, cols)`` row to every row of ``a``."""
    if row.value.shape[-2] != 1 or row.value.shape[-1] != a.value.shape[-1]:
        raise ValueError(f"broadcast_add_row: expected (1, {a.value.shape[-1]}), got {row.shape}")
    return add(a, row)


def broadcast_add_col(a: Tensor, col: Tensor) -> Tensor:
    """Add a ``(rows, 1)`` column to every column of ``a``."""
    if col.value.shape[-1] != 1 or col.value.shape[-2] != a.value.shape[-2]:
        raise ValueError(f"broadcast_add_col: expected ({a.value.shape[-2]}, 1), got {col.shape}")
    return add(a, col)


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape._record("scale", (a,), a.value * c, c=float(c))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _check_broadcast(a.value, b.value, "mul")
    return tape._record("mul", (a, b), a.value * b.value)


def relu(a: Tensor) -> Tensor:
    return a.tape._record("relu", (a,), np.maximum(a.value, 0.0))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(a.value * _SQRT_HALF))
    return a.tape._record("gelu", (a,), a.value * cdf, cdf=cdf)


def softmax_rows_masked(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; ``mask`` False entries get probability 0."""
    x = a.value
    if mask is None:
        mask = np.ones(x.shape[-2:], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast(x, mask, "softmax_rows_masked")
    if not np.all(np.broadcast_to(mask, x.shape).any(axis=-1)):
        raise ValueError("softmax_rows_masked: a row is fully masked")
    logits = np.where(mask, x, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    y = e / e.sum(axis=-1, keepdims=True)
    return a.tape._record("softmax", (a,), y)


def mean_all(a: Tensor) -> Tensor:
    return a.tape._record("mean_all", (a,), np.array(a.value.mean()).reshape(1, 1))


def mse(a: Tensor, target) -> Tensor:
    """Mean of squared differences between ``a`` and a constant target."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != a.value.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {target.shape}")
    diff = a.value - target
    return a.tape._record("mse", (a,), np.array(np.mean(diff * diff)).reshape(1, 1), diff=diff)


def transpose(a: Tensor) -> Tensor:
    return a.tape._record("transpose", (a,), _swap(a.value))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the column axis."""
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise ValueError(f"concat: shape mismatch {a.shape} vs {b.shape}")
    split = a.value.shape[-1]
    return a.tape._record("concat", (a, b), np.concatenate([a.value, b.value], axis=-1), split=split)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return a.tape._record("reshape", (a,), a.value.reshape(shape))


def mean_rows(a: Tensor) -> Tensor:
    """Average over the row axis, keeping it as a length-1 axis."""
    return a.tape._record("mean_rows", (a,), a.value.mean(axis=-2, keepdims=True))


def log_softmax_nll(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``(B, C)`` logits against integer labels."""
    x = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValueError(f"cross-entropy: logits {x.shape} vs labels {labels.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(x.shape[0]), labels]
    denom = x.shape[0] if reduction == "mean" else 1.0
    value = np.array(nll.sum() / denom).reshape(1, 1)
    return logits.tape._record("nll", (logits,), value, probs=np.exp(logp), labels=labels, denom=denom)


# ---------------------------------------------------------------------------
# vector-Jacobian products


def _vjp_matmul(g, node):
    a, b = node.inputs
    ga = _matmul(g, _swap(b.value)) if a.node is not None else None
    gb = None
    if b.node is not None:
        if b.value.ndim == 2 and a.value.ndim > 2:
            gb = a.value.reshape(-1, a.value.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(_swap(a.value), g)
    return ga, gb


def _vjp_add(g, node):
    return g, g


def _vjp_scale(g, node):
    return (g * node.saved["c"],)


def _vjp_mul(g, node):
    a, b = node.inputs
    return g * b.value, g * a.value


def _vjp_relu(g, node):
    return (g * (node.inputs[0].value > 0),)


def _vjp_gelu(g, node):
    x = node.inputs[0].value
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (g * (node.saved["cdf"] + x * pdf),)


def _vjp_softmax(g, node):
    y = node.output.value
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _vjp_mean_all(g, node):
    x = node.inputs[0].value
    return (np.full_like(x, g.item() / x.size),)


def _vjp_mse(g, node):
    diff = node.saved["diff"]
    return (g.item() * 2.0 * diff / diff.size,)


def _vjp_transpose(g, node):
    return (_swap(g),)


def _vjp_concat(g, node):
    s = node.saved["split"]
    return g[..., :s], g[..., s:]


def _vjp_reshape(g, node):
    return (g.reshape(node.inputs[0].value.shape),)


def _vjp_mean_rows(g, node):
    x = node.inputs[0].value
    return (np.broadcast_to(g / x.shape[-2], x.shape).copy(),)


def _vjp_nll(g, node):
    p = node.saved["probs"].copy()
    labels = node.saved["labels"]
    p[np.arange(p.shape[0]), labels] -= 1.0
    return (g.item() * p / node.saved["denom"],)


VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "scale": _vjp_scale,
    "mul": _vjp_mul,
    "relu": _vjp_relu,
    "gelu": _vjp_gelu,
    "softmax": _vjp_softmax,
    "mean_all": _vjp_mean_all,
    "mse": _vjp_mse,
    "transpose": _vjp_transpose,
    "concat": _vjp_concat,
    "reshape": _vjp_reshape,
    "mean_rows": _vjp_mean_rows,
    "nll": _vjp_nll,
}

ACTIVATIONS = {"relu": relu, "gelu": gelu}


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    loss_fn: Callable[[Tape, Mapping[str, np.ndarray]], Tensor],
    params: Mapping[str, np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central differences for every coordinate.

    ``loss_fn(tape, params)`` must register ``params`` on the tape and return a
    scalar loss. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        analytic = tape.backward(loss_fn(tape, params))

    def value(p):
        with Tape() as t:
            return loss_fn(t, p).value.item()

    worst, count, failures = 0.0, 0, []
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = value(params)
            arr[idx] = orig - h
            down = value(params)
            arr[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            count += 1
            if rel > tol:
                failures.append((name, idx, float(a), float(numeric)))
    return GradCheckReport(worst, count, tol, failures)


# ---------------------------------------------------------------------------
# CKPT1 checkpoints


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: str | os.PathLike):
    lines = [f"{CKPT_MAGIC} {len(tensors)}"]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D, got shape {arr.shape}")
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid tensor name {name!r}")
        lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
        lines += [" ".join(f"{v:.17g}" for v in row) for row in arr]
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} file (header {lines[0]!r})")
    count = int(head[1])
    out: dict[str, np.ndarray] = {}
    pos = 1
    for _ in range(count):
        if pos >= len(lines):
            raise ValueError(f"{path}: truncated, expected {count} tensors")
        parts = lines[pos].split()
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed tensor header {lines[pos]!r}")
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        body = lines[pos + 1 : pos + 1 + rows]
        if len(body) != rows:
            raise ValueError(f"{path}: tensor {name!r} truncated")
        values = [ln.split() for ln in body]
        if any(len(v) != cols for v in values):
            raise ValueError(f"{path}: tensor {name!r} rows do not hold {cols} values")
        out[name] = np.array(values, dtype=np.float64).reshape(rows, cols)
        pos += 1 + rows
    return out
