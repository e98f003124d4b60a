"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` wraps a row-major float64 array plus an optional gradient
accumulator. Operations executed while a :class:`Tape` is active append one
backward closure each; replaying the tape in reverse accumulates gradients
into every tracked input exactly once per use. With no active tape (the
evaluation path) operations are plain numpy calls with no bookkeeping.

The operation set is exactly what the linking model needs: dense and
sparse-by-dense matmul, elementwise arithmetic, gather/concat/stack shape
plumbing, relu/tanh, softmax and sparsemax, layer norm, inverted dropout,
positional max-pooling, and a fused log-space cross entropy. Every
differentiable primitive is validated against central finite differences by
:func:`finite_difference_check`.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

LAYER_NORM_EPS = 1e-5
# Denominator floor when turning absolute gradient deviations into relative
# ones; deviations below floor * tolerance are indistinguishable from
# finite-difference roundoff.
_REL_FLOOR = 1e-3


class Tensor:
    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return self.values.item()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of backward closures for one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, root: Tensor) -> None:
        """Seed the scalar root with gradient one and replay in reverse."""
        if root.values.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        if root.grad is None:
            raise ValueError("backward root is not tracked by this tape")
        root.grad.fill(0.0)
        root.grad += 1.0
        for op in reversed(self._ops):
            op()


_TAPES: list[Tape] = []


@contextmanager
def recording(tape: Tape):
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def _result(values: np.ndarray, *inputs: Tensor) -> Tensor:
    """Output tensor, tracked iff a tape is active and any input is."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out.grad = np.zeros_like(values) if out.requires_grad else None
    return out


def _record(fn: Callable[[], None]) -> None:
    _TAPES[-1]._ops.append(fn)


# ---------------------------------------------------------------------------
# Arithmetic and shape plumbing
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _result(a.values + b.values, a, b)
    if out.requires_grad:
        def backward():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        _record(backward)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., :] + b with b broadcast over all leading axes."""
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {x.shape} vs {b.shape}")
    out = _result(x.values + b.values, x, b)
    if out.requires_grad:
        def backward():
            if x.requires_grad:
                x.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad.reshape(-1, b.shape[0]).sum(axis=0)
        _record(backward)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = _result(x.values + c, x)
    if out.requires_grad:
        def backward():
            x.grad += out.grad
        _record(backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = _result(a.values * b.values, a, b)
    if out.requires_grad:
        def backward():
            if a.requires_grad:
                a.grad += out.grad * b.values
            if b.requires_grad:
                b.grad += out.grad * a.values
        _record(backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"div shape mismatch: {a.shape} vs {b.shape}")
    out = _result(a.values / b.values, a, b)
    if out.requires_grad:
        def backward():
            if a.requires_grad:
                a.grad += out.grad / b.values
            if b.requires_grad:
                b.grad -= out.grad * a.values / (b.values * b.values)
        _record(backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _result(x.values * c, x)
    if out.requires_grad:
        def backward():
            x.grad += out.grad * c
        _record(backward)
    return out


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a one-element tensor (differentiable on both sides)."""
    if s.values.size != 1:
        raise ValueError(f"scale_by expects a one-element tensor, got {s.shape}")
    sval = s.values.item()
    out = _result(x.values * sval, x, s)
    if out.requires_grad:
        def backward():
            if x.requires_grad:
                x.grad += out.grad * sval
            if s.requires_grad:
                s.grad += np.sum(out.grad * x.values).reshape(s.shape)
        _record(backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _result(a.values @ b.values, a, b)
    if out.requires_grad:
        def backward():
            if a.requires_grad:
                a.grad += out.grad @ b.values.T
            if b.requires_grad:
                b.grad += a.values.T @ out.grad
        _record(backward)
    return out


def spmm(s: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor; gradient flows into x."""
    out = _result(np.asarray(s @ x.values), x)
    if out.requires_grad:
        st = s.T
        def backward():
            x.grad += np.asarray(st @ out.grad)
        _record(backward)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got {x.shape}")
    out = _result(np.ascontiguousarray(x.values.T), x)
    if out.requires_grad:
        def backward():
            x.grad += out.grad.T
        _record(backward)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(x.values.reshape(shape).copy(), x)
    if out.requires_grad:
        def backward():
            x.grad += out.grad.reshape(x.shape)
        _record(backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = _result(np.concatenate([p.values for p in parts], axis=axis), *parts)
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def backward():
            g = np.moveaxis(out.grad, axis, -1)
            for p, lo, hi in zip(parts, offsets, offsets[1:]):
                if p.requires_grad:
                    p.grad += np.moveaxis(g[..., lo:hi], -1, axis)
        _record(backward)
    return out


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    out = _result(np.stack([v.values for v in vectors], axis=0), *vectors)
    if out.requires_grad:
        def backward():
            for i, v in enumerate(vectors):
                if v.requires_grad:
                    v.grad += out.grad[i]
        _record(backward)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    out = _result(x.values[start:stop].copy(), x)
    if out.requires_grad:
        def backward():
            x.grad[start:stop] += out.grad
        _record(backward)
    return out


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of a matrix; repeated indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"{int(idx.min())}..{int(idx.max())}"
        )
    out = _result(table.values[idx], table)
    if out.requires_grad:
        def backward():
            np.add.at(table.grad, idx, out.grad)
        _record(backward)
    return out


# ---------------------------------------------------------------------------
# Nonlinear primitives
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.values, 0.0), x)
    if out.requires_grad:
        mask = x.values > 0.0  # subgradient at exactly zero is zero
        def backward():
            x.grad += out.grad * mask
        _record(backward)
    return out


def tanh(x: Tensor) -> Tensor:
    vals = np.tanh(x.values)
    out = _result(vals, x)
    if out.requires_grad:
        def backward():
            x.grad += out.grad * (1.0 - vals * vals)
        _record(backward)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _result(p, x)
    if out.requires_grad:
        def backward():
            g = out.grad
            x.grad += (g - (g * p).sum(axis=axis, keepdims=True)) * p
        _record(backward)
    return out


def sparsemax(x: Tensor) -> Tensor:
    """Euclidean projection of a vector onto the probability simplex.

    Sort-and-threshold: with z sorted descending, the support size is the
    largest k with 1 + k * z_(k) > sum_{j<=k} z_(j); the threshold is
    tau = (sum_{j<=k} z_(j) - 1) / k and p_i = max(z_i - tau, 0). The
    Jacobian acts only on the support: centered upstream gradient there,
    zero elsewhere.
    """
    if x.values.ndim != 1:
        raise ValueError(f"sparsemax expects a vector, got {x.shape}")
    if not np.all(np.isfinite(x.values)):
        raise ValueError("sparsemax input must be finite")
    z = x.values
    z_sorted = np.sort(z)[::-1]
    cumulative = np.cumsum(z_sorted)
    k = np.arange(1, z.size + 1)
    support_size = int(np.count_nonzero(1.0 + k * z_sorted > cumulative))
    tau = (cumulative[support_size - 1] - 1.0) / support_size
    p = np.maximum(z - tau, 0.0)
    out = _result(p, x)
    if out.requires_grad:
        support = p > 0.0
        n_support = int(np.count_nonzero(support))
        def backward():
            g = out.grad
            mean_g = g[support].sum() / n_support
            x.grad[support] += g[support] - mean_g
        _record(backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gain.values + bias.values, x, gain, bias)
    if out.requires_grad:
        def backward():
            g = out.grad
            if gain.requires_grad:
                gain.grad += (g * xhat).reshape(-1, d).sum(axis=0)
            if bias.requires_grad:
                bias.grad += g.reshape(-1, d).sum(axis=0)
            if x.requires_grad:
                dxhat = g * gain.values
                x.grad += (inv / d) * (
                    d * dxhat
                    - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
                )
        _record(backward)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales survivors at train time, identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _result(x.values * mask, x)
    if out.requires_grad:
        def backward():
            x.grad += out.grad * mask
        _record(backward)
    return out


def max_pool_positions(z: Tensor) -> Tensor:
    """Column-wise max of an (m, d) matrix; ties resolve to the first row."""
    if z.values.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"max_pool_positions needs a non-empty matrix, got {z.shape}")
    winners = np.argmax(z.values, axis=0)
    out = _result(z.values[winners, np.arange(z.shape[1])], z)
    if out.requires_grad:
        def backward():
            np.add.at(z.grad, (winners, np.arange(z.shape[1])), out.grad)
        _record(backward)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax likelihood, computed in log space."""
    idx = np.asarray(targets, dtype=np.int64)
    b, c = logits.shape
    if idx.shape != (b,):
        raise ValueError(f"targets shape {idx.shape} does not match batch {b}")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ValueError(f"target class out of range [0, {c})")
    m = logits.values.max(axis=1, keepdims=True)
    log_z = m + np.log(np.exp(logits.values - m).sum(axis=1, keepdims=True))
    log_p = logits.values - log_z
    loss = -log_p[np.arange(b), idx].mean()
    out = _result(np.asarray(loss), logits)
    if out.requires_grad:
        def backward():
            p = np.exp(log_p)
            p[np.arange(b), idx] -= 1.0
            logits.grad += p * (out.grad / b)
        _record(backward)
    return out


def sum_squares(x: Tensor) -> Tensor:
    out = _result(np.asarray(np.sum(x.values * x.values)), x)
    if out.requires_grad:
        def backward():
            x.grad += 2.0 * x.values * out.grad
        _record(backward)
    return out


def row_norms(x: Tensor) -> Tensor:
    """Euclidean norm of each row; an all-zero row gets gradient zero."""
    if x.values.ndim != 2:
        raise ValueError(f"row_norms expects a matrix, got {x.shape}")
    norms = np.sqrt(np.sum(x.values * x.values, axis=1))
    out = _result(norms, x)
    if out.requires_grad:
        safe = np.where(norms > 0.0, norms, 1.0)
        def backward():
            x.grad += (out.grad / safe)[:, None] * x.values
        _record(backward)
    return out


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare the taped gradient of scalar-valued f against central differences.

    f must be deterministic. The relative error of each coordinate uses a
    denominator floored at a small constant so coordinates whose true
    gradient is negligible are judged on the absolute scale of
    finite-difference noise instead of blowing up.
    """
    x.requires_grad = True
    if x.grad is None:
        x.grad = np.zeros_like(x.values)
    x.zero_grad()
    tape = Tape()
    with recording(tape):
        out = f(x)
    tape.backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).values.item()
        flat[i] = orig - h
        fm = f(x).values.item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    abs_err = np.abs(numeric - analytic)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), _REL_FLOOR)
    rel = abs_err / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_error=float(rel.reshape(-1)[worst]),
        max_abs_error=float(abs_err.max()),
        worst_index=np.unravel_index(worst, x.values.shape),
        tolerance=tolerance,
    )


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TLNKPRM1"


def save_tensors(path: str | Path, named: Sequence[tuple[str, np.ndarray]]) -> None:
    """Versioned binary checkpoint: (name, shape, row-major float64) records."""
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name, values in named:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(values, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open("rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a tulink parameter checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
            out[name] = values
    return out
