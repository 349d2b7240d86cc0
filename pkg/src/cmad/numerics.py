"""Dense tensor arithmetic with tape-based reverse-mode differentiation.

Everything upstream (condition encoding, the adapted model, training) computes
on the primitives defined here. Arrays are numpy, row-major, float32 by
default; gradient checking runs the same graph in float64.

A forward pass records one closure per operation on the active ``Tape``.
Running the records in reverse execution order is a valid reverse topological
order, so ``Tape.backward`` is a single linear sweep. With no tape active the
ops run forward-only, which is what inference uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DeterminismError, NumericsError, ShapeError, StateError

DEFAULT_DTYPE = np.float32


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """A dense array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never receive gradients or updates."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of the operations of one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)`` once. A second backward on the same tape raises.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StateError("a tape is already recording; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise StateError("backward called twice on the same tape; run a new forward pass first")
        self._spent = True
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _result(data: np.ndarray, op: str, needs_grad: bool,
            backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    _check_finite(data, op)
    tape = _ACTIVE_TAPE
    out = Tensor(data, requires_grad=needs_grad and tape is not None)
    if out.requires_grad and backward_fn is not None:
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(data, "matmul", a.requires_grad or b.requires_grad, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    data = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(data, "add", a.requires_grad or b.requires_grad, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    data = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(data, "mul", a.requires_grad or b.requires_grad, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    data = x.data * c

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * c)

    return _result(data, "scale", x.requires_grad, bwd)


def add_const(x: Tensor, const: np.ndarray) -> Tensor:
    """x + const where const is a plain array broadcastable to x (no gradient into const)."""
    data = x.data + const
    if data.shape != x.shape:
        raise ShapeError(f"add_const changed shape: {x.shape} + {np.shape(const)}")

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g)

    return _result(data, "add_const", x.requires_grad, bwd)


def mul_const(x: Tensor, const: np.ndarray) -> Tensor:
    """x * const where const is a plain array broadcastable to x (no gradient into const)."""
    data = x.data * const
    if data.shape != x.shape:
        raise ShapeError(f"mul_const changed shape: {x.shape} * {np.shape(const)}")

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * const)

    return _result(data, "mul_const", x.requires_grad, bwd)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """x * s for a single-element tensor s (the gate multiply)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by needs a single-element scalar, got shape {s.shape}")
    sv = float(s.data.reshape(-1)[0])
    data = x.data * sv

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * sv)
        if s.requires_grad:
            s.accumulate_grad(np.full_like(s.data, np.sum(g * x.data)))

    return _result(data, "scale_by", x.requires_grad or s.requires_grad, bwd)


def transpose(x: Tensor) -> Tensor:
    data = x.data.T.copy()

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g.T)

    return _result(data, "transpose", x.requires_grad, bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def bwd(g: np.ndarray) -> None:
        ofs = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.accumulate_grad(g[:, ofs:ofs + w])
            ofs += w

    return _result(data, "concat_cols", any(p.requires_grad for p in parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[:, start:stop].copy()

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate_grad(full)

    return _result(data, "slice_cols", x.requires_grad, bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[start:stop].copy()

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x.accumulate_grad(full)

    return _result(data, "slice_rows", x.requires_grad, bwd)


def broadcast_rows(v: Tensor, n_rows: int) -> Tensor:
    """Tile a vector (k,) into an (n_rows, k) matrix."""
    if v.data.ndim != 1:
        raise ShapeError(f"broadcast_rows needs a vector, got shape {v.shape}")
    data = np.broadcast_to(v.data, (n_rows, v.shape[0])).copy()

    def bwd(g: np.ndarray) -> None:
        v.accumulate_grad(g.sum(axis=0))

    return _result(data, "broadcast_rows", v.requires_grad, bwd)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup needs a 1-d index sequence, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise IndexError(f"embedding index {bad} out of range [0, {n})")
    data = table.data[idx]

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table.accumulate_grad(full)

    return _result(data, "embedding_lookup", table.requires_grad, bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * (x.data > 0))

    return _result(data, "relu", x.requires_grad, bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    data = np.array(x.data.sum(), dtype=x.dtype)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(np.full_like(x.data, float(g)))

    return _result(data, "tsum", x.requires_grad, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=-1, keepdims=True)
        x.accumulate_grad(data * (g - inner))

    return _result(data, "softmax_rows", x.requires_grad, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learnable scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match width {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    data = xhat * gamma.data + beta.data

    def bwd(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv_std)

    return _result(data, "layer_norm",
                   x.requires_grad or gamma.requires_grad or beta.requires_grad, bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[t, target_t]."""
    idx = np.asarray(targets, dtype=np.int64)
    n_rows, vocab = logits.shape
    if idx.shape != (n_rows,):
        raise ShapeError(f"targets shape {idx.shape} does not match {n_rows} rows of logits")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise IndexError(f"target {bad} out of range [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n_rows)
    nll = lse - shifted[rows, idx]
    data = np.array(nll.mean(), dtype=logits.dtype)

    def bwd(g: np.ndarray) -> None:
        probs = np.exp(shifted - lse[:, None])
        probs[rows, idx] -= 1.0
        logits.accumulate_grad(probs * (float(g) / n_rows))

    return _result(data, "cross_entropy", logits.requires_grad, bwd)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def lr_schedule(step: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp from 0 to base_lr over warmup_steps, constant afterwards."""
    if warmup_steps < 0:
        raise ValueError("warmup_steps must be >= 0")
    if warmup_steps == 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


class Adam:
    """Adam with bias correction. Frozen parameters are never touched."""

    def __init__(self, params: Iterable[Parameter], lr: float = 2e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            if not p.trainable:
                continue
            if p.grad is None:
                raise StateError(f"optimizer step on unpopulated gradient for {p.name!r}")
            m = self._m.setdefault(p.name, np.zeros_like(p.data))
            v = self._v.setdefault(p.name, np.zeros_like(p.data))
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def clip_global_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale trainable gradients so their joint L2 norm is at most max_norm."""
    grads = [p.grad for p in params if p.trainable and p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter and overall max relative error of analytic vs numeric gradients."""
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)

    def format_table(self) -> str:
        lines = [f"{'parameter':40s} {'max rel err':>12s}"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"{name:40s} {err:12.3e}")
        lines.append(f"{'OVERALL':40s} {self.max_rel_error:12.3e}")
        return "\n".join(lines)


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                      epsilon: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of loss_fn against central finite differences.

    loss_fn must rebuild its forward pass from the current parameter values on
    every call and must be deterministic; both are verified. Parameters must be
    float64 for the comparison to be meaningful.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        if p.dtype != np.float64:
            raise StateError(f"finite_diff_check requires float64 parameters, {p.name!r} is {p.dtype}")

    v1 = float(loss_fn().item())
    v2 = float(loss_fn().item())
    if v1 != v2:
        raise DeterminismError(f"loss_fn is not deterministic: {v1!r} vs {v2!r}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    report = GradCheckReport(max_rel_error=0.0)
    for p in params:
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn().item())
            flat[i] = orig - epsilon
            f_minus = float(loss_fn().item())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[p.name].reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        report.per_param[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
