"""Reverse-mode automatic differentiation over dense 2-D matrices.

Every value is a :class:`Tensor` wrapping a 2-D numpy array.  Operations
executed while a :class:`Tape` is active append a backward closure to the
tape; :meth:`Tape.backward` replays the closures in reverse execution order,
which is a valid topological order, accumulating gradients additively.
Running ops with no active tape is a plain forward evaluation (used at
inference time).

Two precision modes are supported: float32 for training, float64 for
verification.  Gradient checking (:func:`finite_diff_check`) should run in
float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import LogNonPositive, NotScalarLoss, ShapeMismatch

DTYPES = {"f32": np.float32, "f64": np.float64}

# When True, every primitive asserts its output is finite (debug mode).
CHECK_FINITE = False

_TLS = threading.local()

# Clamp applied to sigmoid/exp-of-gate arguments before exponentiation.
GATE_CLAMP = 500.0


def _stack() -> list:
    if not hasattr(_TLS, "stack"):
        _TLS.stack = []
    return _TLS.stack


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A 2-D matrix value, optionally carrying a gradient buffer."""

    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value: np.ndarray, needs_grad: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, needs_grad={self.needs_grad})"


class Parameter(Tensor):
    """A named trainable tensor with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(np.ascontiguousarray(value), needs_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) into every reachable node's grad."""
        if loss.value.shape != (1, 1):
            raise NotScalarLoss(f"loss has shape {loss.value.shape}, expected (1, 1)")
        accumulate(loss, np.ones((1, 1), dtype=loss.value.dtype))
        for fn in reversed(self._records):
            fn()


def constant(value: np.ndarray | Sequence, dtype=None) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D array, got ndim={arr.ndim}")
    return Tensor(arr)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def ensure_grad(t: Tensor) -> np.ndarray:
    """Gradient buffer of t, created on demand (for scatter-style backward)."""
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    return t.grad


def _emit(value: np.ndarray, needs: bool, backward_fn) -> Tensor:
    if CHECK_FINITE and not np.isfinite(value).all():
        from .errors import NonFiniteValue

        raise NonFiniteValue("non-finite value produced by a primitive op")
    out = Tensor(value, needs_grad=needs)
    tape = current_tape()
    if tape is not None and needs:
        tape.record(lambda: backward_fn(out))
    return out


def _need(*ts: Tensor) -> bool:
    return any(t.needs_grad for t in ts)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b), with w laid out (d_out, d_in) and b (1, d_out)."""
    if x.value.shape[1] != w.value.shape[1]:
        raise ShapeMismatch(
            f"linear: x has {x.value.shape[1]} cols, w expects {w.value.shape[1]}"
        )
    y = x.value @ w.value.T
    if b is not None:
        if b.value.shape != (1, w.value.shape[0]):
            raise ShapeMismatch(f"linear: bias shape {b.value.shape}")
        y = y + b.value

    def backward(out: Tensor):
        if out.grad is None:
            return
        g = out.grad
        if w.needs_grad:
            accumulate(w, g.T @ x.value)
        if x.needs_grad:
            accumulate(x, g @ w.value)
        if b is not None and b.needs_grad:
            accumulate(b, g.sum(axis=0, keepdims=True))

    return _emit(y, _need(x, w) or (b is not None and b.needs_grad), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: {a.value.shape} @ {b.value.shape}")
    y = a.value @ b.value

    def backward(out: Tensor):
        if out.grad is None:
            return
        g = out.grad
        if a.needs_grad:
            accumulate(a, g @ b.value.T)
        if b.needs_grad:
            accumulate(b, a.value.T @ g)

    return _emit(y, _need(a, b), backward)


def transpose(x: Tensor) -> Tensor:
    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad.T)

    return _emit(np.ascontiguousarray(x.value.T), x.needs_grad, backward)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"{op}: {a.value.shape} vs {b.value.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(out: Tensor):
        if out.grad is None:
            return
        accumulate(a, out.grad)
        accumulate(b, out.grad)

    return _emit(a.value + b.value, _need(a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(out: Tensor):
        if out.grad is None:
            return
        accumulate(a, out.grad)
        accumulate(b, -out.grad)

    return _emit(a.value - b.value, _need(a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def backward(out: Tensor):
        if out.grad is None:
            return
        accumulate(a, out.grad * b.value)
        accumulate(b, out.grad * a.value)

    return _emit(a.value * b.value, _need(a, b), backward)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """y = scale * x + shift with python-scalar coefficients."""
    dt = x.value.dtype.type
    s, c = dt(scale), dt(shift)

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad * s)

    return _emit(x.value * s + c, x.needs_grad, backward)


def relu(x: Tensor) -> Tensor:
    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad * (x.value > 0))

    return _emit(np.maximum(x.value, 0), x.needs_grad, backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; argument clamped at +/-GATE_CLAMP before exp.

    Evaluated branch-wise so only negative arguments are exponentiated,
    which never overflows in either precision.
    """
    z = np.clip(x.value, -GATE_CLAMP, GATE_CLAMP)
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    y = y.astype(x.value.dtype, copy=False)

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad * y * (1.0 - y))

    return _emit(y, x.needs_grad, backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad * y)

    return _emit(y, x.needs_grad, backward)


def log(x: Tensor) -> Tensor:
    if (x.value <= 0).any():
        raise LogNonPositive("log of a value <= 0")

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad / x.value)

    return _emit(np.log(x.value), x.needs_grad, backward)


def absolute(x: Tensor) -> Tensor:
    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad * np.sign(x.value))

    return _emit(np.abs(x.value), x.needs_grad, backward)


def sqrt(x: Tensor) -> Tensor:
    if (x.value < 0).any():
        raise LogNonPositive("sqrt of a negative value")
    y = np.sqrt(x.value)

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, out.grad * (0.5 / np.maximum(y, np.finfo(y.dtype).tiny)))

    return _emit(y, x.needs_grad, backward)


def reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.value

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, -out.grad * y * y)

    return _emit(y.astype(x.value.dtype, copy=False), x.needs_grad, backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by s[i, 0]; s must be (n, 1)."""
    if s.value.shape != (x.value.shape[0], 1):
        raise ShapeMismatch(f"scale_rows: x {x.value.shape}, s {s.value.shape}")

    def backward(out: Tensor):
        if out.grad is None:
            return
        accumulate(x, out.grad * s.value)
        if s.needs_grad:
            accumulate(s, (out.grad * x.value).sum(axis=1, keepdims=True))

    return _emit(x.value * s.value, _need(x, s), backward)


def softmax_row(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    v = x.value
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(out: Tensor):
        if out.grad is None:
            return
        g = out.grad
        accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _emit(y, x.needs_grad, backward)


def row_max(x: Tensor) -> Tensor:
    """Max over each row -> (n, 1); gradient routes to the argmax column only.

    Ties resolve to the lowest column index.
    """
    v = x.value
    idx = v.argmax(axis=1)
    rows = np.arange(v.shape[0])
    y = v[rows, idx][:, None]

    def backward(out: Tensor):
        if out.grad is None or not x.needs_grad:
            return
        gx = ensure_grad(x)
        np.add.at(gx, (rows, idx), out.grad[:, 0])

    return _emit(np.ascontiguousarray(y), x.needs_grad, backward)


def row_mean(x: Tensor) -> Tensor:
    k = x.value.shape[1]

    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, np.repeat(out.grad / k, k, axis=1))

    return _emit(x.value.mean(axis=1, keepdims=True), x.needs_grad, backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(out: Tensor):
        if out.grad is not None:
            accumulate(x, np.full_like(x.value, out.grad[0, 0]))

    return _emit(x.value.sum(dtype=x.value.dtype).reshape(1, 1), x.needs_grad, backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def backward(out: Tensor):
        if out.grad is None or not x.needs_grad:
            return
        np.add.at(ensure_grad(x), idx, out.grad)

    return _emit(x.value[idx], x.needs_grad, backward)


def gather_row_cols(x: Tensor, row: int, cols) -> Tensor:
    """Select x[row, cols] as a (1, len(cols)) tensor."""
    cidx = np.asarray(cols, dtype=np.intp)
    y = x.value[row, cidx][None, :]

    def backward(out: Tensor):
        if out.grad is None or not x.needs_grad:
            return
        np.add.at(ensure_grad(x)[row], cidx, out.grad[0])

    return _emit(np.ascontiguousarray(y), x.needs_grad, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(out: Tensor):
        if out.grad is None or not x.needs_grad:
            return
        ensure_grad(x)[start:stop] += out.grad

    return _emit(np.ascontiguousarray(x.value[start:stop]), x.needs_grad, backward)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("vstack of nothing")
    y = np.concatenate([p.value for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])
    needs = any(p.needs_grad for p in parts)

    def backward(out: Tensor):
        if out.grad is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                accumulate(p, out.grad[lo:hi])

    return _emit(y, needs, backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeMismatch(f"concat_cols: {a.value.shape} vs {b.value.shape}")
    ca = a.value.shape[1]

    def backward(out: Tensor):
        if out.grad is None:
            return
        accumulate(a, out.grad[:, :ca])
        accumulate(b, out.grad[:, ca:])

    return _emit(np.concatenate([a.value, b.value], axis=1), _need(a, b), backward)


# ---------------------------------------------------------------------------
# parameters & optimizer
# ---------------------------------------------------------------------------

def init_linear_weight(name: str, d_out: int, d_in: int, rng: np.random.Generator,
                       dtype=np.float32) -> Parameter:
    """Fan-based uniform init in +/- sqrt(6 / (d_in + d_out))."""
    bound = np.sqrt(6.0 / (d_in + d_out))
    w = rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype)
    return Parameter(name, w)


def init_zero_bias(name: str, d_out: int, dtype=np.float32) -> Parameter:
    return Parameter(name, np.zeros((1, d_out), dtype=dtype))


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0


class AdamState:
    """Adam with bias correction; update = -lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, params: Sequence[Parameter], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, params: Sequence[Parameter]) -> None:
        """Apply one update from the accumulated grads, then zero them."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            g = p.grad
            if self.weight_decay > 0.0:
                g = g + self.weight_decay * p.value
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.value.dtype, copy=False
            )
        zero_grads(params)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = float(sum(float((p.grad ** 2).sum()) for p in params))
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class FiniteDiffReport:
    """Per-parameter maximum relative error between analytic and numeric grads."""

    def __init__(self, per_param: dict[str, float], h: float, tol: float):
        self.per_param = per_param
        self.h = h
        self.tol = tol

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self) -> str:
        worst = self.max_rel_err
        return f"FiniteDiffReport(max_rel_err={worst:.3e}, tol={self.tol:.1e}, passed={self.passed})"


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      h: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare analytic gradients of loss_fn against central differences.

    ``loss_fn`` rebuilds the scalar loss from the params' current values on
    every call and must be deterministic; the checker manages tapes itself
    (one taped pass for analytic grads, tape-free passes for the stencil).
    Relative error per entry is |a - n| / max(1e-8, |a| + |n|), except that
    entries where both sides sit below the stencil's own roundoff floor
    (about ulp(loss)/2h; flat directions such as a score bias under a
    pairwise loss) count as exact matches, since central differences cannot
    resolve zero there.  Run in float64 for trustworthy results.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)
    zero_band = max(1e-8, abs(float(loss.value[0, 0])) * 1e-9)

    def eval_loss() -> float:
        return float(loss_fn().value[0, 0])

    per_param: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = eval_loss()
            flat[i] = orig - h
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(a_flat[i])
            if abs(a) <= zero_band and abs(numeric) <= zero_band:
                continue
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if rel > worst:
                worst = rel
        per_param[p.name] = worst
    return FiniteDiffReport(per_param, h, tol)
