"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, with a float64 test
mode for gradient oracles). Every op records its output on a global tape in
execution order; ``backward`` replays the tape in exact reverse order, summing
contributions when a tensor feeds several ops, and clears the tape afterwards.

Design constraints baked in rather than configurable:

* no general broadcasting: elementwise ops demand equal shapes, with two
  carve-outs used by the training loops (a scalar operand, and adding a
  ``(C, H, W)`` tensor across a ``(N, C, H, W)`` batch);
* relu and the L1 norm take subgradient 0 at 0;
* conv2d is stride-1 with same zero padding and odd kernels only;
* clip passes gradient through inside ``[lo, hi]`` and blocks it outside.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fourier import ALL_PASS, FreqFilterSpec, filter_array

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NumericalError(RuntimeError):
    """A training or attack loop hit a non-finite value."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_TAPE: list["Tensor"] = []


def default_dtype():
    return _DTYPE


class use_dtype:
    """Context manager switching the dtype newly created tensors use.

    Intended for the float64 gradient-oracle mode in tests; graphs must be
    built entirely inside the context so dtypes stay consistent.
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"use_dtype: only float32/float64 supported, got {dtype}")

    def __enter__(self):
        global _DTYPE
        self._saved = _DTYPE
        _DTYPE = self.dtype
        return self

    def __exit__(self, *exc):
        global _DTYPE
        _DTYPE = self._saved
        return False


class no_grad:
    """Context manager disabling tape recording (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", _inputs: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        # ascontiguousarray would promote 0-d to (1,); keep scalars 0-d
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._inputs = _inputs
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Small conveniences; the op functions below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Assemble an op output; record it on the tape when gradients are live."""
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, op=op, _inputs=inputs if needs else ())
    if needs:
        out._backward = backward(out)
        _TAPE.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    """equal | scalar_b | scalar_a | batch (b broadcast across a's axis 0)."""
    if a.shape == b.shape:
        return "equal"
    if b.data.ndim == 0:
        return "scalar_b"
    if a.data.ndim == 0:
        return "scalar_a"
    if a.data.ndim >= 1 and a.shape[1:] == b.shape:
        return "batch"
    raise ShapeError(f"{op}: shapes {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    mode = _binary_mode(a, b, "add")
    out_data = a.data + b.data

    def backward(out):
        def run():
            g = out.grad
            if mode in ("equal", "scalar_a") and a.requires_grad:
                _accum(a, g if mode == "equal" else np.asarray(g.sum()))
            elif a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                if mode == "equal":
                    _accum(b, g)
                elif mode == "scalar_b":
                    _accum(b, np.asarray(g.sum()))
                elif mode == "batch":
                    _accum(b, g.sum(axis=0))
                else:
                    _accum(b, g)
        return run

    return _make(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    mode = _binary_mode(a, b, "sub")
    out_data = a.data - b.data

    def backward(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accum(a, np.asarray(g.sum()) if mode == "scalar_a" else g)
            if b.requires_grad:
                if mode == "equal":
                    _accum(b, -g)
                elif mode == "scalar_b":
                    _accum(b, np.asarray(-g.sum()))
                elif mode == "batch":
                    _accum(b, -g.sum(axis=0))
                else:
                    _accum(b, -g)
        return run

    return _make(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    mode = _binary_mode(a, b, "mul")
    if mode == "batch":
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(out):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = g * b.data
                _accum(a, np.asarray(ga.sum()) if mode == "scalar_a" else ga)
            if b.requires_grad:
                gb = g * a.data
                _accum(b, np.asarray(gb.sum()) if mode == "scalar_b" else gb)
        return run

    return _make(out_data, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        return run

    return _make(out_data, "matmul", (a, b), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer. Input of rank > 2 is flattened to (N, D) first."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.ndim < 2:
        raise ShapeError(f"dense: input must be batched, got shape {x.shape}")
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if w.data.ndim != 2 or flat.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} (flat {flat.shape}) vs weight {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"dense: weight {w.shape} vs bias {b.shape}")
    out_data = flat @ w.data + b.data

    def backward(out):
        def run():
            g = out.grad
            if x.requires_grad:
                _accum(x, (g @ w.data.T).reshape(x.shape))
            if w.requires_grad:
                _accum(w, flat.T @ g)
            if b.requires_grad:
                _accum(b, g.sum(axis=0))
        return run

    return _make(out_data, "dense", (x, w, b), backward)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _conv_windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, C, H, W, kh, kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 cross-correlation with same zero padding.

    x: (N, C, H, W); w: (F, C, kh, kw) with odd kh, kw; b: (F,).
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be (N, C, H, W), got {x.shape}")
    if w.data.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd-sized, got {w.shape}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(f"conv2d: kernel {w.shape} vs bias {b.shape}")

    win = _conv_windows(x.data, kh, kw)
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, F)
    out_data = np.moveaxis(out_data, 3, 1) + b.data[None, :, None, None]
    out_data = np.ascontiguousarray(out_data)

    def backward(out):
        def run():
            g = out.grad
            if b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)
                _accum(w, gw)
            if x.requires_grad:
                wing = _conv_windows(g, kh, kw)  # (N, F, H, W, kh, kw)
                flipped = w.data[:, :, ::-1, ::-1]
                gx = np.tensordot(wing, flipped, axes=([1, 4, 5], [0, 2, 3]))  # (N, H, W, C)
                _accum(x, np.ascontiguousarray(np.moveaxis(gx, 3, 1)))
        return run

    return _make(out_data, "conv2d", (x, w, b), backward)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2. Spatial dims must be even."""
    x = _lift(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2: input must be (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: spatial dims must be even, got {x.shape}")
    out_data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(out):
        def run():
            if x.requires_grad:
                g = out.grad
                gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
                _accum(x, gx.astype(x.data.dtype))
        return run

    return _make(out_data, "avgpool2", (x,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * mask)
        return run

    return _make(out_data, "relu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * out_data * (1.0 - out_data))
        return run

    return _make(out_data, "sigmoid", (x,), backward)


def tanh(x: Tensor) -> Tensor:
    x = _lift(x)
    out_data = np.tanh(x.data)

    def backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * (1.0 - out_data * out_data))
        return run

    return _make(out_data, "tanh", (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through subgradient inside [lo, hi], zero outside."""
    x = _lift(x)
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got [{lo}, {hi}]")
    mask = (x.data >= lo) & (x.data <= hi)
    out_data = np.clip(x.data, lo, hi)

    def backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * mask)
        return run

    return _make(out_data, "clip", (x,), backward)


# ---------------------------------------------------------------------------
# losses and penalties (scalar outputs)
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch from raw logits (stable log-softmax)."""
    logits = _lift(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, K), got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    if y.dtype.kind not in "iu":
        raise ValueError("softmax_cross_entropy: labels must be integers")
    n, k = logits.shape
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out_data = np.asarray((lse - z[np.arange(n), y]).mean())

    def backward(out):
        def run():
            if logits.requires_grad:
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                p[np.arange(n), y] -= 1.0
                _accum(logits, p * (out.grad / n))
        return run

    return _make(out_data, "softmax_cross_entropy", (logits,), backward)


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient at 0 is 0."""
    x = _lift(x)
    out_data = np.asarray(np.abs(x.data).sum())

    def backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * np.sign(x.data))
        return run

    return _make(out_data, "l1_norm", (x,), backward)


def l2_sq(x: Tensor) -> Tensor:
    """Sum of squares."""
    x = _lift(x)
    out_data = np.asarray((x.data * x.data).sum())

    def backward(out):
        def run():
            if x.requires_grad:
                _accum(x, out.grad * 2.0 * x.data)
        return run

    return _make(out_data, "l2_sq", (x,), backward)


def mean_abs(x: Tensor) -> Tensor:
    """Mean absolute value, built from l1_norm."""
    return mul(l1_norm(x), 1.0 / x.size)


def smoothness_penalty(x: Tensor) -> Tensor:
    """Sum of squared first differences along the trailing two (spatial) axes."""
    x = _lift(x)
    if x.data.ndim < 2:
        raise ShapeError(f"smoothness_penalty: need trailing spatial axes, got {x.shape}")
    dh = x.data[..., 1:, :] - x.data[..., :-1, :]
    dv = x.data[..., :, 1:] - x.data[..., :, :-1]
    out_data = np.asarray((dh * dh).sum() + (dv * dv).sum())

    def backward(out):
        def run():
            if x.requires_grad:
                g = out.grad
                gx = np.zeros_like(x.data)
                gx[..., 1:, :] += 2.0 * dh * g
                gx[..., :-1, :] -= 2.0 * dh * g
                gx[..., :, 1:] += 2.0 * dv * g
                gx[..., :, :-1] -= 2.0 * dv * g
                _accum(x, gx)
        return run

    return _make(out_data, "smoothness_penalty", (x,), backward)


def freq_filter(x: Tensor, f: FreqFilterSpec = ALL_PASS) -> Tensor:
    """Fixed real box-filter in the shifted frequency domain.

    Linear and self-adjoint (the mask is real and 0/1), so the gradient is the
    same filter applied to the upstream gradient.
    """
    x = _lift(x)
    if x.data.ndim < 2:
        raise ShapeError(f"freq_filter: need trailing spatial axes, got {x.shape}")
    if f.kind == "all_pass":
        out_data = x.data.copy()
    else:
        out_data = filter_array(x.data, f).astype(x.data.dtype)

    def backward(out):
        def run():
            if x.requires_grad:
                g = out.grad
                gx = g.copy() if f.kind == "all_pass" else filter_array(g, f).astype(g.dtype)
                _accum(x, gx)
        return run

    return _make(out_data, "freq_filter", (x,), backward)


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "dense": dense,
    "conv2d": conv2d,
    "avgpool2": avgpool2,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "clip": clip,
    "softmax_cross_entropy": softmax_cross_entropy,
    "l1_norm": l1_norm,
    "l2_sq": l2_sq,
    "smoothness_penalty": smoothness_penalty,
    "freq_filter": freq_filter,
}


def forward_op(kind: str, inputs, **attrs) -> Tensor:
    """Generic dispatcher over the op table (used by generic op tests)."""
    if kind not in _OPS:
        raise ValueError(f"forward_op: unknown op kind {kind!r}")
    return _OPS[kind](*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: dict[str, Tensor] | None = None):
    """Reverse-replay the tape from a scalar loss.

    Returns ``{tensor: grad}`` over every requires_grad leaf reached, or
    ``{name: grad}`` when ``params`` is given (missing parameters get zeros
    plus a warning). The tape and all transient ``.grad`` fields are cleared
    before returning.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    touched: list[Tensor] = []
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for t in reversed(_TAPE):
            if t.grad is None or t._backward is None:
                continue
            t._backward()
        if loss.op == "leaf":
            leaf_grads[id(loss)] = (loss, np.ones_like(loss.data))
        for t in _TAPE:
            touched.append(t)
            for inp in t._inputs:
                if inp.op == "leaf" and inp.requires_grad and inp.grad is not None:
                    leaf_grads[id(inp)] = (inp, inp.grad)
                    touched.append(inp)
    else:
        warnings.warn("backward: loss does not require grad; returning zeros")
    for t in touched:
        t.grad = None
    loss.grad = None
    _TAPE.clear()

    by_tensor = {t: g for t, g in leaf_grads.values()}
    if params is None:
        return by_tensor
    named: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if p in by_tensor:
            named[name] = by_tensor[p]
        else:
            warnings.warn(f"backward: parameter {name!r} is detached from the loss; zero gradient")
            named[name] = np.zeros_like(p.data)
    return named


def tape_size() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam with bias correction. Moment buffers are keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, grads: dict[str, np.ndarray], params: dict[str, Tensor]) -> None:
    """One optimizer step over named parameters; updates in place.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise ValueError(f"adam_step: missing gradients for {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {p.data.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-3, rng: np.random.Generator | None = None,
               max_checks: int | None = None) -> float:
    """Compare reverse-mode gradients of scalar ``f(x)`` against central
    differences; returns the max relative error over checked elements.

    The relative-error denominator is floored at 1e-4. Elements where the
    half-step and full-step difference quotients disagree (a kink within h,
    e.g. a relu boundary) are skipped and reported via a warning.
    """
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    out = f(x)
    analytic = backward(out).get(x)
    if analytic is None:
        raise ValueError("grad_check: f(x) does not depend on x")

    idxs = list(np.ndindex(x.data.shape)) if x.data.ndim else [()]
    if max_checks is not None and len(idxs) > max_checks:
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(idxs), size=max_checks, replace=False)
        idxs = [idxs[i] for i in sorted(chosen)]

    def eval_at(idx, delta):
        orig = x.data[idx]
        x.data[idx] = orig + delta
        with no_grad():
            val = float(f(x).data)
        x.data[idx] = orig
        return val

    worst = 0.0
    skipped = 0
    for idx in idxs:
        d_full = (eval_at(idx, h) - eval_at(idx, -h)) / (2.0 * h)
        d_half = (eval_at(idx, h / 2) - eval_at(idx, -h / 2)) / h
        scale = max(abs(d_full), abs(d_half), 1e-4)
        if abs(d_full - d_half) > 1e-2 * scale:
            skipped += 1
            continue
        ga = float(analytic[idx])
        rel = abs(ga - d_half) / max(abs(ga), abs(d_half), 1e-4)
        worst = max(worst, rel)
    if skipped:
        warnings.warn(f"grad_check: skipped {skipped} element(s) near non-differentiable points")
    return worst
