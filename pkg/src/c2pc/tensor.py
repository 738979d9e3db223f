"""Minimal dense-tensor autodiff core.

Reverse-mode automatic differentiation over numpy arrays, with just the
primitives the point-cloud model needs: elementwise arithmetic, matmul
(optionally batched), reshape/transpose, reductions, row gather, softmax,
a valid-padding 1D convolution, layer norm and GELU.  Gradients accumulate
in fixed (insertion) order so single-threaded backward passes are
bit-reproducible.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Checked mode rejects non-finite values at construction time.  On by
# default; benchmarks switch it off.
_checked = True
_grad_enabled = True


def set_checked(flag: bool) -> None:
    global _checked
    _checked = bool(flag)


@contextlib.contextmanager
def unchecked():
    """Skip per-op finiteness checks inside the block (hot inference paths)."""
    global _checked
    prev = _checked
    _checked = False
    try:
        yield
    finally:
        _checked = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A dense float tensor with optional gradient tracking.

    Data is stored row-major as float64 (float32 permitted for inference
    storage; gradient checks require float64).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        if _checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN/Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = ()
        self._backward = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor.__new__(Tensor)
        arr = np.asarray(data)
        if _checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("op produced NaN/Inf")
        out.data = arr
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- autodiff driver -----------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            # reversed so parents are visited in insertion order
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g)

        return Tensor._from_op(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division only supported by python scalars")
        return self * (1.0 / scalar)

    # -- linear algebra --------------------------------------------------------

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul requires tensors of rank >= 2")
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accum(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accum(_unbroadcast(gb, other.data.shape))

        return Tensor._from_op(out_data, (self, other), backward)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)

        def backward(g):
            self._accum(g.transpose(inv))

        return Tensor._from_op(self.data.transpose(axes), (self,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape

        def backward(g):
            self._accum(g.reshape(orig))

        return Tensor._from_op(self.data.reshape(shape), (self,), backward)

    # -- reductions ------------------------------------------------------------

    def sum(self):
        def backward(g):
            self._accum(np.full_like(self.data, float(g)))

        return Tensor._from_op(np.asarray(self.data.sum()), (self,), backward)

    def mean(self):
        n = self.data.size

        def backward(g):
            self._accum(np.full_like(self.data, float(g) / n))

        return Tensor._from_op(np.asarray(self.data.mean()), (self,), backward)

    # -- indexing ----------------------------------------------------------------

    def gather_rows(self, indices):
        """Select rows by integer index (embedding lookup); axis 0."""
        idx = np.asarray(indices, dtype=np.intp)
        if np.any(idx < 0) or np.any(idx >= self.data.shape[0]):
            raise IndexError("gather index out of range")

        def backward(g):
            acc = np.zeros_like(self.data)
            np.add.at(acc, idx, g)
            self._accum(acc)

        return Tensor._from_op(self.data[idx], (self,), backward)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- nonlinear primitives ---------------------------------------------------


def softmax_last(t: Tensor) -> Tensor:
    """Numerically stabilized softmax along the last axis."""
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        t._accum(y * (g - dot))

    return Tensor._from_op(y, (t,), backward)


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax of a 2D tensor."""
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2D tensor, got shape {t.shape}")
    return softmax_last(t)


def conv1d_valid(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid-padding 1D cross-correlation.

    x: [T, C_in], kernel: [K, C_in, C_out], bias: [C_out]
    -> [T-K+1, C_out] with y[t,o] = bias[o] + sum_{k,c} x[t+k,c] * kernel[k,c,o]
    """
    if x.ndim != 2 or kernel.ndim != 3 or bias.ndim != 1:
        raise ShapeError("conv1d_valid: expected x[T,C], kernel[K,C,O], bias[O]")
    T, c_in = x.shape
    K, kc, c_out = kernel.shape
    if kc != c_in or bias.shape[0] != c_out:
        raise ShapeError("conv1d_valid: channel mismatch")
    if K > T:
        raise ShapeError(f"conv1d_valid: kernel length {K} exceeds input length {T}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=0)  # [T-K+1, C, K]
    y = np.einsum("tck,kco->to", windows, kernel.data) + bias.data

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            t_out = T - K + 1
            for k in range(K):
                gx[k : k + t_out] += g @ kernel.data[k].T
            x._accum(gx)
        if kernel.requires_grad:
            kernel._accum(np.einsum("tck,to->kco", windows, g))
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))

    return Tensor._from_op(y, (x, kernel, bias), backward)


def layer_norm(v: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along the last axis, then scale+shift."""
    E = v.shape[-1]
    if gamma.shape != (E,) or beta.shape != (E,):
        raise ShapeError("layer_norm: gamma/beta must match last axis")
    mu = v.data.mean(axis=-1, keepdims=True)
    var = v.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accum(g.sum(axis=lead))
        if v.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            v._accum(inv * (gy - m1 - xhat * m2))

    return Tensor._from_op(y, (v, gamma, beta), backward)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        t._accum(g * (cdf + x * pdf))

    return Tensor._from_op(y, (t,), backward)


# -- gradient checking --------------------------------------------------------


@dataclass
class GradReport:
    """Per-parameter max relative error between analytic and numeric gradients."""

    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    passed: bool = True
    aborted: str | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f, params: dict, eps: float = 1e-5, tolerance: float = 1e-4) -> GradReport:
    """Compare reverse-mode gradients of f() against central finite differences.

    f is a zero-argument callable returning a scalar Tensor; it must read the
    (float64) tensors in `params` so perturbations are visible. eps should be
    in [1e-6, 1e-4].
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must be within [1e-6, 1e-4]")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 params ({name})")
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data):
        return GradReport(passed=False, aborted=f"f() is non-finite: {float(out.data)}")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    report = GradReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradReport(passed=False, aborted=f"non-finite perturbation at {name}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            # denominator floor 1e-6: parameters whose true gradient is
            # exactly zero (e.g. attention key biases, which shift every
            # logit of a query uniformly) otherwise amplify the O(1e-11)
            # finite-difference rounding noise into spurious failures
            rel = abs(a[i] - num) / max(1e-6, abs(a[i]) + abs(num))
            worst = max(worst, rel)
        report.max_rel_error[name] = worst
    report.passed = report.worst < tolerance
    return report
