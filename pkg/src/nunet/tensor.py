"""Dense float64 tensors with reverse-mode automatic differentiation.

Every real-valued quantity in the network is a :class:`Tensor` wrapping a
C-contiguous float64 numpy array. Operations record their parents and a
backward closure; ``backward()`` on a scalar output walks the graph in
reverse topological order and accumulates ``.grad`` on every participating
tensor that has ``requires_grad`` set.

The kernel is deliberately small: elementwise arithmetic with numpy
broadcasting, batched matmul, shape movement (reshape/transpose/roll/
concat), reductions, the handful of nonlinearities the model needs, 2-d
convolution/pooling/nearest resize for the decoder, and a finite-difference
gradient checker that is independent of the reverse-mode path it verifies.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# When True (see no_grad()), new tensors record no graph edges.
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording for cheap inference."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node of the computation graph holding a float64 numpy array."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------
    # basics
    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value cut off from the graph."""
        return Tensor(self.data.copy())

    def assert_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {name}")
        return self

    # ------------------------------------------------------------------
    # graph plumbing
    # ------------------------------------------------------------------
    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None) -> None:
        """Reverse-mode pass; seeds with 1 for scalar outputs."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor outside the gradient graph")

        # Iterative postorder: graphs are deep enough to blow the recursion limit.
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        seed = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        self.grad = seed.copy() if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is None:
                continue
            gs = node._backward(node.grad)
            for p, g in zip(node._parents, gs):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    # copy: g may be a view into the child's buffer
                    p.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    p.grad += g

    # ------------------------------------------------------------------
    # elementwise arithmetic (numpy broadcasting rules)
    # ------------------------------------------------------------------
    def __add__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))

    def __mul__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.data.shape),
                       _unbroadcast(g * a.data, b.data.shape)))

    def __sub__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __truediv__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._node(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.data.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __radd__(self, other):
        return as_tensor(other) + self

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __rmul__(self, other):
        return as_tensor(other) * self

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        x = self
        return Tensor._node(
            x.data ** e, (x,), lambda g: (g * e * x.data ** (e - 1.0),))

    # ------------------------------------------------------------------
    # matmul and shape movement
    # ------------------------------------------------------------------
    def matmul(self, other) -> "Tensor":
        """Batched matrix product; batch dims broadcast like numpy."""
        a, b = self, as_tensor(other)
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs tensors of rank >= 2")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeError(f"matmul inner dims {a.data.shape} x {b.data.shape}")

        def back(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
            return ga, gb

        return Tensor._node(np.matmul(a.data, b.data), (a, b), back)

    def __matmul__(self, other):
        return self.matmul(other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        old = x.data.shape
        return Tensor._node(
            np.ascontiguousarray(x.data.reshape(shape)), (x,),
            lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        x = self
        inv = tuple(np.argsort(axes))
        return Tensor._node(
            np.ascontiguousarray(x.data.transpose(axes)), (x,),
            lambda g: (g.transpose(inv),))

    def roll(self, shifts, axes) -> "Tensor":
        x = self
        neg = tuple(-s for s in shifts) if isinstance(shifts, (tuple, list)) else -shifts
        return Tensor._node(
            np.roll(x.data, shifts, axis=axes), (x,),
            lambda g: (np.roll(g, neg, axis=axes),))

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self

        def back(g):
            if axis is None:
                return (np.broadcast_to(g.reshape((1,) * x.ndim), x.data.shape).copy(),)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk, x.data.shape).copy(),)

        return Tensor._node(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        count = x.data.size if axis is None else np.prod(
            [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        inv = 1.0 / float(count)

        def back(g):
            if axis is None:
                return (np.broadcast_to(g.reshape((1,) * x.ndim), x.data.shape) * inv,)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk, x.data.shape) * inv,)

        return Tensor._node(x.data.mean(axis=axis, keepdims=keepdims), (x,), back)

    # ------------------------------------------------------------------
    # nonlinearities
    # ------------------------------------------------------------------
    def abs(self) -> "Tensor":
        x = self
        # subgradient at 0 is 0 (np.sign(0) == 0)
        return Tensor._node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))

    def exp(self) -> "Tensor":
        x = self
        out = np.exp(x.data)
        return Tensor._node(out, (x,), lambda g: (g * out,))

    def sqrt(self) -> "Tensor":
        x = self
        out = np.sqrt(x.data)
        return Tensor._node(out, (x,), lambda g: (g * 0.5 / out,))

    def relu(self) -> "Tensor":
        x = self
        return Tensor._node(
            np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0.0),))

    def gelu(self) -> "Tensor":
        """Exact (erf-based) GELU."""
        x = self
        cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return Tensor._node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))

    def softmax(self) -> "Tensor":
        """Numerically stabilized softmax over the last axis."""
        x = self
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        return Tensor._node(y, (x,), back)

    # ------------------------------------------------------------------
    # 2-d image ops (H, W, C layout)
    # ------------------------------------------------------------------
    def conv2d(self, weight: "Tensor", bias: "Tensor") -> "Tensor":
        """Same-padded stride-1 convolution; weight is (kh, kw, Cin, Cout)."""
        x, w, b = self, weight, bias
        if x.ndim != 3 or w.ndim != 4:
            raise ShapeError("conv2d expects x (H,W,C) and weight (kh,kw,Cin,Cout)")
        kh, kw, cin, cout = w.data.shape
        if x.data.shape[-1] != cin:
            raise ShapeError(f"conv2d channels: input {x.data.shape[-1]} vs weight {cin}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d kernel dims must be odd for same padding")
        h, wid = x.data.shape[:2]
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
        # im2col once; reused by the backward closure
        cols = np.empty((h * wid, kh * kw * cin))
        for i in range(kh):
            for j in range(kw):
                tap = (i * kw + j) * cin
                cols[:, tap:tap + cin] = xp[i:i + h, j:j + wid, :].reshape(h * wid, cin)
        wflat = w.data.reshape(kh * kw * cin, cout)
        out = (cols @ wflat + b.data).reshape(h, wid, cout)

        def back(g):
            g2 = g.reshape(h * wid, cout)
            gw = (cols.T @ g2).reshape(w.data.shape)
            gcols = g2 @ wflat.T
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    tap = (i * kw + j) * cin
                    gxp[i:i + h, j:j + wid, :] += gcols[:, tap:tap + cin].reshape(h, wid, cin)
            gx = gxp[ph:ph + h, pw:pw + wid, :]
            return gx, gw, g.sum(axis=(0, 1))

        return Tensor._node(out, (x, w, b), back)

    def avg_pool2d(self, k: int = 2) -> "Tensor":
        """Non-overlapping k x k mean pooling; trailing remainder rows/cols dropped."""
        x = self
        h, w, c = x.data.shape
        if h < k or w < k:
            raise ShapeError(f"avg_pool2d: grid {h}x{w} smaller than kernel {k}")
        h2, w2 = h // k, w // k
        trimmed = x.data[:h2 * k, :w2 * k, :]
        out = trimmed.reshape(h2, k, w2, k, c).mean(axis=(1, 3))

        def back(g):
            gx = np.zeros_like(x.data)
            gx[:h2 * k, :w2 * k, :] = np.repeat(
                np.repeat(g, k, axis=0), k, axis=1) / (k * k)
            return (gx,)

        return Tensor._node(out, (x,), back)

    def resize_nearest(self, out_h: int, out_w: int) -> "Tensor":
        """Nearest-neighbor spatial resize of an (H, W, C) tensor."""
        x = self
        h, w, _ = x.data.shape
        rows = (np.arange(out_h) * h) // out_h
        cols = (np.arange(out_w) * w) // out_w
        ridx, cidx = rows[:, None], cols[None, :]

        def back(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (ridx, cidx), g)
            return (gx,)

        return Tensor._node(x.data[ridx, cidx], (x,), back)


# ----------------------------------------------------------------------
# free functions
# ----------------------------------------------------------------------
def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along an axis; the differentiable inverse is a split."""
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def stack_rows(tensors) -> Tensor:
    """Stack rank-1 tensors of equal length into a (n, k) tensor."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (1/C variance), then affine."""
    if x.data.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gxh = g * gamma.data
        m1 = gxh.mean(axis=-1, keepdims=True)
        m2 = (gxh * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxh - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._node(out, (x, gamma, beta), back)


def assert_all_finite(named_tensors) -> None:
    """Raise NonFiniteError naming the first offending tensor."""
    for name, t in named_tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite values in {name}")


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------
def grad_check(f, params, eps: float = 1e-5, max_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    ``f`` rebuilds and returns the scalar objective from the current values
    of ``params``. Every element of every param is perturbed by +/- eps
    unless ``max_per_param`` caps the per-tensor probe count (sampled
    deterministically from ``rng``).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"grad_check eps {eps} outside [1e-7, 1e-3]")
    out = f()
    if out.data.size != 1:
        raise ContractError("grad_check objective must be scalar")
    for p in params:
        p.grad = None
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        if max_per_param is not None and flat.size > max_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
        else:
            picks = range(flat.size)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data.reshape(()))
            flat[i] = orig - eps
            f_minus = float(f().data.reshape(()))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-5)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
