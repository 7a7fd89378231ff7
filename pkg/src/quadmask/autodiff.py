"""Dense-tensor numerical core with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default) and record a define-by-run
graph: every tracked operation stores its parents and a closure that routes
the upstream gradient to them. `backward` walks the recorded order once, in
reverse. The op set is exactly what the refinement model needs: matmul and
elementwise arithmetic, softmax over rows, reductions, concatenation and
gathering, layer norm, a small conv2d, bilinear grid sampling, and the two
losses (mean BCE, and L1 composed from abs + mean).

Broadcasting is deliberately limited to scalar-tensor and matrix-plus-row
cases; everything else must match shapes exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_op_counter = 0


def _next_op_id(op: str) -> str:
    global _op_counter
    _op_counter += 1
    return f"{op}#{_op_counter}"


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """N-d array with optional gradient tracking.

    `grad` is populated by `backward` for every tensor that participated in
    the graph with requires_grad=True; it accumulates additively across
    backward calls until reset (which is what batch accumulation relies on).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, _op="leaf"):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = _op
        _check_finite(arr, f"{_op}{'' if name is None else ' ' + name}")

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self.op}{tag})"

    # Arithmetic sugar; scalars mean python numbers, not 0-d tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; divide by a scalar")
        return mul_scalar(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=requires_grad, name=name)


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward_fn, op) -> Tensor:
    """Wrap an op output; record the node only when some input is tracked."""
    if _tracked(*parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, _op=_next_op_id(op))
    return Tensor(data, _op=op)


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, float(b))
    if a.data.shape == b.data.shape:
        out = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(g)

        return _result(out, (a, b), bwd, "add")
    # matrix + row bias
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        out = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(g.sum(axis=0))

        return _result(out, (a, b), bwd, "add_row")
    if b.data.shape == ():
        out = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(np.asarray(g.sum(), dtype=b.data.dtype))

        return _result(out, (a, b), bwd, "add_bcast")
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def bwd(g):
        a.accumulate_grad(g)

    return _result(out, (a,), bwd, "add_scalar")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.shape == () and ga.shape != ():
            ga = np.asarray(ga.sum(), dtype=a.data.dtype)
        if b.data.shape == () and gb.shape != ():
            gb = np.asarray(gb.sum(), dtype=b.data.dtype)
        a.accumulate_grad(ga)
        b.accumulate_grad(gb)

    return _result(out, (a, b), bwd, "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def bwd(g):
        a.accumulate_grad(g * c)

    return _result(out, (a,), bwd, "mul_scalar")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0))

    return _result(out, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return _result(out, (a,), bwd, "sigmoid")


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bwd(g):
        a.accumulate_grad(g * np.sign(a.data))

    return _result(out, (a,), bwd, "abs")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        a.accumulate_grad(g @ b.data.T)
        b.accumulate_grad(a.data.T @ g)

    return _result(out, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d operand, got {a.data.shape}")
    out = a.data.T.copy()

    def bwd(g):
        a.accumulate_grad(g.T)

    return _result(out, (a,), bwd, "transpose")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-d operand, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        a.accumulate_grad(out * (g - dot))

    return _result(out, (a,), bwd, "softmax_rows")


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row mean/variance normalization with learned scale and shift."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows: expected 2-d input, got {x.data.shape}")
    n = x.data.shape[1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(f"layer_norm_rows: scale/shift must have shape ({n},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        beta.accumulate_grad(g.sum(axis=0))
        gamma.accumulate_grad((g * xhat).sum(axis=0))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _result(out, (x, gamma, beta), bwd, "layer_norm_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g))

    return _result(out, (a,), bwd, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g / n))

    return _result(out, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _result(out, (a,), bwd, "reshape")


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows: empty list")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.accumulate_grad(g[lo:hi])

    return _result(out, tuple(parts), bwd, "concat_rows")


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat_cols: empty list")
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.accumulate_grad(g[:, lo:hi])

    return _result(out, tuple(parts), bwd, "concat_cols")


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= lo < hi <= a.data.shape[1]):
        raise ShapeError(f"slice_cols: bad bounds [{lo}:{hi}] for shape {a.data.shape}")
    out = a.data[:, lo:hi].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        a.accumulate_grad(full)

    return _result(out, (a,), bwd, "slice_cols")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows a[idx]; the gradient scatter-adds duplicates."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-d operand, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {a.data.shape[0]} rows")
    out = a.data[idx]

    def bwd(g):
        acc = np.empty_like(a.data)
        for c in range(a.data.shape[1]):
            acc[:, c] = np.bincount(idx, weights=g[:, c], minlength=a.data.shape[0])
        a.accumulate_grad(acc)

    return _result(out, (a,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# structured ops: convolution, bilinear sampling
# ---------------------------------------------------------------------------

_conv_index_cache: dict = {}


def _conv_indices(h, w, k, stride, pad):
    key = (h, w, k, stride, pad)
    cached = _conv_index_cache.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    ys = stride * np.arange(ho)[:, None] + np.arange(k)[None, :]        # [ho, k]
    xs = stride * np.arange(wo)[:, None] + np.arange(k)[None, :]        # [wo, k]
    idx = (ys[:, None, :, None] * wp + xs[None, :, None, :]).reshape(ho * wo, k * k)
    _conv_index_cache[key] = (idx, ho, wo, hp, wp)
    return _conv_index_cache[key]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution on a single [H, W, Cin] image; weights [k, k, Cin, Cout]."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [H,W,Cin] and [k,k,Cin,Cout], got {x.data.shape}, {w.data.shape}")
    h, wd, cin = x.data.shape
    k, k2, cin_w, cout = w.data.shape
    if k != k2 or cin != cin_w or b.data.shape != (cout,):
        raise ShapeError(f"conv2d: weight/bias shapes {w.data.shape}, {b.data.shape} do not fit input {x.data.shape}")
    idx, ho, wo, hp, wp = _conv_indices(h, wd, k, stride, pad)
    if pad:
        xp = np.zeros((hp, wp, cin), dtype=x.data.dtype)
        xp[pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    cols = xp.reshape(hp * wp, cin)[idx].reshape(ho * wo, k * k * cin)
    wf = w.data.reshape(k * k * cin, cout)
    out = (cols @ wf + b.data).reshape(ho, wo, cout)

    def bwd(g):
        gf = g.reshape(ho * wo, cout)
        b.accumulate_grad(gf.sum(axis=0))
        w.accumulate_grad((cols.T @ gf).reshape(w.data.shape))
        dcols = (gf @ wf.T).reshape(ho * wo * k * k, cin)
        flat_idx = idx.reshape(-1)
        dxp = np.empty((hp * wp, cin), dtype=x.data.dtype)
        for c in range(cin):
            dxp[:, c] = np.bincount(flat_idx, weights=dcols[:, c], minlength=hp * wp)
        dxp = dxp.reshape(hp, wp, cin)
        x.accumulate_grad(dxp[pad:pad + h, pad:pad + wd] if pad else dxp)

    return _result(out, (x, w, b), bwd, "conv2d")


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of an [H, W, C] map."""
    if a.data.ndim != 3:
        raise ShapeError(f"upsample2x: expected [H,W,C], got {a.data.shape}")
    out = a.data.repeat(2, axis=0).repeat(2, axis=1)

    def bwd(g):
        h, w, c = a.data.shape
        a.accumulate_grad(g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return _result(out, (a,), bwd, "upsample2x")


def bilinear_sample(grid: Tensor, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Sample an [H, W, C] grid at continuous points, returning [K, C].

    Coordinates live in the unit-per-cell convention where cell (i, j) is
    centered at (i + 0.5, j + 0.5); out-of-range points clamp to the border.
    Differentiable in the grid values only (points are plain arrays).
    """
    if grid.data.ndim != 3:
        raise ShapeError(f"bilinear_sample: expected [H,W,C] grid, got {grid.data.shape}")
    h, w, c = grid.data.shape
    py = np.clip(np.asarray(ys, dtype=np.float64) - 0.5, 0.0, h - 1.0)
    px = np.clip(np.asarray(xs, dtype=np.float64) - 0.5, 0.0, w - 1.0)
    i0 = np.clip(np.floor(py).astype(np.intp), 0, max(h - 2, 0))
    j0 = np.clip(np.floor(px).astype(np.intp), 0, max(w - 2, 0))
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fy = (py - i0).astype(grid.data.dtype)
    fx = (px - j0).astype(grid.data.dtype)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    flat = grid.data.reshape(h * w, c)
    k00, k01, k10, k11 = i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1
    out = (w00[:, None] * flat[k00] + w01[:, None] * flat[k01]
           + w10[:, None] * flat[k10] + w11[:, None] * flat[k11])

    def bwd(g):
        idx = np.concatenate([k00, k01, k10, k11])
        wts = np.concatenate([w00, w01, w10, w11])
        contrib = np.tile(g, (4, 1)) * wts[:, None]
        acc = np.empty((h * w, c), dtype=grid.data.dtype)
        for ch in range(c):
            acc[:, ch] = np.bincount(idx, weights=contrib[:, ch], minlength=h * w)
        grid.accumulate_grad(acc.reshape(grid.data.shape))

    return _result(out, (grid,), bwd, "bilinear_sample")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

BCE_CLAMP = 1e-7


def bce_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ShapeError(f"bce_mean: target shape {t.shape} != prediction shape {pred.data.shape}")
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    out = np.asarray(-(t * np.log(p) + (1 - t) * np.log1p(-p)).sum() / n, dtype=pred.data.dtype)

    def bwd(g):
        inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)
        dp = (-t / p + (1 - t) / (1 - p)) / n * inside
        pred.accumulate_grad(g * dp)

    return _result(out, (pred,), bwd, "bce_mean")


def l1_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute difference against a constant target."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ShapeError(f"l1_mean: target shape {t.shape} != prediction shape {pred.data.shape}")
    return mean(absolute(add(pred, Tensor(-t))))


# ---------------------------------------------------------------------------
# graph walking
# ---------------------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered record of the tracked ops behind one output."""

    def __init__(self, order):
        self.order = order

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order = []
        visited = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> dict:
    """Propagate d(loss)/d(tensor) through the graph behind `loss`.

    Populates `.grad` on every participating tensor with requires_grad=True
    (accumulating over fan-out and over repeated calls) and returns the
    gradients of named leaf tensors as {name: Tensor}.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if graph is None:
        graph = ComputeGraph.from_output(loss)
    loss.accumulate_grad(np.asarray(1.0, dtype=loss.data.dtype))
    named = {}
    for node in reversed(graph.order):
        if node.grad is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NumericError(f"non-finite gradient at node {node.op}")
        if node._backward is not None:
            node._backward(node.grad)
        elif node.requires_grad and node.name is not None:
            named[node.name] = Tensor(node.grad.copy())
    return named


def gradcheck(fn, params, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must be a deterministic closure over `params` returning a scalar
    Tensor. Both the analytic pass and the difference quotients run with the
    parameters upcast to float64 so the comparison isolates gradient-rule
    errors from float32 rounding. Error metric per entry:
    |analytic - (f(x+eps) - f(x-eps)) / 2 eps| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ContractError("gradcheck: eps must be positive")
    params = list(params)
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        base1 = fn().data.copy()
        base2 = fn().data.copy()
        if not np.array_equal(base1, base2):
            raise ContractError("gradcheck: fn is not deterministic (re-evaluation mismatch)")
        for p in params:
            p.grad = None
        backward(fn())
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        max_err = 0.0
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                fp = float(fn().data)
                flat[i] = saved - eps
                fm = float(fn().data)
                flat[i] = saved
                fd = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
                if err > max_err:
                    max_err = err
        return max_err
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
