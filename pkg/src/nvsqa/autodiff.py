"""Dense-tensor arithmetic with reverse-mode differentiation.

Small by design: float32 storage, float64 accumulation in reductions, and a
tape of parent links that backward() walks once in reverse topological order.
Covers exactly the operations the quality networks need (matmul, 1-D/3-D
convolution, pooling, elementwise nonlinearities) plus a central
finite-difference gradient checker.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

DTYPE = np.float32
ACC = np.float64  # accumulation dtype for reductions / matmul


class Tensor:
    """A dense float32 array plus the tape hooks for reverse-mode autodiff.

    Tensors are immutable once created; ops return fresh tensors that record
    op kind and parent links. All forward results must be finite.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in result of op '{op}'")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(DTYPE, copy=False)

    def backward(self):
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                topo.append(node)
                continue
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data, op, parents):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=[p for p in parents if p.requires_grad])


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data, "add", (a, b))

    def backward(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data, "mul", (a, b))

    def backward(g):
        if a.requires_grad:
            a._accum_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum_grad(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    """2-D matrix product, accumulated in float64."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = _make(
        (a.data.astype(ACC) @ b.data.astype(ACC)).astype(DTYPE), "matmul", (a, b)
    )

    def backward(g):
        g64 = g.astype(ACC)
        if a.requires_grad:
            a._accum_grad((g64 @ b.data.astype(ACC).T).astype(DTYPE))
        if b.requires_grad:
            b._accum_grad((a.data.astype(ACC).T @ g64).astype(DTYPE))

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = _make(np.maximum(x.data, 0), "relu", (x,))

    def backward(g):
        if x.requires_grad:
            x._accum_grad(g * (x.data > 0))

    out._backward = backward
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data.astype(ACC)).astype(DTYPE)
    out = _make(s, "sigmoid", (x,))

    def backward(g):
        if x.requires_grad:
            x._accum_grad(g * s * (1.0 - s))

    out._backward = backward
    return out


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data.astype(ACC)).astype(DTYPE)
    out = _make(x.data * s, "silu", (x,))

    def backward(g):
        if x.requires_grad:
            x._accum_grad(g * s * (1.0 + x.data * (1.0 - s)))

    out._backward = backward
    return out


_NONLINEARITIES = {"relu": relu, "sigmoid": sigmoid, "silu": silu}


def pointwise_nonlinearity(x, kind: str) -> Tensor:
    """Elementwise nonlinearity, kind in {relu, sigmoid, silu}."""
    try:
        return _NONLINEARITIES[kind](x)
    except KeyError:
        raise ValueError(f"unknown nonlinearity {kind!r}") from None


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = _make(x.data.reshape(shape), "reshape", (x,))

    def backward(g):
        if x.requires_grad:
            x._accum_grad(g.reshape(x.data.shape))

    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                t._accum_grad(g[tuple(idx)])
            offset += n

    out._backward = backward
    return out


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=ACC).astype(DTYPE)
    out = _make(data, "sum", (x,))

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accum_grad(np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum_grad(np.broadcast_to(gg, x.data.shape).copy())

    out._backward = backward
    return out


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(x, axis) -> Tensor:
    """Maximum along one axis; gradient routes to the first argmax."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = _make(np.max(x.data, axis=axis), "amax", (x,))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        grid = np.indices(idx.shape)
        full = list(grid)
        full.insert(axis % x.data.ndim, idx)
        np.add.at(gx, tuple(full), g)
        x._accum_grad(gx)

    out._backward = backward
    return out


def max_pool_global(x) -> Tensor:
    """Per-channel maximum of a C x L tensor; ties go to the first index."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("max_pool_global expects a C x L tensor")
    if x.data.shape[1] < 1:
        raise ValueError("max_pool_global requires L >= 1")
    return amax(x, axis=1)


def max_pool1d(x, window=2, stride=None) -> Tensor:
    """Tumbling max pool along the last axis of a C x L tensor (ceil mode).

    The final window may be shorter than `window`, so L' = ceil(L / window);
    an L = 1 input degrades to the identity.
    """
    x = _as_tensor(x)
    if stride is not None and stride != window:
        raise ValueError("only stride == window pooling is supported")
    c, length = x.data.shape
    lout = -(-length // window)
    padded = np.full((c, lout * window), -np.inf, dtype=DTYPE)
    padded[:, :length] = x.data
    windows = padded.reshape(c, lout, window)
    idx = np.argmax(windows, axis=2)  # first max within each window
    out = _make(np.max(windows, axis=2), "max_pool1d", (x,))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        rows = np.repeat(np.arange(c), lout)
        cols = (np.arange(lout)[None, :] * window + idx).ravel()
        np.add.at(gx, (rows, cols), g.ravel())
        x._accum_grad(gx)

    out._backward = backward
    return out


def _pair(v, n):
    if np.isscalar(v):
        return (int(v),) * n
    v = tuple(int(t) for t in v)
    if len(v) != n:
        raise ValueError(f"expected {n} stride/padding entries, got {len(v)}")
    return v


def conv1d(x, w, stride=1, padding=0) -> Tensor:
    """Correlation of a C_in x L input with a C_out x C_in x K kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError("conv1d expects x of shape (C_in, L), w of shape (C_out, C_in, K)")
    cin, length = x.data.shape
    cout, cin_w, k = w.data.shape
    if cin_w != cin:
        raise ValueError(f"conv1d channel mismatch: input {cin}, kernel {cin_w}")
    (s,), (p,) = _pair(stride, 1), _pair(padding, 1)
    if k > length + 2 * p:
        raise ValueError(f"kernel size {k} exceeds padded input length {length + 2 * p}")
    xp = np.pad(x.data, ((0, 0), (p, p))).astype(ACC)
    lout = (length + 2 * p - k) // s + 1
    w64 = w.data.astype(ACC)
    acc = np.zeros((cout, lout), dtype=ACC)
    for kk in range(k):
        seg = xp[:, kk : kk + (lout - 1) * s + 1 : s]
        acc += w64[:, :, kk] @ seg
    out = _make(acc.astype(DTYPE), "conv1d", (x, w))

    def backward(g):
        g64 = g.astype(ACC)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                gxp[:, kk : kk + (lout - 1) * s + 1 : s] += w64[:, :, kk].T @ g64
            gx = gxp[:, p : p + length] if p else gxp
            x._accum_grad(gx.astype(DTYPE))
        if w.requires_grad:
            gw = np.zeros_like(w64)
            for kk in range(k):
                seg = xp[:, kk : kk + (lout - 1) * s + 1 : s]
                gw[:, :, kk] = g64 @ seg.T
            w._accum_grad(gw.astype(DTYPE))

    out._backward = backward
    return out


def depthwise_conv1d(x, w, stride=1, padding=0) -> Tensor:
    """Per-channel correlation: x is C x L, w is C x K."""
    x, w = _as_tensor(x), _as_tensor(w)
    c, length = x.data.shape
    c_w, k = w.data.shape
    if c_w != c:
        raise ValueError(f"depthwise channel mismatch: input {c}, kernel {c_w}")
    (s,), (p,) = _pair(stride, 1), _pair(padding, 1)
    if k > length + 2 * p:
        raise ValueError(f"kernel size {k} exceeds padded input length {length + 2 * p}")
    xp = np.pad(x.data, ((0, 0), (p, p))).astype(ACC)
    lout = (length + 2 * p - k) // s + 1
    w64 = w.data.astype(ACC)
    acc = np.zeros((c, lout), dtype=ACC)
    for kk in range(k):
        acc += w64[:, kk : kk + 1] * xp[:, kk : kk + (lout - 1) * s + 1 : s]
    out = _make(acc.astype(DTYPE), "depthwise_conv1d", (x, w))

    def backward(g):
        g64 = g.astype(ACC)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                gxp[:, kk : kk + (lout - 1) * s + 1 : s] += w64[:, kk : kk + 1] * g64
            gx = gxp[:, p : p + length] if p else gxp
            x._accum_grad(gx.astype(DTYPE))
        if w.requires_grad:
            gw = np.zeros_like(w64)
            for kk in range(k):
                seg = xp[:, kk : kk + (lout - 1) * s + 1 : s]
                gw[:, kk] = (g64 * seg).sum(axis=1)
            w._accum_grad(gw.astype(DTYPE))

    out._backward = backward
    return out


def conv3d(x, w, stride=1, padding=0) -> Tensor:
    """3-D correlation over (depth, height, width).

    x is (C_in, D, H, W) or batched (N, C_in, D, H, W); w is
    (C_out, C_in, K_d, K_h, K_w). Stride and padding may be scalar or
    per-axis triples.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    batched = x.data.ndim == 5
    xd = x.data if batched else x.data[None]
    if xd.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv3d expects a 4-D or 5-D input and a 5-D kernel")
    n, cin, d, h, wd = xd.shape
    cout, cin_w, kd, kh, kw = w.data.shape
    if cin_w != cin:
        raise ValueError(f"conv3d channel mismatch: input {cin}, kernel {cin_w}")
    sd, sh, sw = _pair(stride, 3)
    pd, ph, pw = _pair(padding, 3)
    if kd > d + 2 * pd or kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ValueError("kernel exceeds padded input extents")
    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))).astype(ACC)
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    w64 = w.data.astype(ACC)
    # zero-copy tap windows: (n, cin, do, ho, wo, kd, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[
        :, :, ::sd, ::sh, ::sw
    ]
    data = np.einsum("ncdhwijk,ocijk->nodhw", windows, w64, optimize=True).astype(DTYPE)
    out = _make(data if batched else data[0], "conv3d", (x, w))

    def backward(g):
        g5 = (g if batched else g[None]).astype(ACC)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            gcols = np.einsum("nodhw,ocijk->ncijkdhw", g5, w64, optimize=True)
            for kk in range(kd):
                for kj in range(kh):
                    for ki in range(kw):
                        gxp[
                            :,
                            :,
                            kk : kk + (do - 1) * sd + 1 : sd,
                            kj : kj + (ho - 1) * sh + 1 : sh,
                            ki : ki + (wo - 1) * sw + 1 : sw,
                        ] += gcols[:, :, kk, kj, ki]
            gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wd]
            x._accum_grad(gx.astype(DTYPE) if batched else gx[0].astype(DTYPE))
        if w.requires_grad:
            gw = np.einsum("ncdhwijk,nodhw->ocijk", windows, g5, optimize=True)
            w._accum_grad(gw.astype(DTYPE))

    out._backward = backward
    return out


def grad_check_params(f, params, eps: float = 1e-3, max_coords=None, seed: int = 0) -> float:
    """Central-difference check of a scalar closure against its parameters.

    f takes no arguments and rebuilds the forward graph from the current
    parameter data on every call; each parameter tensor is perturbed in
    place. `max_coords` caps the coordinates sampled per tensor (seeded),
    which keeps composed-model sweeps tractable. Returns the max relative
    error |analytic - numeric| / max(1, |analytic|).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    f().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = (
            np.zeros_like(p.data, dtype=ACC) if p.grad is None else p.grad.astype(ACC)
        )
        flat = p.data.ravel()
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = sorted(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            fp = float(f().data)
            flat[i] = orig - eps
            lo = float(flat[i])
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (hi - lo)
            a = analytic.ravel()[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map a Tensor to a scalar Tensor. The error at each coordinate is
    |analytic - numeric| / max(1, |analytic|); the divisor for the numeric
    difference uses the actually-realized float32 perturbation, which keeps
    the check sharp despite 32-bit storage.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued map")
    out.backward()
    analytic = (
        np.zeros_like(probe.data, dtype=ACC)
        if probe.grad is None
        else probe.grad.astype(ACC)
    )
    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        h = (float(plus[i]) - float(minus[i])) / 2.0
        fp = float(f(Tensor(plus.reshape(x.data.shape))).data)
        fm = float(f(Tensor(minus.reshape(x.data.shape))).data)
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
