"""Minimal reverse-mode tape over numpy float64 arrays.

Only the primitives the forecasting model needs are provided.  Every op
accepts either plain arrays or :class:`Var` handles; with plain arrays it
is an ordinary numpy computation and nothing is recorded, which is the
fast path used for inference.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Var:
    """A value living on a tape."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", name: str | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, name={self.name!r})"


class Tape:
    """Ordered record of primitive applications.

    A tape is meant to be used for exactly one forward/backward pass;
    backward releases the recorded activations.
    """

    def __init__(self) -> None:
        self.records: list[tuple[str, Var, tuple, object]] = []
        self.watched: list[Var] = []

    def watch(self, value, name: str | None = None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self, name)
        self.watched.append(v)
        return v

    def record(self, rule: str, value: np.ndarray, inputs: tuple, ctx=None) -> Var:
        out = Var(value, self)
        self.records.append((rule, out, inputs, ctx))
        return out

    def backward(self, out: Var, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(watched) into ``.grad`` of every watched var."""
        if out.tape is not self:
            raise ValueError("output does not belong to this tape")
        if seed is None:
            if out.value.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
            seed = np.ones_like(out.value)
        grads: dict[int, np.ndarray] = {id(out): seed}
        for rule, node, inputs, ctx in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            in_grads = BACKWARD[rule](ctx, g, inputs)
            for x, gx in zip(inputs, in_grads):
                if gx is None or not isinstance(x, Var):
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
        for v in self.watched:
            g = grads.get(id(v))
            v.grad = np.zeros_like(v.value) if g is None else g
        # drop activations now; records and vars form reference cycles
        self.records.clear()


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(rule: str, value: np.ndarray, inputs: tuple, ctx=None):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(rule, value, inputs, ctx)


# -- primitives ---------------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return _emit("matmul", av @ bv, (a, b))


def _matmul_backward(ctx, g, inputs):
    a, b = inputs
    ga = g @ _val(b).T if isinstance(a, Var) else None
    gb = _val(a).T @ g if isinstance(b, Var) else None
    return ga, gb


def _time_windows(xv: np.ndarray, k: int) -> np.ndarray:
    # (nodes, time-k+1, k, cin), materialized so the product is one GEMM
    win = np.lib.stride_tricks.sliding_window_view(xv, k, axis=1)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2))


def conv1d_time(x, kernel, bias):
    """Valid temporal convolution, independently per node.

    x: (nodes, time, cin); kernel: (k, cin, cout); bias: (cout,).
    """
    xv, kv, bv = _val(x), _val(kernel), _val(bias)
    if xv.ndim != 3 or kv.ndim != 3 or bv.ndim != 1:
        raise ShapeError(f"conv1d_time: bad ranks x{xv.shape} kernel{kv.shape} bias{bv.shape}")
    nodes, time, cin = xv.shape
    k, kcin, cout = kv.shape
    if kcin != cin or bv.shape[0] != cout:
        raise ShapeError(f"conv1d_time: x{xv.shape} incompatible with kernel{kv.shape}, bias{bv.shape}")
    if k < 1 or time < k:
        raise ShapeError(f"conv1d_time: time length {time} shorter than kernel {k}")
    tout = time - k + 1
    cols = _time_windows(xv, k).reshape(nodes * tout, k * cin)
    out = (cols @ kv.reshape(k * cin, cout) + bv).reshape(nodes, tout, cout)
    return _emit("conv1d_time", out, (x, kernel, bias), (cols, xv.shape, kv.shape))


def _conv1d_time_backward(ctx, g, inputs):
    x, kernel, bias = inputs
    cols, (nodes, time, cin), (k, _, cout) = ctx
    tout = time - k + 1
    g2 = g.reshape(nodes * tout, cout)
    gk = (cols.T @ g2).reshape(k, cin, cout) if isinstance(kernel, Var) else None
    gb = g2.sum(axis=0) if isinstance(bias, Var) else None
    gx = None
    if isinstance(x, Var):
        kv = _val(kernel)
        gx = np.zeros((nodes, time, cin))
        for j in range(k):
            gx[:, j : j + tout, :] += (g2 @ kv[j].T).reshape(nodes, tout, cin)
    return gx, gk, gb


def relu(x):
    xv = _val(x)
    return _emit("relu", np.maximum(xv, 0.0), (x,), xv > 0)


def _relu_backward(mask, g, inputs):
    return (g * mask,)


def linear(x, w, b):
    xv, wv, bv = _val(x), _val(w), _val(b)
    if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1 or xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
        raise ShapeError(f"linear: x{xv.shape} w{wv.shape} b{bv.shape} do not agree")
    return _emit("linear", xv @ wv + bv, (x, w, b))


def _linear_backward(ctx, g, inputs):
    x, w, b = inputs
    gx = g @ _val(w).T if isinstance(x, Var) else None
    gw = _val(x).T @ g if isinstance(w, Var) else None
    gb = g.sum(axis=0) if isinstance(b, Var) else None
    return gx, gw, gb


def l2_loss(pred, target):
    """Mean squared difference over all elements."""
    pv, tv = _val(pred), _val(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"l2_loss: pred{pv.shape} vs target{tv.shape}")
    diff = pv - tv
    return _emit("l2_loss", np.asarray(np.mean(diff * diff)), (pred, target), diff)


def _l2_loss_backward(diff, g, inputs):
    pred, target = inputs
    d = (2.0 / diff.size) * g * diff
    return (d if isinstance(pred, Var) else None, -d if isinstance(target, Var) else None)


# -- structural helpers (no arithmetic of their own) -------------------------


def add(a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: {av.shape} vs {bv.shape}")
    return _emit("add", av + bv, (a, b))


def _add_backward(ctx, g, inputs):
    return g, g


def reshape(x, shape):
    xv = _val(x)
    try:
        out = xv.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {xv.shape} as {shape}") from exc
    return _emit("reshape", out, (x,), xv.shape)


def _reshape_backward(shape, g, inputs):
    return (g.reshape(shape),)


def transpose(x, axes):
    xv = _val(x)
    return _emit("transpose", np.ascontiguousarray(xv.transpose(axes)), (x,), axes)


def _transpose_backward(axes, g, inputs):
    return (g.transpose(np.argsort(axes)),)


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[v.shape for v in vals]} along axis {axis}") from exc
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit("concat", out, tuple(xs), (sizes, axis))


def _concat_backward(ctx, g, inputs):
    sizes, axis = ctx
    return tuple(np.split(g, sizes, axis=axis))


BACKWARD: dict[str, Callable] = {
    "matmul": _matmul_backward,
    "conv1d_time": _conv1d_time_backward,
    "relu": _relu_backward,
    "linear": _linear_backward,
    "l2_loss": _l2_loss_backward,
    "add": _add_backward,
    "reshape": _reshape_backward,
    "transpose": _transpose_backward,
    "concat": _concat_backward,
}


# -- gradient checking --------------------------------------------------------


def value_and_grad(f: Callable, params: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f(*vars)`` on a fresh tape and return its gradients."""
    tape = Tape()
    vs = [tape.watch(p) for p in params]
    out = f(*vs)
    if not isinstance(out, Var):
        # f ignored its inputs entirely
        return float(np.asarray(out)), [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    tape.backward(out)
    return float(out.value), [v.grad for v in vs]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Worst entrywise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(f: Callable[..., float], params: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a plain scalar function of arrays."""
    params = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*params))
            flat[i] = orig - eps
            fm = float(f(*params))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite evaluation while perturbing coordinate {i}")
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def check_gradients(f: Callable, params: Sequence[np.ndarray], eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps tape variables (or plain arrays) to a scalar.
    """
    value, analytic = value_and_grad(f, params)
    if not np.isfinite(value):
        raise NumericError("function is not finite at the given parameters")

    def plain(*arrays):
        return np.asarray(_val(f(*arrays)))

    numeric = numeric_grad(plain, params, eps)
    return max((relative_error(a, n, floor) for a, n in zip(analytic, numeric)), default=0.0)
