"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` records primitive operations while they execute
(define-by-run); :func:`backward` replays the tape in reverse and
accumulates gradients into the leaf tensors that asked for them.  With no
graph active, every primitive evaluates eagerly and records nothing, which
is the cheap path used for inference.

Everything is 64-bit and shapes are explicit.  The only implicit alignment
anywhere is the scalar in ``scale``/``shift`` and the row bias inside
``affine``; all other operands must match exactly.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RuntimeError):
    """A non-finite value showed up where the pipeline requires finiteness."""


def _f64(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


class Tensor:
    """Dense float64 value, optionally carrying a gradient slot.

    `data` is a C-contiguous ndarray; `grad` stays None until a backward
    pass deposits something.  Tensors are created either as leaves (inputs,
    parameters) or as op outputs; both look the same from the outside.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = _f64(data)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass
class _OpRecord:
    name: str
    inputs: tuple
    output: Tensor
    backward: callable  # grad_out -> tuple of grads aligned with inputs


class Graph:
    """Tape of recorded primitive ops, in execution order.

    Use as a context manager; primitives executed inside record themselves
    when any input requires a gradient.  One forward/backward per graph at
    a time (single-writer); independent graphs are independent.
    """

    def __init__(self, check_finite: bool = False):
        self.ops: list[_OpRecord] = []
        self.check_finite = check_finite

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def _record(self, name, inputs, output, backward_fn):
        if self.check_finite and not np.all(np.isfinite(output.data)):
            raise NumericError(f"non-finite output of op '{name}' (#{len(self.ops)})")
        self.ops.append(_OpRecord(name, inputs, output, backward_fn))


_GRAPH_STACK: list = []


def _active_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _emit(name, inputs, out_data, make_backward):
    """Create the output tensor and record the op if a graph wants it."""
    needs = tuple(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=any(needs))
    g = _active_graph()
    if g is not None and out.requires_grad:
        g._record(name, inputs, out, make_backward(needs))
    return out


def backward(graph: Graph, loss: Tensor, params=None):
    """Reverse-accumulate d(loss)/d(leaf) into each leaf's .grad.

    `loss` must be a scalar produced on `graph`.  Gradients add into
    existing .grad buffers so callers can accumulate across graphs.  When
    `params` is given, any of them left untouched by the tape gets an
    exactly-zero gradient.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not math.isfinite(loss.item()):
        raise NumericError("loss is non-finite")

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(op.output) for op in graph.ops}

    for idx in range(len(graph.ops) - 1, -1, -1):
        op = graph.ops[idx]
        gout = flowing.pop(id(op.output), None)
        holders.pop(id(op.output), None)
        if gout is None:
            continue  # output never reached the loss
        grads = op.backward(gout)
        for tin, gin in zip(op.inputs, grads):
            if gin is None or not tin.requires_grad:
                continue
            if graph.check_finite and not np.all(np.isfinite(gin)):
                raise NumericError(f"non-finite gradient from op '{op.name}' (#{idx})")
            key = id(tin)
            if key in flowing:
                flowing[key] = flowing[key] + gin
            else:
                flowing[key] = gin
                holders[key] = tin

    for key, grad in flowing.items():
        t = holders[key]
        if t.grad is None:
            t.grad = grad.copy()
        else:
            t.grad = t.grad + grad
    if params is not None:
        ensure_grads(params)


def ensure_grads(params):
    """Give exactly-zero gradients to parameters the tape never touched."""
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _need_2d(t: Tensor, op: str):
    if t.data.ndim != 2:
        raise DimensionError(f"{op} needs 2-D operands, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def make(needs):
        def back(g):
            da = g @ b.data.T if needs[0] else None
            db = a.data.T @ g if needs[1] else None
            return da, db
        return back

    return _emit("matmul", (a, b), out, make)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + bias, bias a 1-row tensor broadcast over rows."""
    _need_2d(x, "affine")
    _need_2d(w, "affine")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine inner dims disagree: {x.shape} x {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"affine bias must be (1, {w.shape[1]}), got {b.shape}")
    out = x.data @ w.data + b.data

    def make(needs):
        def back(g):
            dx = g @ w.data.T if needs[0] else None
            dw = x.data.T @ g if needs[1] else None
            db = g.sum(axis=0, keepdims=True) if needs[2] else None
            return dx, dw, db
        return back

    return _emit("affine", (x, w, b), out, make)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda needs: lambda g: (g if needs[0] else None,
                                          g if needs[1] else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda needs: lambda g: (g if needs[0] else None,
                                          -g if needs[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def make(needs):
        def back(g):
            return (g * b.data if needs[0] else None,
                    g * a.data if needs[1] else None)
        return back

    return _emit("mul", (a, b), a.data * b.data, make)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * s,
                 lambda needs: lambda g: (g * s,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("shift", (a,), a.data + c,
                 lambda needs: lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def make(needs):
        mask = a.data > 0.0
        return lambda g: (g * mask,)

    return _emit("relu", (a,), out, make)


# sigmoid saturates to exactly 0/1 in float64 past ~|36.7|; clip the input so
# outputs stay strictly inside (0, 1).
_SIGMOID_CLIP = 36.0


def sigmoid(a: Tensor) -> Tensor:
    x = np.clip(a.data, -_SIGMOID_CLIP, _SIGMOID_CLIP)
    out = 1.0 / (1.0 + np.exp(-x))

    def make(needs):
        s = out
        return lambda g: (g * s * (1.0 - s),)

    return _emit("sigmoid", (a,), out, make)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def make(needs):
        return lambda g: (g * 0.5 / np.maximum(out, 1e-300),)

    return _emit("sqrt", (a,), out, make)


def absolute(a: Tensor) -> Tensor:
    def make(needs):
        s = np.sign(a.data)
        return lambda g: (g * s,)

    return _emit("abs", (a,), np.abs(a.data), make)


def sign_pos(a: Tensor) -> Tensor:
    """+1 where >= 0, -1 where < 0; gradient is zero everywhere."""
    out = np.where(a.data >= 0.0, 1.0, -1.0)
    return _emit("sign", (a,), out, lambda needs: lambda g: (np.zeros_like(g),))


def sin(a: Tensor) -> Tensor:
    def make(needs):
        c = np.cos(a.data)
        return lambda g: (g * c,)

    return _emit("sin", (a,), np.sin(a.data), make)


def cos(a: Tensor) -> Tensor:
    def make(needs):
        s = np.sin(a.data)
        return lambda g: (g * -s,)

    return _emit("cos", (a,), np.cos(a.data), make)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    _same_shape(y, x, "atan2")
    out = np.arctan2(y.data, x.data)

    def make(needs):
        denom = y.data * y.data + x.data * x.data
        denom = np.maximum(denom, 1e-300)

        def back(g):
            dy = g * x.data / denom if needs[0] else None
            dx = g * -y.data / denom if needs[1] else None
            return dy, dx
        return back

    return _emit("atan2", (y, x), out, make)


def wrap_angle(a: Tensor) -> Tensor:
    """Normalize to (-pi, pi]; the shift is constant so the gradient is 1."""
    r = np.mod(a.data, 2.0 * np.pi)
    out = np.where(r > np.pi, r - 2.0 * np.pi, r)
    return _emit("wrap_angle", (a,), out, lambda needs: lambda g: (g,))


def softmax_rows(a: Tensor) -> Tensor:
    _need_2d(a, "softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def make(needs):
        s = out

        def back(g):
            dot = (g * s).sum(axis=1, keepdims=True)
            return (s * (g - dot),)
        return back

    return _emit("softmax_rows", (a,), out, make)


def concat_cols(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise DimensionError("concat_cols needs at least two operands")
    rows = tensors[0].shape[0]
    for t in tensors:
        _need_2d(t, "concat_cols")
        if t.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {t.shape[0]} vs {rows}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.shape[1] for t in tensors]

    def make(needs):
        def back(g):
            grads, j = [], 0
            for w, need in zip(widths, needs):
                grads.append(g[:, j:j + w] if need else None)
                j += w
            return tuple(grads)
        return back

    return _emit("concat_cols", tensors, out, make)


def stack_rows(tensors) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("stack_rows of nothing")
    cols = tensors[0].shape[1]
    for t in tensors:
        _need_2d(t, "stack_rows")
        if t.shape[1] != cols:
            raise DimensionError(f"stack_rows column mismatch: {t.shape[1]} vs {cols}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    heights = [t.shape[0] for t in tensors]

    def make(needs):
        def back(g):
            grads, i = [], 0
            for h, need in zip(heights, needs):
                grads.append(g[i:i + h] if need else None)
                i += h
            return tuple(grads)
        return back

    return _emit("stack_rows", tensors, out, make)


def gather_rows(a: Tensor, indices) -> Tensor:
    _need_2d(a, "gather_rows")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows wants a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError("gather_rows index out of range")
    out = a.data[idx]

    def make(needs):
        def back(g):
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            return (da,)
        return back

    return _emit("gather_rows", (a,), out, make)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    _need_2d(a, "slice_cols")
    if not (0 <= j0 <= j1 <= a.shape[1]):
        raise DimensionError(f"slice_cols [{j0}:{j1}] out of range for {a.shape}")
    out = a.data[:, j0:j1].copy()

    def make(needs):
        def back(g):
            da = np.zeros_like(a.data)
            da[:, j0:j1] = g
            return (da,)
        return back

    return _emit("slice_cols", (a,), out, make)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    orig = a.shape

    def make(needs):
        return lambda g: (g.reshape(orig),)

    return _emit("reshape", (a,), a.data.reshape(shape), make)


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.data.sum()]])

    def make(needs):
        shp = a.shape
        return lambda g: (np.full(shp, g.reshape(())),)

    return _emit("sum_all", (a,), out, make)


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise DimensionError("mean_all of empty tensor")
    return scale(sum_all(a), 1.0 / a.size)


_BCE_CLIP = 20.0


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, clipped at +/-20.

    Targets are plain values in [0, 1].  The stable form
    max(l,0) - l*t + log1p(exp(-|l|)) never overflows; the clip caps the
    loss and zeroes the gradient beyond it.
    """
    t = _f64(targets)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_logits target shape {t.shape} vs {logits.shape}")
    inside = np.abs(logits.data) < _BCE_CLIP
    l = np.clip(logits.data, -_BCE_CLIP, _BCE_CLIP)
    out = np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))

    def make(needs):
        s = 1.0 / (1.0 + np.exp(-l))
        return lambda g: (g * (s - t) * inside,)

    return _emit("bce_logits", (logits,), out, make)


@lru_cache(maxsize=None)
def _patch_index(h: int, w: int, k: int):
    """Neighbor cell indices per cell for a k x k window; -1 marks padding."""
    half = k // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    idx = np.full((h * w, k * k), -1, dtype=np.intp)
    o = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            flat = (ny * w + nx).reshape(-1)
            col = np.where(ok.reshape(-1), flat, -1)
            idx[:, o] = col
            o += 1
    return idx


def patches(a: Tensor, h: int, w: int, k: int) -> Tensor:
    """Per-cell k x k neighborhood gather over an (h*w, c) grid tensor.

    Output row r holds the k*k neighbor feature vectors of cell r in raster
    order, zero-padded at the border.
    """
    _need_2d(a, "patches")
    if a.shape[0] != h * w:
        raise DimensionError(f"patches: grid is {h}x{w} but tensor has {a.shape[0]} rows")
    if k % 2 != 1 or k < 1:
        raise DimensionError("patches window must be odd")
    c = a.shape[1]
    idx = _patch_index(h, w, k)
    valid = idx >= 0
    gathered = a.data[np.maximum(idx, 0)]          # (hw, k*k, c)
    gathered[~valid] = 0.0
    out = gathered.reshape(h * w, k * k * c)

    def make(needs):
        def back(g):
            g3 = g.reshape(h * w, k * k, c)
            da = np.zeros_like(a.data)
            for o in range(k * k):
                m = valid[:, o]
                # indices within one offset are unique, plain fancy add is safe
                da[idx[m, o]] += g3[m, o]
            return (da,)
        return back

    return _emit("patches", (a,), out, make)


def gather_interp(values: Tensor, indices, weights) -> Tensor:
    """Weighted gather: out[r] = sum_k weights[r,k] * values[indices[r,k]].

    The workhorse behind bilinear interpolation; differentiable in the
    grid values (indices and weights are fixed).
    """
    _need_2d(values, "gather_interp")
    idx = np.asarray(indices, dtype=np.intp)
    wts = _f64(weights)
    if idx.shape != wts.shape or idx.ndim != 2:
        raise DimensionError("gather_interp indices/weights must share a 2-D shape")
    if idx.size and (idx.min() < 0 or idx.max() >= values.shape[0]):
        raise DimensionError("gather_interp index out of range")
    out = np.einsum("rk,rkc->rc", wts, values.data[idx])

    def make(needs):
        def back(g):
            dv = np.zeros_like(values.data)
            for k in range(idx.shape[1]):
                np.add.at(dv, idx[:, k], wts[:, k:k + 1] * g)
            return (dv,)
        return back

    return _emit("gather_interp", (values,), out, make)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul,
                "relu": relu, "sigmoid": sigmoid, "scale": scale}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name over the pointwise op family."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise DimensionError(f"unknown elementwise kind '{kind}'") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# little networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of a plain MLP: hidden activations are ReLU, output is
    affine only."""
    widths: tuple

    def __post_init__(self):
        ws = tuple(int(w) for w in self.widths)
        if len(ws) < 2 or any(w <= 0 for w in ws):
            raise DimensionError(f"bad MLP widths {self.widths}")
        object.__setattr__(self, "widths", ws)


def init_affine(rng: np.random.Generator, n_in: int, n_out: int) -> tuple:
    w = parameter(rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out)))
    b = parameter(np.zeros((1, n_out)))
    return w, b


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> list:
    return [init_affine(rng, a, b) for a, b in zip(spec.widths, spec.widths[1:])]


def mlp_forward(spec: MlpSpec, weights, x: Tensor) -> Tensor:
    if x.shape[1] != spec.widths[0]:
        raise DimensionError(
            f"mlp input width {x.shape[1]} != spec width {spec.widths[0]}")
    if len(weights) != len(spec.widths) - 1:
        raise DimensionError("mlp weights do not match spec depth")
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(weights):
        h = affine(h, w, b)
        if i != last:
            h = relu(h)
    return h


def init_resblock(rng: np.random.Generator, width: int, hidden: int | None = None):
    hidden = width if hidden is None else hidden
    return [init_affine(rng, width, hidden), init_affine(rng, hidden, width)]


def resblock_forward(weights, x: Tensor) -> Tensor:
    """x + A2(relu(A1(x))); input and output widths are identical."""
    (w1, b1), (w2, b2) = weights
    if w1.shape[0] != x.shape[1] or w2.shape[1] != x.shape[1]:
        raise DimensionError(
            f"resblock width {w1.shape[0]}->{w2.shape[1]} vs input {x.shape[1]}")
    return add(x, affine(relu(affine(x, w1, b1)), w2, b2))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def check_gradients(build, params, eps: float = 1e-5,
                    sample: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    `build` rebuilds the scalar loss from the current parameter values and
    is called once under a recording graph and then twice per probed
    coordinate with no graph active.  Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).

    With `sample` set, at most that many coordinates per parameter tensor
    are probed (chosen by a seeded RNG); by default every coordinate is.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Graph() as g:
        loss = build()
        if loss.size != 1:
            raise DimensionError("check_gradients needs a scalar loss")
    backward(g, loss, params=params)
    analytic = [p.grad.copy() for p in params]
    for p, old in zip(params, saved):
        p.grad = old

    def value() -> float:
        out = build()
        v = out.item()
        if not math.isfinite(v):
            raise NumericError("non-finite loss during finite differencing")
        return v

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            coords = np.sort(rng.choice(flat.size, size=sample, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
