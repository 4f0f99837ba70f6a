"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Values are numpy arrays wrapped in :class:`Tensor`.  A :class:`Tape` records
every primitive applied to tensors that belong to it, and :func:`backward`
walks the record in reverse to accumulate gradients.  Tensors created without
a tape (or from plain arrays) are constants; operations on constants only are
evaluated eagerly and nothing is recorded, which is how inference code runs
through the same functions at low overhead.

Broadcasting is deliberately absent: elementwise ops need matching shapes and
the only mixed form is :func:`scale` (python scalar times tensor).  Bias rows
are added with ``matmul(ones, b)``.

Supported kinds: matmul, add, sub, mul, scale, tanh, sigmoid, exp, log, neg,
sum, concat, slice, clip.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, kind: str, index: int | None):
        where = f" (op #{index})" if index is not None else ""
        super().__init__(f"non-finite value produced by '{kind}'{where}")
        self.kind = kind
        self.index = index


class Tensor:
    __slots__ = ("data", "tape", "id", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = self.name or f"t{self.id}"
        return f"Tensor({tag}, shape={self.shape})"

    # operator sugar; all of these dispatch to the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("kind", "inputs", "out", "vjp")

    def __init__(self, kind, inputs, out, vjp):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of primitive ops.

    Ops are appended in execution order, so the list is topologically sorted
    by construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64, copy=True), tape=self, name=name)
        self.leaves[t.id] = t
        return t

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp: Callable):
        self.nodes.append(_Node(kind, tuple(inputs), out, vjp))

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
    tape = _tape_of(inputs)
    if not np.isfinite(value).all():
        raise NonFiniteError(kind, len(tape) if tape is not None else None)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.record(kind, inputs, out, vjp)
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Tensor:
    """2-D matrix product ``(m, k) @ (k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), c * a.data, lambda g: (c * g,))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows exp
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _emit("log", (a,), y, lambda g: (g / x,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op kind name
    """Sum of every element, returned with shape ``()``."""
    a = as_tensor(a)
    shp = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(shp, float(g)),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            p.shape[d] != parts[0].shape[d] for d in range(nd) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [np.s_[:]] * nd
        out = []
        for i in range(len(parts)):
            idx[ax] = np.s_[bounds[i] : bounds[i + 1]]
            out.append(g[tuple(idx)])
        return tuple(out)

    return _emit("concat", parts, np.concatenate([p.data for p in parts], axis=ax), vjp)


def slice(a, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    nd = a.data.ndim
    ax = axis % nd
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of size {n}")
    idx = [np.s_[:]] * nd
    idx[ax] = np.s_[start:stop]
    idx = tuple(idx)
    shp = a.shape

    def vjp(g):
        out = np.zeros(shp)
        out[idx] = g
        return (out,)

    return _emit("slice", (a,), a.data[idx].copy(), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _emit("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


# ------------------------------------------------------- fused primitives
#
# Composite ops with hand-derived gradients.  They compute exactly what the
# corresponding chains of elementary primitives compute, but record a single
# tape node, which removes most of the per-op Python overhead of the SRNN.

def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``x`` (m, k), ``w`` (k, n) and a bias row ``b`` (1, n)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: cannot contract {x.shape} with {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise ShapeError(f"affine: bias shape {b.shape} does not match (1, {w.shape[1]})")
    X, W = x.data, w.data
    return _emit("affine", (x, w, b), X @ W + b.data,
                 lambda g: (g @ W.T, X.T @ g, g.sum(axis=0, keepdims=True)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_cell(x, h, c, w_ih, w_hh, b) -> Tensor:
    """One LSTM update; returns ``[h_new, c_new]`` concatenated to (B, 2H).

    Gate blocks of the pre-activation are ordered input, forget, cell, output.
    """
    x, h, c, w_ih, w_hh, b = (as_tensor(v) for v in (x, h, c, w_ih, w_hh, b))
    B, H = c.shape
    if h.shape != (B, H) or w_ih.shape != (x.shape[1], 4 * H) or w_hh.shape != (H, 4 * H) \
            or b.shape != (1, 4 * H) or x.shape[0] != B:
        raise ShapeError(f"lstm_cell: incompatible shapes x{x.shape} h{h.shape} c{c.shape} "
                         f"w_ih{w_ih.shape} w_hh{w_hh.shape} b{b.shape}")
    X, Hp, C, Wi, Wh = x.data, h.data, c.data, w_ih.data, w_hh.data
    z = X @ Wi + Hp @ Wh + b.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H : 2 * H])
    gg = np.tanh(z[:, 2 * H : 3 * H])
    o = _sigmoid(z[:, 3 * H :])
    c_new = f * C + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def vjp(g):
        gh, gc = g[:, :H], g[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * C * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        return (dz @ Wi.T, dz @ Wh.T, dc * f, X.T @ dz, Hp.T @ dz, dz.sum(axis=0, keepdims=True))

    return _emit("lstm_cell", (x, h, c, w_ih, w_hh, b), np.concatenate([h_new, c_new], axis=1), vjp)


def reparam(mean, logvar, eps) -> Tensor:
    """``mean + exp(logvar / 2) * eps``; ``eps`` is treated as a constant."""
    mean, logvar, eps = as_tensor(mean), as_tensor(logvar), as_tensor(eps)
    _same_shape("reparam", mean, logvar)
    _same_shape("reparam", mean, eps)
    std = np.exp(0.5 * logvar.data)
    E = eps.data
    return _emit("reparam", (mean, logvar, eps), mean.data + std * E,
                 lambda g: (g, 0.5 * g * std * E, g * std))


_HALF_LOG2PI = 0.5 * float(np.log(2.0 * np.pi))


def gaussian_nll(x, mean, logvar) -> Tensor:
    """Negative diagonal-Gaussian log density summed over every element (shape ``()``)."""
    x, mean, logvar = as_tensor(x), as_tensor(mean), as_tensor(logvar)
    _same_shape("gaussian_nll", x, mean)
    _same_shape("gaussian_nll", x, logvar)
    d = x.data - mean.data
    prec = np.exp(-logvar.data)
    q = d * d * prec
    val = np.asarray(0.5 * (logvar.data + q).sum() + _HALF_LOG2PI * d.size)

    def vjp(g):
        g = float(g)
        r = g * d * prec
        return (r, -r, 0.5 * g * (1.0 - q))

    return _emit("gaussian_nll", (x, mean, logvar), val, vjp)


def kl_gauss(q_mean, q_logvar, p_mean, p_logvar) -> Tensor:
    """KL(q || p) of diagonal Gaussians summed over every element (shape ``()``)."""
    qm, qv, pm, pv = (as_tensor(v) for v in (q_mean, q_logvar, p_mean, p_logvar))
    for other in (qv, pm, pv):
        _same_shape("kl_gauss", qm, other)
    d = qm.data - pm.data
    pprec = np.exp(-pv.data)
    ratio = np.exp(qv.data - pv.data)
    maha = d * d * pprec
    val = np.asarray(0.5 * (ratio + maha - 1.0 - qv.data + pv.data).sum())

    def vjp(g):
        g = float(g)
        r = g * d * pprec
        return (r, 0.5 * g * (ratio - 1.0), -r, 0.5 * g * (1.0 - ratio - maha))

    return _emit("kl_gauss", (qm, qv, pm, pv), val, vjp)


_KINDS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "scale": scale,
    "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "neg": neg,
    "sum": sum, "concat": concat, "slice": slice, "clip": clip,
    "affine": affine, "lstm_cell": lstm_cell, "reparam": reparam,
    "gaussian_nll": gaussian_nll, "kl_gauss": kl_gauss,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply primitive ``kind`` by name."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every leaf of ``tape``.

    Returns a map from tensor id to gradient array.  Leaves that do not
    influence the loss get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.tape is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    return {lid: grads.get(lid, np.zeros(t.shape)) for lid, t in tape.leaves.items()}


def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], float],
    grad: dict[str, np.ndarray],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    names: Iterable[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``|analytic - numeric| / max(|numeric|, 1e-8)`` over entries.

    ``f`` maps a parameter dict to a float and must be deterministic (freeze
    any sampling noise).  ``grad`` holds the analytic gradients keyed like
    ``params``.  With ``max_entries`` only a random subset of entries per
    array is probed.
    """
    worst = 0.0
    for name in names if names is not None else params:
        base = params[name]
        idxs = list(np.ndindex(base.shape))
        if max_entries is not None and len(idxs) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(idxs), size=max_entries, replace=False)
            idxs = [idxs[i] for i in sorted(pick)]
        for ix in idxs:
            orig = base[ix]
            trial = dict(params)
            arr = base.copy()
            arr[ix] = orig + step
            trial[name] = arr
            fp = f(trial)
            arr = base.copy()
            arr[ix] = orig - step
            trial[name] = arr
            fm = f(trial)
            numeric = (fp - fm) / (2.0 * step)
            analytic = float(grad[name][ix])
            err = abs(analytic - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
