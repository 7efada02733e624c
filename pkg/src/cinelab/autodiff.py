"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tracked tensors and
replays their adjoints in reverse order.  Only the handful of primitives the
segmentation network and the losses need are provided.  All arithmetic is
float64.

    >>> tape = Tape()
    >>> w = tape.watch(np.zeros(1))
    >>> loss = tape.masked_mean(tape.sigmoid(w), np.ones(1, dtype=bool))
    >>> float(tape.backward(loss)[w.node_id][0])
    0.25
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "scalar_mul",
    "elementwise_mul",
    "masked_mean",
    "upsample_nearest_2x",
    "bias_add",
    "log",
    "clip",
)


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(eq=False)
class Tensor:
    """An array plus an optional handle into the tape that produced it."""

    values: np.ndarray
    node_id: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


@dataclass
class Tape:
    """Records primitives in execution order; rebuilt for every forward pass."""

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    # branch pattern of every piecewise op (relu, clip), in execution order
    kinks: list[np.ndarray] = field(default_factory=list)

    # -- bookkeeping -----------------------------------------------------

    def watch(self, values) -> Tensor:
        """Register a leaf (typically a parameter) whose gradient is wanted."""
        arr = np.asarray(values, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), arr.shape, None))
        return Tensor(arr, len(self.nodes) - 1)

    def _record(self, op, inputs, out, vjp) -> Tensor:
        ids = tuple(t.node_id for t in inputs)
        if all(i is None for i in ids):
            return Tensor(out)
        self.nodes.append(_Node(op, ids, out.shape, vjp))
        return Tensor(out, len(self.nodes) - 1)

    def forward(self, op: str, *inputs: Tensor, **params) -> Tensor:
        """Generic dispatch by op name, e.g. ``tape.forward("relu", x)``."""
        if op not in OP_KINDS:
            raise ValueError(f"unknown op {op!r}")
        return getattr(self, op)(*inputs, **params)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.values.size != 1 or loss.values.ndim > 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None:
            raise ValueError("loss does not depend on any watched tensor")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for src, gin in zip(node.inputs, node.vjp(g)):
                if src is None or gin is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gin
                else:
                    grads[src] = gin
        # leaves the loss never touched still get an exact zero gradient
        for nid, node in enumerate(self.nodes[: loss.node_id + 1]):
            if node.op == "leaf" and nid not in grads:
                grads[nid] = np.zeros(node.shape)
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        if t.node_id is None:
            raise ValueError("tensor is not tracked on this tape")
        if t.node_id in self.gradients:
            return self.gradients[t.node_id]
        return np.zeros(t.shape)

    # -- primitives ------------------------------------------------------

    def conv2d(self, x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
        """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k), zero padded.

        Padding is ``(k - 1) // 2`` so stride 1 preserves H×W and stride 2
        halves even sizes.
        """
        xv, wv = x.values, w.values
        if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
            raise ShapeError("conv2d", xv.shape, wv.shape, detail="expected (N,C,H,W) and (O,C,k,k)")
        if wv.shape[2] != wv.shape[3] or wv.shape[2] % 2 == 0:
            raise ShapeError("conv2d", xv.shape, wv.shape, detail="kernel must be square and odd")
        if stride not in (1, 2):
            raise ValueError(f"conv2d: unsupported stride {stride}")
        n, c, h, wd = xv.shape
        o, _, k, _ = wv.shape
        cols, ho, wo = _im2col(xv, k, stride)
        # weight rows ordered (ki, kj, c) to match the column layout
        wmat = wv.transpose(0, 2, 3, 1).reshape(o, k * k * c)
        out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

        def vjp(g):
            gflat = g.reshape(n, o, ho * wo)
            gw = sum(gflat[i] @ cols[i].T for i in range(n))
            gw = gw.reshape(o, k, k, c).transpose(0, 3, 1, 2)
            if x.node_id is None:
                return None, gw
            # input adjoint: correlate the (dilated) output gradient with the
            # flipped, channel-transposed kernel
            if stride == 2:
                gd = np.zeros((n, o, 2 * ho, 2 * wo))
                gd[:, :, ::2, ::2] = g
            else:
                gd = g
            wflip = wv[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
            gcols, gh, gwid = _im2col(gd, k, 1)
            gx = np.matmul(wflip, gcols).reshape(n, c, gh, gwid)[:, :, :h, :wd]
            return gx, gw

        return self._record("conv2d", (x, w), out, vjp)

    def bias_add(self, x: Tensor, b: Tensor) -> Tensor:
        if x.values.ndim != 4 or b.values.shape != (x.shape[1],):
            raise ShapeError("bias_add", x.shape, b.shape)
        out = x.values + b.values[None, :, None, None]
        return self._record("bias_add", (x, b), out, lambda g: (g, g.sum(axis=(0, 2, 3))))

    def relu(self, x: Tensor) -> Tensor:
        active = x.values > 0
        self.kinks.append(active)
        out = np.where(active, x.values, 0.0)
        return self._record("relu", (x,), out, lambda g: (g * active,))

    def sigmoid(self, x: Tensor) -> Tensor:
        v = x.values
        # split by sign so exp never overflows
        e = np.exp(-np.abs(v))
        out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError("add", a.shape, b.shape)
        return self._record("add", (a, b), a.values + b.values, lambda g: (g, g))

    def scalar_mul(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._record("scalar_mul", (x,), x.values * c, lambda g: (g * c,))

    def elementwise_mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError("elementwise_mul", a.shape, b.shape)
        av, bv = a.values, b.values
        return self._record("elementwise_mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def masked_mean(self, x: Tensor, mask, per_sample: bool = False) -> Tensor:
        """Mean of ``x`` over ``mask``; with ``per_sample`` one mean per leading index.

        The reduction is ``x[mask].sum() / mask.sum()`` so values outside the
        mask never enter the arithmetic.
        """
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ShapeError("masked_mean", x.shape, m.shape)
        v = x.values
        if per_sample:
            if v.ndim < 2:
                raise ShapeError("masked_mean", x.shape, m.shape, detail="per_sample needs a batch axis")
            counts = m.reshape(m.shape[0], -1).sum(axis=1)
            if np.any(counts == 0):
                raise ValueError("masked_mean: empty mask for at least one sample")
            out = np.array([v[i][m[i]].sum() for i in range(v.shape[0])]) / counts
            scale = (1.0 / counts).reshape((-1,) + (1,) * (v.ndim - 1))

            def vjp(g):
                return (np.where(m, g.reshape(scale.shape) * scale, 0.0),)
        else:
            count = int(m.sum())
            if count == 0:
                raise ValueError("masked_mean: empty mask")
            out = np.asarray(v[m].sum() / count)

            def vjp(g):
                return (np.where(m, float(g) / count, 0.0),)

        return self._record("masked_mean", (x,), out, vjp)

    def upsample_nearest_2x(self, x: Tensor) -> Tensor:
        if x.values.ndim != 4:
            raise ShapeError("upsample_nearest_2x", x.shape)
        out = x.values.repeat(2, axis=2).repeat(2, axis=3)
        n, c, h, w = x.shape

        def vjp(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return self._record("upsample_nearest_2x", (x,), out, vjp)

    def log(self, x: Tensor) -> Tensor:
        v = x.values
        if np.any(v <= 0):
            raise ValueError("log: non-positive input")
        return self._record("log", (x,), np.log(v), lambda g: (g / v,))

    def clip(self, x: Tensor, lo: float, hi: float) -> Tensor:
        v = x.values
        inside = (v >= lo) & (v <= hi)
        self.kinks.append(inside)
        return self._record("clip", (x,), np.clip(v, lo, hi), lambda g: (g * inside,))


def _im2col(x: np.ndarray, k: int, stride: int):
    """Columns of shape (N, k*k*C, Ho*Wo), rows ordered (ki, kj, c)."""
    n, c, h, w = x.shape
    if k == 1 and stride == 1:
        return x.reshape(n, c, h * w), h, w
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, k, k, c, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, k * k * c, ho * wo), ho, wo


def constant(values) -> Tensor:
    """An untracked tensor; gradients never flow into it."""
    return Tensor(np.asarray(values, dtype=np.float64))


@dataclass
class GradCheckReport:
    relative_errors: dict[str, float]
    tol: float
    checked: int = 0
    skipped: int = 0  # entries whose +-h stencil crossed a relu/clip kink

    @property
    def max_error(self) -> float:
        return max(self.relative_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _same_branches(a: Tape, b: Tape) -> bool:
    return len(a.kinks) == len(b.kinks) and all(np.array_equal(x, y) for x, y in zip(a.kinks, b.kinks))


def grad_check(
    params: dict[str, np.ndarray],
    loss_fn: Callable[[Tape, dict[str, Tensor]], Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn(tape, bound)`` must build the loss from the watched tensors in
    ``bound``.  With ``max_entries`` only a random subset of each parameter's
    entries is perturbed.  An entry whose +-h evaluations switch the branch
    of any relu or clip is not differentiable inside the stencil; it is
    skipped (and counted) rather than compared.  Failures are reported,
    never raised.
    """

    def evaluate(p):
        tape = Tape()
        bound = {k: tape.watch(v) for k, v in p.items()}
        return tape, bound, loss_fn(tape, bound)

    base, bound, loss = evaluate(params)
    base.backward(loss)
    errors, checked, skipped = {}, 0, 0
    for name, value in params.items():
        analytic = base.grad(bound[name]).ravel()
        order = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            order = (rng or np.random.default_rng(0)).permutation(value.size)
        limit = value.size if max_entries is None else max_entries
        used, numeric = [], []
        for flat_i in order:
            if len(used) >= limit:
                break
            vals, smooth = [], True
            for sign in (1.0, -1.0):
                bumped = value.copy().ravel()
                bumped[flat_i] += sign * h
                p = dict(params)
                p[name] = bumped.reshape(value.shape)
                tape, _, out = evaluate(p)
                smooth &= _same_branches(base, tape)
                vals.append(float(out.values))
            if not smooth:
                skipped += 1
                continue
            used.append(flat_i)
            numeric.append((vals[0] - vals[1]) / (2 * h))
        checked += len(used)
        errors[name] = relative_error(analytic[np.array(used, dtype=int)], np.array(numeric))
    return GradCheckReport(errors, tol, checked, skipped)
