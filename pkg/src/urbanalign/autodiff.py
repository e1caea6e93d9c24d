"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation the encoders and losses need is implemented here as a
forward numpy computation plus a vector-Jacobian closure recorded on a
global tape. The op set is deliberately small and desk-scale: no GPU, no
operator fusion, no broadcasting beyond what the listed ops do themselves.

Single-threaded per training step: the tape is module-global and must not
be shared across threads. Tensors without a tape node are plain values and
safe to pass around freely.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeError",
    "constant",
    "parameter",
    "reset_tape",
    "no_recording",
    "backward",
    "grad_check",
    "GradCheckReport",
    # ops
    "add",
    "mul",
    "scale",
    "negate",
    "log",
    "exp",
    "gelu",
    "matmul",
    "pairwise_dot_rows",
    "transpose",
    "reshape",
    "sum_all",
    "mean_all",
    "mean_axis",
    "max_axis_with_indices",
    "softmax_rows",
    "layer_norm",
    "l2_normalize_rows",
    "sum_rows_exact",
    "take_row",
    "take_rows",
    "embedding_lookup",
    "slice_rows",
    "slice_last_axis",
    "concat_last_axis",
    "concat_rows",
    "concat_vectors",
    "stack_rows",
    "stack_scalars",
    "diagonal",
    "multi_head_attention",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (double backward, non-scalar loss, ...)."""


class Tensor:
    """A dense float64 array, optionally tracked on the active tape.

    ``node`` is the index of the tape node that produced this tensor, or
    None for leaves and constants. A tensor created as a constant never
    accumulates gradient.
    """

    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad: bool = False, node: int | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def constant(values) -> Tensor:
    """A tensor that never participates in differentiation."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False
        self.enabled = True


_TAPE = Tape()


def reset_tape() -> None:
    """Discard all recorded nodes and allow a fresh backward pass."""
    global _TAPE
    _TAPE = Tape()


@contextmanager
def no_recording():
    """Context in which no operations are recorded (pure forward evaluation)."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _record(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray, vjp) -> Tensor:
    tracked = _TAPE.enabled and any(
        t.requires_grad or t.node is not None for t in inputs
    )
    out = Tensor(out_values, requires_grad=tracked)
    if tracked:
        out.node = len(_TAPE.nodes)
        _TAPE.nodes.append(_Node(op, inputs, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every requires_grad leaf.

    The loss must be scalar. Running backward twice on the same tape is an
    error; call :func:`reset_tape` between steps.
    """
    if loss.values.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if _TAPE.consumed:
        raise TapeError("backward already ran on this tape; call reset_tape() first")
    if loss.node is None:
        raise TapeError("loss does not depend on any tracked tensor")
    _TAPE.consumed = True

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.values)}
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = _TAPE.nodes[idx]
        for tensor, ig in zip(node.inputs, node.vjp(g)):
            if ig is None:
                continue
            if tensor.node is not None:
                prev = grads.get(tensor.node)
                grads[tensor.node] = ig if prev is None else prev + ig
            elif tensor.requires_grad:
                tensor.grad = ig if tensor.grad is None else tensor.grad + ig


# ---------------------------------------------------------------------------
# Element-wise and reduction ops
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    for _ in range(grad.ndim - len(shape)):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None
    av, bv = a.values, b.values

    def vjp(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _record("mul", (a, b), out, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.values * c, lambda g: (g * c,))


def negate(x: Tensor) -> Tensor:
    return _record("negate", (x,), -x.values, lambda g: (-g,))


def log(x: Tensor) -> Tensor:
    out = np.log(x.values)
    xv = x.values
    return _record("log", (x,), out, lambda g: (g / xv,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _record("exp", (x,), out, lambda g: (g * out,))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    xv = x.values
    cdf = 0.5 * (1.0 + erf(xv * _SQRT1_2))
    out = xv * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT_2PI
        return (g * (cdf + xv * pdf),)

    return _record("gelu", (x,), out, vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(
        "sum_all", (x,), np.asarray(x.values.sum()), lambda g: (np.full(shape, g),)
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.values.size
    return _record(
        "mean_all",
        (x,),
        np.asarray(x.values.mean()),
        lambda g: (np.full(shape, g / n),),
    )


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]

    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _record("mean_axis", (x,), x.values.mean(axis=axis), vjp)


def max_axis_with_indices(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` plus the argmax indices.

    Gradient is routed only to the selected entries; ties break toward the
    lowest index.
    """
    idx = np.argmax(x.values, axis=axis)
    out = np.take_along_axis(x.values, np.expand_dims(idx, axis), axis=axis).squeeze(
        axis
    )
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(
            full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return (full,)

    return _record("max_axis", (x,), out, vjp), idx


# ---------------------------------------------------------------------------
# Linear algebra / shaping ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", (a, b), av @ bv, vjp)


def pairwise_dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """All inner products between rows of ``a`` (m, d) and rows of ``b`` (n, d).

    Equivalent to ``a @ b.T`` but each entry is computed as an independent
    1-D dot product, so entry (i, j) depends only on rows i and j — not on
    the matrix blocking BLAS would choose. Token-level similarity relies on
    this to stay bit-comparable with a per-pair reference loop.
    """
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_dot_rows shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            out[i, j] = np.dot(av[i], bv[j])

    def vjp(g):
        return g @ bv, g.T @ av

    return _record("pairwise_dot_rows", (a, b), out, vjp)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _record("transpose", (x,), x.values.T.copy(), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record(
        "reshape", (x,), x.values.reshape(shape), lambda g: (g.reshape(old),)
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.values.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", (x,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match d={d}"
        )
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def vjp(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.values
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, vjp)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Map each row to unit Euclidean norm (quotient-rule gradient)."""
    if x.values.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norms = np.linalg.norm(x.values, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize_rows: zero-norm row")
    out = x.values / norms

    def vjp(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _record("l2_normalize_rows", (x,), out, vjp)


def sum_rows_exact(x: Tensor) -> Tensor:
    """Column-wise sum via math.fsum: exactly rounded, hence invariant to
    any reordering of the rows. Used where bit-exact permutation symmetry
    is part of the contract (fusion, masked aggregation)."""
    if x.values.ndim != 2:
        raise ShapeError(f"sum_rows_exact expects a matrix, got {x.shape}")
    m = x.shape[0]
    out = np.array([math.fsum(col) for col in x.values.T])
    return _record("sum_rows_exact", (x,), out, lambda g: (np.tile(g, (m, 1)),))


def take_row(x: Tensor, i: int) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"take_row expects a matrix, got {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _record("take_row", (x,), x.values[i].copy(), vjp)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by index; gradient scatter-adds (repeats accumulate)."""
    if x.values.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", (x,), x.values[idx].copy(), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of an embedding table for a sequence of token ids."""
    return take_rows(table, ids)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"slice_rows expects a matrix, got {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", (x,), x.values[start:stop].copy(), vjp)


def slice_last_axis(x: Tensor, start: int, stop: int) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"slice_last_axis expects a matrix, got {x.shape}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", (x,), x.values[:, start:stop].copy(), vjp)


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    rows = {p.shape[0] for p in parts}
    if any(p.values.ndim != 2 for p in parts) or len(rows) != 1:
        raise ShapeError(
            f"concat_last_axis needs matrices with equal row counts, got "
            f"{[p.shape for p in parts]}"
        )
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _record(
        "concat_last_axis",
        parts,
        np.concatenate([p.values for p in parts], axis=1),
        vjp,
    )


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along axis 0."""
    parts = tuple(parts)
    cols = {p.shape[1] for p in parts if p.values.ndim == 2}
    if any(p.values.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(
            f"concat_rows needs matrices with equal column counts, got "
            f"{[p.shape for p in parts]}"
        )
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _record(
        "concat_rows", parts, np.concatenate([p.values for p in parts], axis=0), vjp
    )


def concat_vectors(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if any(p.values.ndim != 1 for p in parts):
        raise ShapeError(f"concat_vectors needs 1-D inputs, got {[p.shape for p in parts]}")
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits))

    return _record(
        "concat_vectors", parts, np.concatenate([p.values for p in parts]), vjp
    )


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack k vectors of equal length into a (k, n) matrix."""
    parts = tuple(parts)
    if any(p.values.ndim != 1 for p in parts):
        raise ShapeError(f"stack_rows needs 1-D inputs, got {[p.shape for p in parts]}")
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError(f"stack_rows length mismatch: {[p.shape for p in parts]}")

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))

    return _record("stack_rows", parts, np.stack([p.values for p in parts]), vjp)


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Stack k scalar tensors into a vector of length k."""
    parts = tuple(parts)
    if any(p.values.size != 1 for p in parts):
        raise ShapeError("stack_scalars needs scalar inputs")
    shapes = [p.shape for p in parts]

    def vjp(g):
        return tuple(np.full(shapes[i], g[i]) for i in range(len(parts)))

    return _record(
        "stack_scalars",
        parts,
        np.array([float(p.values.reshape(())) for p in parts]),
        vjp,
    )


def diagonal(x: Tensor) -> Tensor:
    n, m = x.shape
    if n != m:
        raise ShapeError(f"diagonal expects a square matrix, got {x.shape}")

    def vjp(g):
        full = np.zeros((n, n))
        np.fill_diagonal(full, g)
        return (full,)

    return _record("diagonal", (x,), np.diag(x.values).copy(), vjp)


# ---------------------------------------------------------------------------
# Attention (composite of the primitives above; gradient comes for free)
# ---------------------------------------------------------------------------


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    num_heads: int,
) -> Tensor:
    """Bidirectional scaled dot-product attention over a token matrix.

    ``x`` is (s, d); each projection weight is (d, d) with a (d,) bias.
    No causal mask: the encoders attend in both directions.
    """
    s, d = x.shape
    if d % num_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    q = add(matmul(x, wq), bq)
    k = add(matmul(x, wk), bk)
    v = add(matmul(x, wv), bv)
    heads = []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_last_axis(q, lo, hi)
        kh = slice_last_axis(k, lo, hi)
        vh = slice_last_axis(v, lo, hi)
        attn = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh)))
        heads.append(matmul(attn, vh))
    merged = heads[0] if num_heads == 1 else concat_last_axis(heads)
    return add(matmul(merged, wo), bo)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    per_input: list[float]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
            f"(tolerance {self.tolerance:.1e})"
        )


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Iterable[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    rel_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued ``f`` against central
    finite differences.

    ``f`` is called as ``f(*inputs)`` and may equally close over the input
    tensors and ignore its arguments; finite differencing perturbs the
    tensors' values in place and restores them. Relative error uses an
    absolute floor in the denominator so that near-zero gradients are
    judged by absolute accuracy.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.grad = None
    reset_tape()
    loss = f(*tensors)
    if loss.values.size != 1:
        raise TapeError("grad_check requires a scalar-valued function")
    backward(loss)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.values)
        for t in tensors
    ]
    for t in tensors:
        t.grad = None
    reset_tape()

    max_rel = 0.0
    per_input = []
    with no_recording():
        for t, a in zip(tensors, analytic):
            flat = t.values.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(f(*tensors).values.reshape(()))
                flat[i] = orig - step
                lo = float(f(*tensors).values.reshape(()))
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                ai = a.reshape(-1)[i]
                denom = max(abs(ai), abs(numeric), rel_floor)
                worst = max(worst, abs(ai - numeric) / denom)
            per_input.append(worst)
            max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel <= tolerance, max_rel, tolerance, per_input)
