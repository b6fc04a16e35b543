"""Reverse-mode automatic differentiation over float32 numpy buffers.

The engine is deliberately small: a `Tensor` wraps a contiguous float32
array, and every primitive applied while a `ComputationRecord` is active
appends one entry holding the operands, the produced output, a replay
closure, and a vector-Jacobian closure.  `backward` walks the entries in
exact reverse order and accumulates gradients into the leaves that asked
for them.

Only the operations needed by small convolutional classifiers and
sign-gradient attacks exist here.  There is no broadcasting beyond the
bias add inside `dense`; shape agreement is checked explicitly and
violations raise `ShapeError`.

Storage and compute are 32-bit.  Test oracles run in 64-bit; keeping the
engine in float32 matches how the attacks are evaluated while the wider
oracle isolates accumulation error.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "tensor",
    "dense",
    "conv2d",
    "bias_add_channel",
    "relu",
    "maxpool2d",
    "avgpool_global",
    "softmax_cross_entropy",
    "backward",
    "sign",
    "l1_normalize",
    "add",
    "scale",
    "affine",
    "reshape",
    "weighted_sum",
    "nn_resize",
    "pad2d",
]


class Tensor:
    """A contiguous float32 array plus gradient bookkeeping.

    Tensors are treated as immutable once produced; operations always
    allocate fresh outputs.  `grad` is populated by `backward` for leaves
    created with `requires_grad=True`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a float32 Tensor."""
    return Tensor(data, requires_grad=requires_grad)


class _Entry:
    __slots__ = ("op", "inputs", "output", "replay", "vjp")

    def __init__(self, op, inputs, output, replay, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        # Recomputes the output array from the recorded operands.
        self.replay = replay
        # Maps (grad_out, needs) to per-input gradient arrays (None where
        # needs[i] is False).
        self.vjp = vjp


class ComputationRecord:
    """Ordered tape of primitive applications for one forward pass.

    Use as a context manager; operations executed inside the block are
    recorded in application order.  Records are single-threaded: each
    attack instance owns its own record, and the active-record stack is
    thread-local.
    """

    __slots__ = ("entries", "_output_ids")

    def __init__(self):
        self.entries: list[_Entry] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "ComputationRecord":
        _active_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _active_stack().pop()
        assert popped is self
        return False

    def _append(self, entry: _Entry) -> None:
        self.entries.append(entry)
        self._output_ids.add(id(entry.output))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    def replay_check(self) -> bool:
        """Re-run every recorded primitive; True iff all outputs match
        the recorded ones bit for bit."""
        for entry in self.entries:
            if not np.array_equal(entry.replay(), entry.output.data):
                return False
        return True


_tls = threading.local()


def _active_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _record(op: str, inputs: tuple, out_data: np.ndarray, replay, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    stack = _active_stack()
    if stack:
        stack[-1]._append(_Entry(op, inputs, out, replay, vjp))
    return out


def backward(record: ComputationRecord, seed: Tensor) -> dict:
    """Reverse-mode sweep of `record` from the scalar `seed`.

    `seed` must be a scalar tensor produced under `record`; its own
    derivative is taken as 1.  Returns a dict mapping each leaf tensor
    (one with `requires_grad=True`) to its gradient array, and also
    assigns the arrays to the leaves' `.grad`.
    """
    if seed.data.size != 1:
        raise ShapeError(
            f"backward seed must be scalar, got shape {seed.data.shape}"
        )
    if not record.owns(seed):
        raise ValueError("backward seed was not produced under this record")

    grads: dict[int, np.ndarray] = {
        id(seed): np.ones_like(seed.data)
    }
    leaves: dict[Tensor, np.ndarray] = {}
    for entry in reversed(record.entries):
        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue
        needs = tuple(t.requires_grad for t in entry.inputs)
        if not any(needs):
            continue
        in_grads = entry.vjp(g_out, needs)
        for t, g in zip(entry.inputs, in_grads):
            if g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] += g
            else:
                grads[key] = g
            if not record.owns(t):
                leaves[t] = grads[key]
    for t, g in leaves.items():
        t.grad = g
    return leaves


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def dense(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """out[b,o] = sum_i input[b,i] * weights[i,o] + bias[o]."""
    x, w, b = input.data, weights.data, bias.data
    _require(x.ndim == 2, f"dense input must be 2-d, got {x.shape}")
    _require(w.ndim == 2, f"dense weights must be 2-d, got {w.shape}")
    _require(
        x.shape[1] == w.shape[0],
        f"dense inner extents differ: input {x.shape} vs weights {w.shape}",
    )
    _require(
        b.shape == (w.shape[1],),
        f"dense bias shape {b.shape} does not match output extent {w.shape[1]}",
    )

    def fwd():
        return x @ w + b

    def vjp(g, needs):
        return (
            g @ w.T if needs[0] else None,
            x.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _record("dense", (input, weights, bias), fwd(), fwd, vjp)


def _conv_out_extent(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d output extent not integral for size={size}, kernel={k}, "
            f"stride={stride}, padding={padding}"
        )
    return span // stride + 1


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _col_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided [B,H',W',C,kh,kw] window view over a padded input."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ho, wo, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b, _, h, w = x.shape
    f, c, kh, kw = k.shape
    xp = _pad_spatial(x, padding)
    win = _col_view(xp, kh, kw, stride)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(b * ho * wo, c * kh * kw)
    out = cols @ k.reshape(f, c * kh * kw).T
    return np.ascontiguousarray(
        out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2)
    )


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    b, f, h, w = g.shape
    out = np.zeros((b, f, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def _conv_input_grad(g, k, x_shape, stride, padding):
    f, c, kh, kw = k.shape
    gd = _dilate(np.ascontiguousarray(g), stride)
    b, _, hd, wd = gd.shape
    gp = np.zeros((b, f, hd + 2 * (kh - 1), wd + 2 * (kw - 1)), dtype=g.dtype)
    gp[:, :, kh - 1 : kh - 1 + hd, kw - 1 : kw - 1 + wd] = gd
    # Full correlation with the spatially flipped kernel, transposed in
    # the filter/channel axes, undoes the forward correlation.
    win = _col_view(gp, kh, kw, 1)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(b * ho * wo, f * kh * kw)
    kt = np.ascontiguousarray(
        k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    ).reshape(c, f * kh * kw)
    dxp = (cols @ kt.T).reshape(b, ho, wo, c).transpose(0, 3, 1, 2)
    h, w = x_shape[2], x_shape[3]
    return np.ascontiguousarray(
        dxp[:, :, padding : padding + h, padding : padding + w]
    )


def _conv_kernel_grad(g, x, k_shape, stride, padding):
    f, c, kh, kw = k_shape
    xp = _pad_spatial(x, padding)
    win = _col_view(xp, kh, kw, stride)
    b, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = win.reshape(b * ho * wo, c * kh * kw)
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, f)
    return (gmat.T @ cols).reshape(k_shape)


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2-d cross-correlation, differentiable in input and kernel."""
    x, k = input.data, kernel.data
    _require(x.ndim == 4, f"conv2d input must be 4-d [B,C,H,W], got {x.shape}")
    _require(k.ndim == 4, f"conv2d kernel must be 4-d [F,C,kh,kw], got {k.shape}")
    _require(
        x.shape[1] == k.shape[1],
        f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}",
    )
    _conv_out_extent(x.shape[2], k.shape[2], stride, padding)
    _conv_out_extent(x.shape[3], k.shape[3], stride, padding)

    def fwd():
        return _conv_forward(x, k, stride, padding)

    def vjp(g, needs):
        return (
            _conv_input_grad(g, k, x.shape, stride, padding) if needs[0] else None,
            _conv_kernel_grad(g, x, k.shape, stride, padding) if needs[1] else None,
        )

    return _record("conv2d", (input, kernel), fwd(), fwd, vjp)


def bias_add_channel(input: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to a [B,F,H,W] activation."""
    x, b = input.data, bias.data
    _require(x.ndim == 4, f"bias_add_channel input must be 4-d, got {x.shape}")
    _require(
        b.shape == (x.shape[1],),
        f"bias shape {b.shape} does not match channel extent {x.shape[1]}",
    )

    def fwd():
        return x + b[:, None, None]

    def vjp(g, needs):
        return (
            g if needs[0] else None,
            g.sum(axis=(0, 2, 3)) if needs[1] else None,
        )

    return _record("bias_add_channel", (input, bias), fwd(), fwd, vjp)


def relu(input: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = input.data

    def fwd():
        return np.maximum(x, 0.0)

    def vjp(g, needs):
        return ((g * (x > 0)) if needs[0] else None,)

    return _record("relu", (input,), fwd(), fwd, vjp)


def maxpool2d(input: Tensor, window: int) -> Tensor:
    """Non-overlapping windowed max over the spatial extents.

    The backward pass routes each window's gradient to the first maximal
    element in row-major scan order, which keeps gradients reproducible
    when a window holds ties.
    """
    x = input.data
    _require(x.ndim == 4, f"maxpool2d input must be 4-d, got {x.shape}")
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(
            f"maxpool2d window {window} larger than spatial extent {h}x{w}"
        )
    _require(
        h % window == 0 and w % window == 0,
        f"maxpool2d window {window} must divide spatial extents {h}x{w}",
    )
    ho, wo = h // window, w // window
    area = window * window

    def cells():
        v = x.reshape(b, c, ho, window, wo, window)
        return np.ascontiguousarray(
            v.transpose(0, 1, 2, 4, 3, 5)
        ).reshape(b * c * ho * wo, area)

    cell_data = cells()

    def fwd():
        return cells().max(axis=-1).reshape(b, c, ho, wo)

    out_data = cell_data.max(axis=-1).reshape(b, c, ho, wo)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        # argmax takes the first maximum, which pins tie-breaking to
        # row-major scan order within each window.
        idx = cell_data.argmax(axis=-1)
        flat = np.zeros((b * c * ho * wo, area), dtype=g.dtype)
        flat[np.arange(flat.shape[0]), idx] = g.reshape(-1)
        back = flat.reshape(b, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(back).reshape(b, c, h, w),)

    return _record("maxpool2d", (input,), out_data, fwd, vjp)


def avgpool_global(input: Tensor) -> Tensor:
    """Mean over both spatial extents: [B,C,H,W] -> [B,C]."""
    x = input.data
    _require(x.ndim == 4, f"avgpool_global input must be 4-d, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def fwd():
        return x.mean(axis=(2, 3))

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        expanded = np.broadcast_to(
            (g / area)[:, :, None, None], x.shape
        )
        return (np.ascontiguousarray(expanded),)

    return _record("avgpool_global", (input,), fwd(), fwd, vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by per-row max subtraction.  `labels` is an integer array
    of class indices, not a Tensor.
    """
    z = logits.data
    _require(z.ndim == 2, f"softmax_cross_entropy logits must be 2-d, got {z.shape}")
    y = np.asarray(labels)
    _require(
        y.shape == (z.shape[0],),
        f"labels shape {y.shape} does not match batch extent {z.shape[0]}",
    )
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError(
            f"label out of range [0,{z.shape[1]}): {y.min()}..{y.max()}"
        )
    rows = np.arange(z.shape[0])

    def fwd():
        m = z.max(axis=1, keepdims=True)
        shifted = z - m
        lse = np.log(np.exp(shifted).sum(axis=1))
        return np.asarray(-(shifted[rows, y] - lse).mean(), dtype=np.float32)

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[rows, y] -= 1.0
        p *= np.float32(g) / z.shape[0]
        return (p,)

    return _record("softmax_cross_entropy", (logits,), fwd(), fwd, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (no broadcasting)."""
    _require(
        a.data.shape == b.data.shape,
        f"add requires equal shapes, got {a.data.shape} vs {b.data.shape}",
    )

    def fwd():
        return a.data + b.data

    def vjp(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return _record("add", (a, b), fwd(), fwd, vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = np.float32(factor)

    def fwd():
        return a.data * c

    def vjp(g, needs):
        return ((g * c) if needs[0] else None,)

    return _record("scale", (a,), fwd(), fwd, vjp)


def affine(a: Tensor, factor: float, offset: float) -> Tensor:
    """x * factor + offset with scalar constants (input normalization)."""
    c = np.float32(factor)
    d = np.float32(offset)

    def fwd():
        out = a.data * c
        out += d
        return out

    def vjp(g, needs):
        return ((g * c) if needs[0] else None,)

    return _record("affine", (a,), fwd(), fwd, vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def fwd():
        return np.ascontiguousarray(a.data.reshape(shape))

    def vjp(g, needs):
        return (
            (np.ascontiguousarray(g.reshape(a.data.shape)) if needs[0] else None),
        )

    return _record("reshape", (a,), fwd(), fwd, vjp)


def weighted_sum(tensors: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """sum_i weights[i] * tensors[i] over same-shape tensors."""
    _require(len(tensors) > 0, "weighted_sum needs at least one tensor")
    _require(
        len(tensors) == len(weights),
        f"weighted_sum got {len(tensors)} tensors but {len(weights)} weights",
    )
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        _require(
            t.data.shape == shape,
            f"weighted_sum shape mismatch: {t.data.shape} vs {shape}",
        )
    ws = [np.float32(w) for w in weights]

    def fwd():
        out = tensors[0].data * ws[0]
        for t, w in zip(tensors[1:], ws[1:]):
            out += t.data * w
        return out

    def vjp(g, needs):
        return tuple(
            (g * w) if need else None for need, w in zip(needs, ws)
        )

    return _record("weighted_sum", tuple(tensors), fwd(), fwd, vjp)


def nn_resize(a: Tensor, size: int) -> Tensor:
    """Nearest-neighbor resize of the spatial extents to size x size.

    The map is linear (a gather), so the backward pass is the exact
    transpose: a scatter-add onto the source pixels.
    """
    x = a.data
    _require(x.ndim == 4, f"nn_resize input must be 4-d, got {x.shape}")
    _require(size >= 1, f"nn_resize size must be positive, got {size}")
    h, w = x.shape[2], x.shape[3]
    src_i = (np.arange(size) * h) // size
    src_j = (np.arange(size) * w) // size

    def fwd():
        return np.ascontiguousarray(x[:, :, src_i[:, None], src_j[None, :]])

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        dx = np.zeros_like(x)
        np.add.at(dx, (slice(None), slice(None), src_i[:, None], src_j[None, :]), g)
        return (dx,)

    return _record("nn_resize", (a,), fwd(), fwd, vjp)


def pad2d(a: Tensor, top: int, left: int, out_h: int, out_w: int) -> Tensor:
    """Embed the spatial extents into a zero canvas of out_h x out_w."""
    x = a.data
    _require(x.ndim == 4, f"pad2d input must be 4-d, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    _require(
        top >= 0 and left >= 0 and top + h <= out_h and left + w <= out_w,
        f"pad2d placement ({top},{left}) of {h}x{w} exceeds canvas {out_h}x{out_w}",
    )

    def fwd():
        out = np.zeros((x.shape[0], x.shape[1], out_h, out_w), dtype=x.dtype)
        out[:, :, top : top + h, left : left + w] = x
        return out

    def vjp(g, needs):
        if not needs[0]:
            return (None,)
        return (np.ascontiguousarray(g[:, :, top : top + h, left : left + w]),)

    return _record("pad2d", (a,), fwd(), fwd, vjp)


# ---------------------------------------------------------------------------
# non-differentiable tensor utilities
# ---------------------------------------------------------------------------


def sign(x):
    """Elementwise -1/0/+1 with sign(0)=0.

    Accepts a Tensor or a numpy array and returns the same kind.  Not
    recorded: attacks apply it to gradients after the backward sweep.
    """
    if isinstance(x, Tensor):
        return Tensor(np.sign(x.data))
    return np.sign(x)


def l1_normalize(x):
    """Divide by the sum of absolute values.

    Returns `(normalized, degenerate)`.  An identically-zero input cannot
    be normalized; it comes back unchanged (all zeros) with
    `degenerate=True` so momentum updates can stall instead of turning
    into NaN.  Accepts a Tensor or numpy array.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    total = np.abs(arr).sum(dtype=np.float32)
    if total == 0.0:
        out = np.zeros_like(arr)
        return (Tensor(out) if isinstance(x, Tensor) else out), True
    out = arr / total
    return (Tensor(out) if isinstance(x, Tensor) else out), False
