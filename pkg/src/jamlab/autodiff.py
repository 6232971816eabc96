"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Operations executed inside a ``Tape``
context are recorded define-by-run; ``Tape.backward`` replays the record in
reverse and accumulates gradients additively. Tensors never attached to a
tape behave as constants.

The engine is deliberately small: no broadcasting beyond the few explicit
broadcast ops below, no views, no GPU. Every op validates shapes and raises
``ValueError`` with both shapes on mismatch.
"""

from __future__ import annotations

import threading

import numpy as np

_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """Dense float64 array, optionally participating in the active tape."""

    __slots__ = ("values", "requires_grad", "node_id", "tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detached(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        tag = " attached" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.values)):
            raise FloatingPointError(f"{name}: non-finite input values")


class Tape:
    """Ordered record of primitive ops; confined to one thread."""

    def __init__(self):
        self._records = []  # (out_id, parent_ids, backward_fn)
        self._count = 0
        self._leaves = {}  # node_id -> Tensor

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc):
        _LOCAL.tape = None
        return False

    def watch(self, tensor: Tensor) -> Tensor:
        """Attach a leaf so it can receive gradient."""
        if tensor.tape is not self or tensor.node_id is None:
            tensor.node_id = self._count
            tensor.tape = self
            self._count += 1
            self._leaves[tensor.node_id] = tensor
        return tensor

    def _attach_output(self, tensor: Tensor) -> Tensor:
        tensor.node_id = self._count
        tensor.tape = self
        self._count += 1
        return tensor

    def _record(self, out: Tensor, parent_ids, backward_fn) -> Tensor:
        self._attach_output(out)
        self._records.append((out.node_id, parent_ids, backward_fn))
        return out

    def reset(self) -> None:
        """Free all nodes; previously attached tensors become constants."""
        self._records.clear()
        self._leaves.clear()
        self._count = 0

    def backward(self, loss: Tensor) -> "GradientMap":
        """Gradient of a scalar loss w.r.t. every attached leaf."""
        if loss.tape is not self or loss.node_id is None or loss.node_id >= self._count:
            raise ValueError("loss is not on this tape")
        if loss.values.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for out_id, parent_ids, backward_fn in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for pid, pg in zip(parent_ids, backward_fn(g)):
                if pid is None or pg is None:  # constant input, no gradient
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        # leaves the loss never touched get explicit zeros
        for nid, leaf in self._leaves.items():
            if nid not in grads:
                grads[nid] = np.zeros_like(leaf.values)
        return GradientMap(grads, self)


class GradientMap:
    """Lookup of gradients by Tensor or node id."""

    def __init__(self, by_node: dict[int, np.ndarray], tape: "Tape"):
        self._by_node = by_node
        self._tape = tape

    def _resolve(self, key):
        if isinstance(key, Tensor):
            # a stale id from some earlier tape must not alias a current node
            return key.node_id if key.tape is self._tape else None
        return key

    def __contains__(self, key) -> bool:
        return self._resolve(key) in self._by_node

    def __getitem__(self, key) -> Tensor:
        nid = self._resolve(key)
        if nid is None or nid not in self._by_node:
            raise KeyError("tensor has no gradient on this tape")
        return Tensor(self._by_node[nid])

    def array(self, key) -> np.ndarray:
        return self[key].values


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# primitive ops


def _participates(t: Tensor, tape: Tape) -> bool:
    return (t.tape is tape and t.node_id is not None) or t.requires_grad


def _emit(out_values, parents, backward_fn) -> Tensor:
    """Wrap op output; record when any input is attached to the active tape."""
    tape = _active_tape()
    out = Tensor(out_values)
    if tape is None:
        return out
    if not any(_participates(p, tape) for p in parents):
        return out
    for p in parents:
        if p.requires_grad and (p.tape is not tape or p.node_id is None):
            tape.watch(p)
    parent_ids = tuple(
        p.node_id if (p.tape is tape and p.node_id is not None) else None
        for p in parents
    )
    return tape._record(out, parent_ids, backward_fn)


def _shape_error(op: str, *tensors: Tensor):
    shapes = " vs ".join(str(t.shape) for t in tensors)
    return ValueError(f"{op}: shape mismatch ({shapes})")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", a, b)
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C bias to the last axis of x (the one broadcast we allow)."""
    if b.values.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise _shape_error("add_bias", x, b)
    axes = tuple(range(x.values.ndim - 1))
    return _emit(x.values + b.values, (x, b), lambda g: (g, g.sum(axis=axes)))


def add_const(x: Tensor, c: float) -> Tensor:
    return _emit(x.values + c, (x,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_colvec(x: Tensor, v: Tensor) -> Tensor:
    """Elementwise multiply rows of x (R,C) by a column vector v (R,1)."""
    if x.values.ndim != 2 or v.shape != (x.shape[0], 1):
        raise _shape_error("mul_colvec", x, v)
    xv, vv = x.values, v.values
    return _emit(
        xv * vv, (x, v), lambda g: (g * vv, (g * xv).sum(axis=1, keepdims=True))
    )


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Multiply by a scalar tensor (learnable gain)."""
    if s.shape != ():
        raise _shape_error("smul", s, x)
    sv, xv = s.values, x.values
    return _emit(sv * xv, (s, x), lambda g: (np.sum(g * xv), sv * g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.values * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    _check_finite("matmul", a, b)
    av, bv = a.values, b.values
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _emit(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.05) -> Tensor:
    scale_arr = np.where(x.values > 0, 1.0, slope)
    return _emit(x.values * scale_arr, (x,), lambda g: (g * scale_arr,))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor; rows sum to 1 within 1e-12."""
    if x.values.ndim != 2:
        raise _shape_error("softmax_rows", x)
    _check_finite("softmax_rows", x)
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (x,), back)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit(
        np.asarray(x.values.mean()), (x,), lambda g: (np.full(x.shape, g / n),)
    )


def tsum(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.values.sum()), (x,), lambda g: (np.full(x.shape, g),))


def rowsum(x: Tensor) -> Tensor:
    """Sum a 2-D tensor over columns, keeping shape (R,1)."""
    if x.values.ndim != 2:
        raise _shape_error("rowsum", x)
    cols = x.shape[1]
    return _emit(
        x.values.sum(axis=1, keepdims=True),
        (x,),
        lambda g: (np.repeat(g, cols, axis=1),),
    )


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise FloatingPointError("log: non-positive input")
    xv = x.values
    return _emit(np.log(xv), (x,), lambda g: (g / xv,))


def l2_normalize_rows(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise _shape_error("l2_normalize_rows", x)
    norms = np.linalg.norm(x.values, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("l2_normalize_rows: zero-norm row")
    y = x.values / norms

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _emit(y, (x,), back)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: position-batched channel mix of (P, Cin) by (Cin, Cout)."""
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("conv1x1", x, w)
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 same-padding convolution on an (H, W, Cin) map.

    The kernel is stored flat as (9 * Cin, Cout), offsets row-major. Built on
    an im2col gather so the backward pass is a plain matmul plus scatter-add.
    """
    if x.values.ndim != 3 or w.values.ndim != 2 or 9 * x.shape[2] != w.shape[0]:
        raise _shape_error("conv3x3", x, w)
    h, wd, cin = x.shape
    cout = w.shape[1]
    padded = np.zeros((h + 2, wd + 2, cin))
    padded[1:-1, 1:-1] = x.values
    patches = np.empty((h * wd, 9 * cin))
    for k, (dy, dx) in enumerate((dy, dx) for dy in (0, 1, 2) for dx in (0, 1, 2)):
        patches[:, k * cin : (k + 1) * cin] = padded[
            dy : dy + h, dx : dx + wd
        ].reshape(h * wd, cin)
    wv = w.values
    out = (patches @ wv).reshape(h, wd, cout)

    def back(g):
        gf = g.reshape(h * wd, cout)
        gw = patches.T @ gf
        gp = gf @ wv.T  # (P, 9*cin)
        gx = np.zeros((h + 2, wd + 2, cin))
        for k, (dy, dx) in enumerate(
            (dy, dx) for dy in (0, 1, 2) for dx in (0, 1, 2)
        ):
            gx[dy : dy + h, dx : dx + wd] += gp[:, k * cin : (k + 1) * cin].reshape(
                h, wd, cin
            )
        return (gx[1:-1, 1:-1], gw)

    y = _emit(out, (x, w), back)
    return add_bias(y, b) if b is not None else y


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot reshape {old} to {shape}")
    return _emit(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise _shape_error("transpose", x)
    return _emit(x.values.T.copy(), (x,), lambda g: (g.T,))


def avgpool2x2(x: Tensor) -> Tensor:
    """2x2 mean pooling on an (H, W, C) map; H and W must be even."""
    if x.values.ndim != 3 or x.shape[0] % 2 or x.shape[1] % 2:
        raise _shape_error("avgpool2x2", x)
    h, w, c = x.shape
    y = x.values.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def back(g):
        up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
        return (up / 4.0,)

    return _emit(y, (x,), back)


def colmax(x: Tensor) -> Tensor:
    """Max over rows of (N, C) -> (C,); gradient routes to the first argmax."""
    if x.values.ndim != 2:
        raise _shape_error("colmax", x)
    idx = x.values.argmax(axis=0)
    y = x.values[idx, np.arange(x.shape[1])]

    def back(g):
        gx = np.zeros(x.shape)
        gx[idx, np.arange(x.shape[1])] = g
        return (gx,)

    return _emit(y, (x,), back)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.values > lo) & (x.values < hi)
    return _emit(np.clip(x.values, lo, hi), (x,), lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.values < 0):
        raise FloatingPointError("sqrt: negative input")
    y = np.sqrt(x.values)
    return _emit(y, (x,), lambda g: (g / (2.0 * y),))


def arccos(x: Tensor) -> Tensor:
    if np.any(np.abs(x.values) >= 1.0):
        raise FloatingPointError("arccos: input must lie strictly inside (-1, 1)")
    xv = x.values
    return _emit(np.arccos(xv), (x,), lambda g: (-g / np.sqrt(1.0 - xv * xv),))


def cos(x: Tensor) -> Tensor:
    xv = x.values
    return _emit(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),))


def concat_rows(parts) -> Tensor:
    """Stack 2-D tensors with equal column counts along axis 0."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows: empty input")
    cols = parts[0].shape[1]
    for p in parts:
        if p.values.ndim != 2 or p.shape[1] != cols:
            raise _shape_error("concat_rows", *parts)
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(sizes)))

    return _emit(np.concatenate([p.values for p in parts], axis=0), parts, back)


def normalize_rows_sum(x: Tensor) -> Tensor:
    """Divide each row of a nonnegative 2-D tensor by its sum."""
    if x.values.ndim != 2:
        raise _shape_error("normalize_rows_sum", x)
    s = x.values.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("normalize_rows_sum: row with non-positive sum")
    y = x.values / s

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) / s,)

    return _emit(y, (x,), back)


# name -> callable, for the string-dispatch entry point
_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "softmax-rows": softmax_rows,
    "mean": mean,
    "log": log,
    "l2-normalize-rows": l2_normalize_rows,
    "conv-1x1": conv1x1,
    "reshape": reshape,
    "transpose": transpose,
}


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name (`matmul`, `softmax-rows`, `conv-1x1`, ...)."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(f, point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must build a scalar from its Tensor argument; the relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x0 = np.array(point.values, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
    analytic = tape.backward(out).array(leaf)

    flat = x0.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            pert = flat.copy()
            pert[i] += sign * h
            val = f(Tensor(pert.reshape(x0.shape))).values
            if not np.isfinite(val):
                raise FloatingPointError("grad_check: non-finite perturbed evaluation")
            if slot == 0:
                fp = float(val)
            else:
                fm = float(val)
        numeric[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic.reshape(-1) - numeric)
    rel = err / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(rel.max())
