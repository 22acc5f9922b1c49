"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything learnable in this package runs on the small engine in this
module: a ``Tensor`` wraps a C-contiguous float64 numpy array, and every
differentiable operation records its inputs and a local backward rule on
the output tensor. Calling :func:`backward` on a scalar result materializes
the tape (the topological order of the recorded graph) and accumulates
gradients into ``.grad`` of every tracked tensor. Gradients accumulate
additively; callers zero them explicitly between optimizer steps.

Convolutions use cross-correlation semantics (no kernel flip), and
``conv_transpose2d`` is the exact adjoint of ``conv2d`` for the same
kernel/stride/padding. Both accept a single ``C x H x W`` image or a
batched ``B x C x H x W`` stack; the batched form is an internal extension
used for throughput and is equivalent to looping over samples.

No broadcasting beyond scalar-with-tensor is supported; row-vector bias
addition has its own dedicated op (:func:`add_rowvec`).
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "topo_order",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "mean",
    "add_rowvec",
    "relu",
    "sigmoid",
    "tanh",
    "sqrt",
    "log",
    "conv2d",
    "conv_transpose2d",
    "Adam",
    "grad_check",
    "uniform_fan_in",
    "save_checkpoint",
    "load_checkpoint",
]

# Sigmoid outputs are clamped into this open interval so that the strict
# (0,1) range invariant survives float64 rounding (log stays finite).
_SIGMOID_MARGIN = 1e-15


class Tensor:
    """A dense n-dimensional float64 value with optional gradient tracking.

    ``data`` is always C-contiguous (flat row-major storage). ``grad`` is
    ``None`` until the tensor participates in a :func:`backward` pass.
    """

    __slots__ = ("data", "grad", "track_grad", "_parents", "_backward", "_op")

    def __init__(self, data, track_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.track_grad = bool(track_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A fresh constant tensor sharing this tensor's values (copied)."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, track_grad={self.track_grad})"

    # Operator sugar; scalars are allowed on the right (and via radd/rmul).
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return tsum(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _from_op(data, parents, backward_rule, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.track_grad for p in parents):
        out.track_grad = True
        out._parents = tuple(parents)
        out._backward = backward_rule
        out._op = op
    else:
        out._op = op
    return out


def _accum(t: Tensor, g) -> None:
    if not t.track_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # first contribution seeds the buffer
    else:
        t.grad += g


def topo_order(root: Tensor) -> list:
    """The recorded tape: graph nodes in a valid topological order.

    Parents always precede children in the returned list.
    """
    order = []
    visited = set()
    stack = [(root, False)]
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
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every tracked tensor.

    ``root`` must be scalar-shaped (exactly one element). Gradients add to
    any existing ``.grad`` contents; use :func:`zero_grads` between steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar-shaped, got shape {root.data.shape}")
    if not root.track_grad:
        return
    order = topo_order(root)
    _accum(root, np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g):
            _accum(a, g)

        return _from_op(a.data + s, (a,), back_scalar, "add")
    _check_same_shape(a, b, "add")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _from_op(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g):
            _accum(a, g)

        return _from_op(a.data - s, (a,), back_scalar, "sub")
    _check_same_shape(a, b, "sub")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _from_op(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g):
            _accum(a, g * s)

        return _from_op(a.data * s, (a,), back_scalar, "mul")
    _check_same_shape(a, b, "mul")

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), back, "neg")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        if s == 0.0:
            raise ValueError("div: division by zero")

        def back_scalar(g):
            _accum(a, g / s)

        return _from_op(a.data / s, (a,), back_scalar, "div")
    _check_same_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ValueError("div: denominator contains zeros")

    def back(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _from_op(a.data / b.data, (a, b), back, "div")


# ---------------------------------------------------------------------------
# linear algebra / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.data.shape} x {b.data.shape}")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _from_op(a.data @ b.data, (a, b), back, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    nd = a.data.ndim
    perm = tuple(axes) if axes is not None else tuple(reversed(range(nd)))
    inv = np.argsort(perm)

    def back(g):
        _accum(a, np.transpose(g, inv))

    return _from_op(np.transpose(a.data, perm), (a,), back, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def back(g):
        _accum(a, g.reshape(old))

    return _from_op(a.data.reshape(shape), (a,), back, "reshape")


def tsum(a: Tensor, axes=None) -> Tensor:
    """Sum over the given axes (all axes when ``axes`` is None)."""
    if axes is None:
        def back_all(g):
            _accum(a, np.broadcast_to(g, a.data.shape))

        return _from_op(np.sum(a.data), (a,), back_all, "sum")
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)

    def back(g):
        ge = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(ge, a.data.shape))

    return _from_op(np.sum(a.data, axis=axes), (a,), back, "sum")


def mean(a: Tensor) -> Tensor:
    return mul(tsum(a), 1.0 / a.data.size)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-d row vector ``b`` to every row of the (R, d) matrix ``a``."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"add_rowvec: incompatible shapes {a.data.shape} and {b.data.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0))

    return _from_op(a.data + b.data[None, :], (a, b), back, "add_rowvec")


# ---------------------------------------------------------------------------
# activations and pointwise nonlinearities


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def back(g):
        _accum(a, g * (a.data > 0.0))

    return _from_op(y, (a,), back, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Numerically stable split; clamp keeps the output strictly inside (0,1).
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = np.clip(y, _SIGMOID_MARGIN, 1.0 - _SIGMOID_MARGIN)

    def back(g):
        _accum(a, g * y * (1.0 - y))

    return _from_op(y, (a,), back, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - y * y))

    return _from_op(y, (a,), back, "tanh")


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; the derivative at exactly 0 is taken as 0.

    The zero subgradient keeps visibility-masked norms finite when a masked
    channel is identically zero.
    """
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    y = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        _accum(a, g * d)

    return _from_op(y, (a,), back, "sqrt")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    y = np.log(a.data)

    def back(g):
        _accum(a, g / a.data)

    return _from_op(y, (a,), back, "log")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(n: int, k: int, stride: int, pad: int, what: str) -> int:
    num = n + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise ValueError(
            f"{what}: invalid geometry: size {n}, kernel {k}, stride {stride}, pad {pad} "
            f"gives non-integer or negative output size"
        )
    return num // stride + 1


def _as_batched(x: np.ndarray, what: str):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{what}: expected CxHxW or BxCxHxW input, got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Gather (B,C,Hp,Wp) into columns of shape (C*KH*KW, B*Ho*Wo)."""
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            cols[:, ki, kj] = sl.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Scatter-add columns (C*KH*KW, B*Ho*Wo) back onto a (B,C,Hp,Wp) grid."""
    b, c, hp, wp = shape
    acc = np.zeros(shape)
    blocks = cols.reshape(c, kh, kw, b, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            acc[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                blocks[:, ki, kj].transpose(1, 0, 2, 3)
            )
    return acc


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of ``x`` with kernel ``k`` (C_out, C_in, KH, KW).

    Output spatial size is ``(n + 2*pad - K) / stride + 1`` per axis and must
    be a positive integer; other geometries are rejected.
    """
    xd, squeeze = _as_batched(x.data, "conv2d")
    if k.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d (C_out,C_in,KH,KW), got {k.data.shape}")
    cout, cin, kh, kw = k.data.shape
    b, c, h, w = xd.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {cin}")
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    ho = _conv_geometry(h, kh, stride, pad, "conv2d")
    wo = _conv_geometry(w, kw, stride, pad, "conv2d")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    kmat = k.data.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray((kmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        if squeeze:
            g = g[None]
        if bias is not None and bias.track_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
        if k.track_grad:
            _accum(k, (g2 @ cols.T).reshape(cout, cin, kh, kw))
        if x.track_grad:
            gxp = _col2im(kmat.T @ g2, xp.shape, kh, kw, ho, wo, stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            _accum(x, gx[0] if squeeze else gx)

    parents = (x, k) if bias is None else (x, k, bias)
    return _from_op(out[0] if squeeze else out, parents, back, "conv2d")


def conv_transpose2d(
    y: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Transposed convolution: the exact adjoint of :func:`conv2d`.

    With the same kernel (C_out, C_in, KH, KW), stride and padding,
    ``<conv2d(x, k), y> == <x, conv_transpose2d(y, k)>`` for all x, y.
    Input has C_out channels; output has C_in channels and spatial size
    ``(n - 1) * stride + K - 2 * pad``.
    """
    yd, squeeze = _as_batched(y.data, "conv_transpose2d")
    if k.data.ndim != 4:
        raise ValueError(f"conv_transpose2d: kernel must be 4-d, got {k.data.shape}")
    cout, cin, kh, kw = k.data.shape
    b, c, ho, wo = yd.shape
    if c != cout:
        raise ValueError(f"conv_transpose2d: input has {c} channels but kernel expects {cout}")
    if bias is not None and bias.data.shape != (cin,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.data.shape} != ({cin},)")
    h = (ho - 1) * stride + kh - 2 * pad
    w = (wo - 1) * stride + kw - 2 * pad
    if h < 1 or w < 1:
        raise ValueError(
            f"conv_transpose2d: invalid geometry: input {ho}x{wo}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad} gives non-positive output size"
        )

    kmat = k.data.reshape(cout, cin * kh * kw)
    y2 = yd.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
    acc = _col2im(kmat.T @ y2, (b, cin, h + 2 * pad, w + 2 * pad), kh, kw, ho, wo, stride)
    out = np.ascontiguousarray(acc[:, :, pad : pad + h, pad : pad + w]) if pad else acc
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        if squeeze:
            g = g[None]
        if bias is not None and bias.track_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _im2col(gp, kh, kw, ho, wo, stride)
        if k.track_grad:
            _accum(k, (y2 @ gcols.T).reshape(cout, cin, kh, kw))
        if y.track_grad:
            gy = np.ascontiguousarray((kmat @ gcols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))
            _accum(y, gy[0] if squeeze else gy)

    parents = (y, k) if bias is None else (y, k, bias)
    return _from_op(out[0] if squeeze else out, parents, back, "conv_transpose2d")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction over a fixed parameter list.

    Moment accumulators match parameter shapes; the step counter increases
    by exactly one per :meth:`step`. ``lr`` may be reassigned between steps
    (the trainer's schedule does).
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"adam: gradient shape {g.shape} != parameter shape {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state_tensors(self) -> dict:
        """Optimizer state as named arrays, for checkpoint containers."""
        out = {}
        for i in range(len(self.params)):
            out[f"adam.m.{i}"] = self.m[i]
            out[f"adam.v.{i}"] = self.v[i]
        return out

    def load_state_tensors(self, named: dict, t: int) -> None:
        self.t = int(t)
        for i, p in enumerate(self.params):
            m = named[f"adam.m.{i}"]
            v = named[f"adam.v.{i}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"adam: checkpointed moment shape mismatch for parameter {i}")
            self.m[i] = m.copy()
            self.v[i] = v.copy()


# ---------------------------------------------------------------------------
# verification and initialization helpers


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tracked tensor ``x`` to a scalar tensor and must be
    re-evaluable under coordinate perturbations of ``x.data``. The error for
    each coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not x.track_grad:
        raise ValueError("grad_check: x must have track_grad=True")
    x.grad = None
    out = f(x)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int | None = None) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, tracked."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), track_grad=True)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout (all multi-byte integers little-endian, floats IEEE-754 binary64
# little-endian, names/metadata UTF-8):
#   magic   8 bytes  b"PGCKPT01" (version in the last two digits)
#   meta    uint32 length + JSON object bytes
#   count   uint32 number of tensors
#   entry   uint16 name length, name bytes, uint8 ndim,
#           uint32 x ndim dims, then prod(dims) float64 values (row-major)

CHECKPOINT_MAGIC = b"PGCKPT01"


def save_checkpoint(path, named: dict, meta: dict | None = None) -> None:
    """Write named parameter tensors plus a JSON metadata header."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name, value in named.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint container; returns ``(named_arrays, meta)``."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file or unsupported version (magic {magic!r})")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        named = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"checkpoint truncated while reading tensor {name!r}")
            named[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return named, meta
