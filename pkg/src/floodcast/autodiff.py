"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the operations the model zoo needs are provided. Image tensors are
laid out ``(batch, channels, rows, cols)``; convolution kernels are
``(out_channels, in_channels, kh, kw)``.

Every op checks its forward output for NaN/Inf and raises
:class:`NonFiniteError` naming the op. ``backward`` visits nodes in
decreasing creation order, which is a valid reverse topological order and
makes gradient accumulation bit-reproducible.
"""

from __future__ import annotations

import contextlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()
_grad_enabled = True


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class BackwardStateError(AutodiffError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_counter)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise BackwardStateError("backward already ran on this graph; rebuild it first")
        if not self.requires_grad:
            raise BackwardStateError("loss does not depend on any tensor requiring grad")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        self._consumed = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------- #
# Elementwise
# --------------------------------------------------------------------------- #

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return _make(np.where(positive, x.data, 0.0), (x,), backward, "relu")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _make(np.abs(x.data), (x,), backward, "abs")


def total(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return _make(np.asarray(x.data.mean()), (x,), backward, "mean")


# --------------------------------------------------------------------------- #
# Channel plumbing
# --------------------------------------------------------------------------- #

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    spatial = {(x.shape[0],) + x.shape[2:] for x in xs}
    if len(spatial) != 1:
        raise ShapeError(f"concat_channels: mismatched batch/spatial shapes {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([x.data for x in xs], axis=1), xs, backward, "concat")


def channels(x: Tensor, sl: slice) -> Tensor:
    """Select a contiguous channel range."""

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, sl] = g
        return (out,)

    return _make(x.data[:, sl].copy(), (x,), backward, "channels")


def shift(x: Tensor, dr: int, dc: int) -> Tensor:
    """``y[..., i, j] = x[..., i + dr, j + dc]``, zero outside the grid."""
    h, w = x.shape[-2:]

    def window(arr, dr, dc, out):
        src_r = slice(max(dr, 0), h + min(dr, 0))
        dst_r = slice(max(-dr, 0), h + min(-dr, 0))
        src_c = slice(max(dc, 0), w + min(dc, 0))
        dst_c = slice(max(-dc, 0), w + min(-dc, 0))
        out[..., dst_r, dst_c] = arr[..., src_r, src_c]
        return out

    def backward(g):
        return (window(g, -dr, -dc, np.zeros_like(g)),)

    return _make(window(x.data, dr, dc, np.zeros_like(x.data)), (x,), backward, "shift")


# --------------------------------------------------------------------------- #
# Convolutions and resampling
# --------------------------------------------------------------------------- #

def _padding(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    if len(padding) == 4:
        return padding
    raise ShapeError(f"padding must be an int, (rows, cols) or (top, bottom, left, right): {padding}")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n*ho*wo, c*kh*kw) patch matrix of a padded (n, c, h, w) array."""
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1:
        return xp.transpose(0, 2, 3, 1).reshape(-1, c)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding=0) -> Tensor:
    """Cross-correlation with zero padding, stride 1.

    ``padding`` is an int, ``(rows, cols)`` or ``(top, bottom, left, right)``.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, _, _ = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    pt, pb, pl, pr = _padding(padding)
    if min(pt, pb, pl, pr) < 0:
        raise ShapeError("padding must be non-negative")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = xp.shape[2:]
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    cols = _im2col(xp, kh, kw)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == 1 and kw == 1:
                gxp = (g2 @ wmat).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
            else:
                # full correlation of the output gradient with the flipped kernel
                gpad = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gxp = (_im2col(gpad, kh, kw) @ flipped.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros_like(blocks)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), backward, "pool2x2")


def transposed_conv2x2(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel of shape (out, in, 2, 2)."""
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if (kh, kw) != (2, 2) or ck != c:
        raise ShapeError(f"transposed_conv2x2: kernel {kernel.shape} incompatible with input {x.shape}")
    out = np.empty((n, o, 2 * h, 2 * w))
    for a in range(2):
        for b in range(2):
            out[:, :, a::2, b::2] = np.einsum("nchw,oc->nohw", x.data, kernel.data[:, :, a, b], optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gk = np.zeros_like(kernel.data) if kernel.requires_grad else None
        for a in range(2):
            for b in range(2):
                gab = g[:, :, a::2, b::2]
                if gx is not None:
                    gx += np.einsum("nohw,oc->nchw", gab, kernel.data[:, :, a, b], optimize=True)
                if gk is not None:
                    gk[:, :, a, b] = np.einsum("nohw,nchw->oc", gab, x.data, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "transposed_conv2x2")


def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation weights, half-pixel centres, edge clamped."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        s = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(s)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = s - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def upsample_bilinear2x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    uh, uw = _bilinear_matrix(h), _bilinear_matrix(w)
    out = uh @ (x.data @ uw.T)

    def backward(g):
        return (uh.T @ (g @ uw),)

    return _make(out, (x,), backward, "upsample_bilinear2x")


# --------------------------------------------------------------------------- #
# Parameters, optimiser, checkpoints
# --------------------------------------------------------------------------- #

def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def _pack(arrays: Mapping[str, np.ndarray]) -> tuple[list[dict], bytes]:
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    return table, b"".join(chunks)


def _unpack(table: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    flat = np.frombuffer(blob, dtype="<f8")
    out = {}
    for entry in table:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + size > flat.size:
            raise ValueError(f"checkpoint blob too short for {entry['name']}")
        out[entry["name"]] = flat[lo:lo + size].reshape(entry["shape"]).copy()
    return out


def save_checkpoint(
    directory: str | Path,
    descriptor: dict,
    arrays: Mapping[str, np.ndarray],
    adam: AdamState | None = None,
) -> Path:
    """``model.json`` (descriptor + parameter table) and ``params.bin``.

    When ``adam`` is given its moments go to ``adam.bin`` and its scalars to
    the ``adam`` key of ``model.json``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table, blob = _pack(arrays)
    (directory / "params.bin").write_bytes(blob)
    doc = {"descriptor": descriptor, "params": table}
    if adam is not None:
        moments = {f"m/{k}": v for k, v in adam.m.items()} | {f"v/{k}": v for k, v in adam.v.items()}
        adam_table, adam_blob = _pack(moments)
        (directory / "adam.bin").write_bytes(adam_blob)
        doc["adam"] = {
            "learning_rate": adam.learning_rate, "beta1": adam.beta1, "beta2": adam.beta2,
            "epsilon": adam.epsilon, "step_count": adam.step_count, "moments": adam_table,
        }
    path = directory / "model.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_checkpoint(directory: str | Path) -> tuple[dict, dict[str, np.ndarray], AdamState | None]:
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text())
    arrays = _unpack(doc["params"], (directory / "params.bin").read_bytes())
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        moments = _unpack(a["moments"], (directory / "adam.bin").read_bytes())
        adam = AdamState(
            learning_rate=a["learning_rate"], beta1=a["beta1"], beta2=a["beta2"],
            epsilon=a["epsilon"], step_count=a["step_count"],
            m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
            v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
        )
    return doc["descriptor"], arrays, adam


# --------------------------------------------------------------------------- #
# Finite-difference oracle
# --------------------------------------------------------------------------- #

def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = 40,
    seed: int = 0,
    atol: float = 1e-8,
) -> float:
    """Largest relative error between backward and central differences.

    For each input, up to ``max_coords`` randomly chosen coordinates are
    perturbed by ``+-eps``. The error per input is
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over those
    coordinates. Inputs whose gradient norms are both below ``atol`` count as
    exact, since the ratio is pure round-off there. ``fn`` must rebuild the
    graph on every call.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            num = np.empty(len(coords))
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num[k] = (up - down) / (2 * eps)
            ana = a.reshape(-1)[coords]
            scale = max(np.linalg.norm(ana), np.linalg.norm(num))
            if scale < atol:
                continue
            worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst
