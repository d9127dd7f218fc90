"""Minimal reverse-mode differentiation over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent.  ``Tensor.backward`` walks the tape in reverse
topological order and accumulates into ``.grad`` of leaf tensors that
require gradients.

Only scalar-vs-tensor broadcasting is supported; everything else must be
expressed through explicit ``reshape``/``concat``/``transpose``.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward`` receives the output gradient and returns an iterable with one
    entry (array or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_DTYPE)
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        if not _is_scalar(b):
            raise ValueError("add: only tensor-tensor (same shape) or tensor-scalar supported")
        c = float(b)
        return make_op(a.data + c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return make_op(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 0:
        return make_op(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum(), dtype=g.dtype)))
    if a.data.ndim == 0:
        return add(b, a)
    raise ValueError(f"add: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def scale_grad(x: Tensor, factor: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``factor``."""
    c = float(factor)
    if c == 1.0:
        return x
    return make_op(x.data, (x,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        if not _is_scalar(b):
            raise ValueError("mul: only tensor-tensor (same shape) or tensor-scalar supported")
        c = float(b)
        return make_op(a.data * c, (a,), lambda g: (g * c,))
    if a.shape == b.shape:
        return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.data.ndim == 0:
        return make_op(
            a.data * b.data, (a, b),
            lambda g: (g * b.data, np.asarray((g * a.data).sum(), dtype=g.dtype)),
        )
    if a.data.ndim == 0:
        return mul(b, a)
    raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function that never exponentiates a positive number."""
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1 - s),))


def tsum(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=ax)

    return make_op(np.concatenate([t.data for t in xs], axis=ax), xs, backward)


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (repeats allowed; gradients scatter-add)."""
    index = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None),) * ax + (index,), g)
        return (out,)

    return make_op(np.take(x.data, index, axis=ax), (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of an [N,C,H,W] tensor."""
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]."""
    n, c, h, w = x.shape
    return make_op(
        x.data.mean(axis=(2, 3)), (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernel[K,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::sh, ::sw][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == 1 and kw == 1 and sh == 1 and sw == 1 and not (ph or pw):
                gx = (g2 @ wmat).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                # [kh,kw,N,C,ho,wo] so each tap is one contiguous block
                dcols = np.ascontiguousarray(
                    (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
                dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dcols[i, j]
                gx = dxp[:, :, ph:ph + h, pw:pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op(out, parents, backward)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_weights(h: int, w: int, xs: np.ndarray, ys: np.ndarray):
    """Corner indices and weights for sampling points on an h x w grid.

    Returns (iy, ix, wt), each shaped [P,4]; corners falling outside the
    grid get weight zero and a clamped (harmless) index.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    cx = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    cy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    wt = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    wt = np.where(inside, wt, 0.0)
    return np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1), wt


def bilinear_sample(feature: Tensor, x: float, y: float) -> Tensor:
    """Sample a [C,H,W] feature at real coordinates (x=column, y=row)."""
    c, h, w = feature.shape
    iy, ix, wt = bilinear_weights(h, w, np.array([x]), np.array([y]))
    iy, ix, wt = iy[0], ix[0], wt[0].astype(feature.data.dtype)
    out = (feature.data[:, iy, ix] * wt).sum(axis=1)

    def backward(g):
        gf = np.zeros_like(feature.data)
        for corner in range(4):
            gf[:, iy[corner], ix[corner]] += g * wt[corner]
        return (gf,)

    return make_op(out, (feature,), backward)


def roi_align(feature: Tensor, rois: np.ndarray, batch_index: np.ndarray, output_size: int = 5) -> Tensor:
    """RoIAlign with one bilinear sample per bin centre.

    ``rois`` are [K,4] boxes (x1,y1,x2,y2) already expressed in continuous
    feature-map coordinates where pixel (i,j) sits at (x=j, y=i).
    Returns [K,C,output_size,output_size].
    """
    n, c, h, w = feature.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    batch_index = np.asarray(batch_index, dtype=np.int64).reshape(-1)
    k = rois.shape[0]
    s = output_size
    centers = (np.arange(s) + 0.5) / s
    px = rois[:, 0:1] + (rois[:, 2:3] - rois[:, 0:1]) * centers[None, :]  # [K,s]
    py = rois[:, 1:2] + (rois[:, 3:4] - rois[:, 1:2]) * centers[None, :]
    gx = np.broadcast_to(px[:, None, :], (k, s, s)).reshape(-1)
    gy = np.broadcast_to(py[:, :, None], (k, s, s)).reshape(-1)
    iy, ix, wt = bilinear_weights(h, w, gx, gy)  # [K*s*s,4]
    bi = np.repeat(batch_index, s * s)
    wt = wt.astype(feature.data.dtype)
    # feature.data[bi, :, iy, ix] -> [P,4,C]
    vals = feature.data[bi[:, None], :, iy, ix]
    out = (vals * wt[:, :, None]).sum(axis=1)  # [P,C]
    out = out.reshape(k, s, s, c).transpose(0, 3, 1, 2)

    def backward(g):
        gp = g.transpose(0, 2, 3, 1).reshape(k * s * s, c)
        gf = np.zeros((n, h, w, c), dtype=g.dtype)
        np.add.at(gf, (np.broadcast_to(bi[:, None], iy.shape), iy, ix),
                  gp[:, None, :] * wt[:, :, None])
        return (gf.transpose(0, 3, 1, 2),)

    return make_op(out, (feature,), backward)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DDETCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Iterable[tuple[str, Tensor]]) -> None:
    """Binary layout, all integers little-endian uint32:

    magic(8 bytes) | version | count | per parameter:
    name_len | name (utf-8) | rank | extents... | float32 values (C order)
    """
    items = list(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, t in items:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out
