"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the handful of ops the joint model needs are provided. Every op builds its
output ``Tensor`` with a closure that pushes the output gradient back to its
inputs; ``Tensor.backward`` replays those closures in reverse topological order.
Gradients accumulate, so call ``zero_grad`` between steps.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-12


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dims(self):
        return list(self.value.shape)

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += np.reshape(g, self.value.shape)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate buffers are not needed after the pass
        for node in order:
            if node._backward is not None:
                node.grad = None


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward) -> Tensor:
    parents = tuple(p for p in parents if p is not None)
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[-1]

    def bw(g):
        a._accum(g[..., :ca])
        b._accum(g[..., ca:])

    return _result(np.concatenate([a.value, b.value], axis=-1), (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    return _result(x.value.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        a._accum(g)
        b._accum(g)

    return _result(a.value + b.value, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _result(x.value * c, (x,), lambda g: x._accum(g * c))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    n = x.shape[axis]

    def bw(g):
        x._accum(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape))

    return _result(x.value.mean(axis=axis), (x,), bw)


def block_avg_pool(x: Tensor, factors: Sequence[int]) -> Tensor:
    """Average over non-overlapping blocks of the leading ``len(factors)`` axes."""
    x = _as_tensor(x)
    k = len(factors)
    lead = x.shape[:k]
    if any(d % f for d, f in zip(lead, factors)):
        raise ValueError(f"pool factors {tuple(factors)} do not divide {lead}")
    if all(f == 1 for f in factors):
        return x
    split = []
    for d, f in zip(lead, factors):
        split += [d // f, f]
    tail = x.shape[k:]
    axes = tuple(range(1, 2 * k, 2))
    out = x.value.reshape(split + list(tail)).mean(axis=axes)
    n = int(np.prod(factors))

    def bw(g):
        ge = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(ge, split + list(tail)).reshape(x.shape) / n)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x, W = _as_tensor(x), _as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {W.shape}")
    out = x.value @ W.value
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ValueError("bias shape mismatch")
        out = out + b.value

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        x._accum(g @ W.value.T)
        W._accum(x.value.reshape(-1, W.shape[0]).T @ g2)
        if b is not None:
            b._accum(g2.sum(axis=0))

    return _result(out, (x, W, b), bw)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0
    return _result(np.where(mask, x.value, 0.0), (x,), lambda g: x._accum(g * mask))


def conv3d(x: Tensor, W: Tensor, b: Optional[Tensor] = None, stride=1, padding="same") -> Tensor:
    """3-D cross-correlation, channels last.

    ``x``: ``(D1, D2, D3, Cin)``; ``W``: ``(k1, k2, k3, Cin, Cout)``. ``padding``
    is ``"same"`` (zero pad ``k // 2``) or ``"valid"``.
    """
    x, W = _as_tensor(x), _as_tensor(W)
    if x.value.ndim != 4 or W.value.ndim != 5 or x.shape[3] != W.shape[3]:
        raise ValueError(f"conv3d shape mismatch: input {x.shape}, weights {W.shape}")
    ks = W.shape[:3]
    cin, cout = W.shape[3], W.shape[4]
    st = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
    if padding == "same":
        pads = [(k // 2, k // 2) for k in ks]
    elif padding == "valid":
        pads = [(0, 0)] * 3
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.value, pads + [(0, 0)])
    win = sliding_window_view(xp, ks, axis=(0, 1, 2))[::st[0], ::st[1], ::st[2]]
    osz = win.shape[:3]
    if min(osz) < 1:
        raise ValueError("conv3d kernel larger than padded input")
    # (o1, o2, o3, Cin, k1, k2, k3) -> (P, k1*k2*k3*Cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3)).reshape(-1, W.value[..., 0].size)
    Wm = W.value.reshape(-1, cout)
    out = (cols @ Wm).reshape(osz + (cout,))
    if b is not None:
        out = out + b.value

    def bw(g):
        g2 = g.reshape(-1, cout)
        W._accum((cols.T @ g2).reshape(W.shape))
        if b is not None:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ Wm.T).reshape(osz + tuple(ks) + (cin,))
            gxp = np.zeros_like(xp)
            for i in range(ks[0]):
                for j in range(ks[1]):
                    for k in range(ks[2]):
                        gxp[i:i + st[0] * osz[0]:st[0],
                            j:j + st[1] * osz[1]:st[1],
                            k:k + st[2] * osz[2]:st[2]] += gcols[:, :, :, i, j, k, :]
            sl = tuple(slice(p0, gxp.shape[a] - p1) for a, (p0, p1) in enumerate(pads))
            x._accum(gxp[sl])

    return _result(out, (x, W, b), bw)


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over every axis but the last (channel) one."""
    x = _as_tensor(x)
    C = x.shape[-1]
    n = x.value.size // C

    def bw(g):
        x._accum(np.broadcast_to(g / n, x.shape))

    return _result(x.value.reshape(-1, C).mean(axis=0), (x,), bw)


def weighted_avg_pool(x: Tensor, weights) -> Tensor:
    """``sum_cells w(cell) * x(cell)`` -> channel vector."""
    x = _as_tensor(x)
    if not isinstance(weights, Tensor):
        weights = Tensor(getattr(weights, "probs", weights))
    if weights.shape != x.shape[:-1]:
        raise ValueError(f"weights {weights.shape} do not match spatial dims {x.shape[:-1]}")
    C = x.shape[-1]
    xf = x.value.reshape(-1, C)
    wf = weights.value.reshape(-1)

    def bw(g):
        x._accum(np.outer(wf, g))
        weights._accum(xf @ g)

    return _result(wf @ xf, (x, weights), bw)


# ---------------------------------------------------------------------------
# distributions and losses
# ---------------------------------------------------------------------------

def _softmax_all(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_grid(logits: Tensor) -> Tensor:
    """Exp-normalize jointly over all cells."""
    logits = _as_tensor(logits)
    s = _softmax_all(logits.value)

    def bw(g):
        logits._accum(s * (g - np.sum(g * s)))

    return _result(s, (logits,), bw)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    # uniform on the open interval (0, 1)
    u = rng.random(shape)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return -np.log(-np.log(u))


def gumbel_softmax(r: Tensor, theta: float, rng: Optional[np.random.Generator] = None,
                   noise: Optional[np.ndarray] = None) -> Tensor:
    """Relaxed categorical sample ``softmax((log r + G) / theta)``.

    Pass ``noise`` to fix the Gumbel draw (used for gradient checks).
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    r = _as_tensor(r)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng or explicit noise")
        noise = sample_gumbel(r.shape, rng)
    clipped = r.value > EPS
    logr = np.log(np.maximum(r.value, EPS))
    s = _softmax_all((logr + noise) / theta)

    def bw(g):
        gz = s * (g - np.sum(g * s)) / theta
        r._accum(np.where(clipped, gz / np.where(clipped, r.value, 1.0), 0.0))

    return _result(s, (r,), bw)


def kl_divergence(p: Tensor, q) -> Tensor:
    """``sum p log(max(p, eps) / max(q, eps))``."""
    p = _as_tensor(p)
    qv = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    if qv.shape != p.shape:
        raise ValueError(f"kl_divergence shape mismatch: {p.shape} vs {qv.shape}")
    logratio = np.log(np.maximum(p.value, EPS)) - np.log(np.maximum(qv, EPS))
    # rounding can leave the sum a few ulps below zero for p close to q
    val = max(float(np.sum(p.value * logratio)), 0.0)
    dlog = np.where(p.value > EPS, 1.0, 0.0)

    def bw(g):
        p._accum(g * (logratio + dlog))

    return _result(val, (p,), bw)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - math.log(np.exp(z - m).sum())


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    logits = _as_tensor(logits)
    n = logits.shape[-1]
    if not 0 <= int(label) < n:
        raise ValueError(f"label {label} out of range [0, {n})")
    ls = log_softmax(logits.value)

    def bw(g):
        grad = np.exp(ls)
        grad[int(label)] -= 1.0
        logits._accum(g * grad)

    return _result(-ls[int(label)], (logits,), bw)


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.tensors[name] = t
        return t

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, t in self.tensors.items():
            out.add(k, t.value.copy())
        out.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return out


def grad_norm(params: ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(t.grad ** 2)) for t in params.tensors.values()
                         if t.grad is not None))


def sgd_step(params: ModelParams, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0, max_grad_norm: Optional[float] = None) -> ModelParams:
    """Classical momentum: ``v <- mu v - lr g``; ``w <- w + v``. Zeroes grads.

    With ``max_grad_norm`` the gradient is rescaled so its global L2 norm does
    not exceed that value.
    """
    scale = 1.0
    if max_grad_norm is not None:
        norm = grad_norm(params)
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.value)
        elif scale != 1.0:
            g = g * scale
        if weight_decay:
            g = g + weight_decay * t.value
        v = params.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.value)
        v = momentum * v - lr * g
        params.velocity[name] = v
        t.value = t.value + v
        t.grad = None
    return params


def cosine_lr(lr0: float, step: int, total: int) -> float:
    if total <= 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * min(step, total) / total)) / 2.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2 ** 64 - 1)))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``t.value``."""
    g = np.zeros_like(t.value)
    flat = t.value.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(num / den)


def check_gradients(build: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``build`` must recompute the scalar output from the current values of
    ``inputs`` without side effects.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = build()
    out.backward()
    analytic = [np.zeros_like(t.value) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        gn = numeric_grad(lambda: build().item(), t, h)
        worst = max(worst, relative_error(ga, gn))
    for t in inputs:
        t.grad = None
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HVRP"
CHECKPOINT_VERSION = 1


def save_tensors(named: Dict[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
    for name, value in named.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _read(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def load_tensors(fh: BinaryIO) -> Dict[str, np.ndarray]:
    if _read(fh, 4) != CHECKPOINT_MAGIC:
        raise ValueError("not an HVRP checkpoint")
    version, count = struct.unpack("<II", _read(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read(fh, 4))
        name = _read(fh, n).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(fh, 4))
        dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    return out
