"""Tape-based reverse-mode autodiff over numpy arrays.

Only the operations the CCAT network needs are provided.  Every op builds a
new node whose ``_backward`` closure maps the upstream gradient to one
gradient per parent; :func:`backward` walks the graph in reverse topological
order.  Gradients of intermediate nodes live only for the duration of one
``backward`` call, while leaf tensors (parameters, inputs) accumulate into
``.grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import AllMasked, CCATError, ConfigError, ShapeError

MASK_LOGIT = -1e30
LN_EPS = 1e-5

# Set to False to skip the per-op finiteness check (small speedup).
CHECK_FINITE = True


class NonFiniteError(CCATError):
    """An op produced NaN or infinity."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable | None = None, op: str = ""):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf.  ``decay`` marks tensors that receive L2."""

    __slots__ = ("name", "decay")

    def __init__(self, name: str, value, decay: bool = True):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.decay = decay


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(value: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, parents=parents if needs else (),
                  backward=backward if needs else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------ autodiff

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)), "mul")


def square(a: Tensor) -> Tensor:
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def relu(x: Tensor) -> Tensor:
    gate = x.value > 0
    return _node(np.where(gate, x.value, 0).astype(x.dtype), (x,),
                 lambda g: (g * gate,), "relu")


def clipped_relu5(x: Tensor) -> Tensor:
    """min(max(0, x), 5): the output head bounded by the MOS ceiling."""
    gate = (x.value > 0) & (x.value < 5)
    return _node(np.clip(x.value, 0, 5), (x,), lambda g: (g * gate,), "clip5")


# ------------------------------------------------------------------ shaping

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _node(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return reduce_sum(x, axis, keepdims) / n


# -------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not align")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _node(av @ bv, (a, b), bw, "matmul")


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ W + b."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"bias shape {b.shape} != ({W.shape[1]},)")
        y = add(y, b)
    return y


_IM2COL_BUDGET = 1 << 22  # elements per patch matrix chunk


def _patches(xp: np.ndarray, kh: int, kw: int, H: int, W: int) -> np.ndarray:
    """[n, H+kh-1, W+kw-1, Cin] -> [n*H*W, Cin*kh*kw] (ordering Cin, kh, kw)."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return view.reshape(-1, view.shape[3] * kh * kw)


def conv2d_nobias(x: Tensor, k: Tensor) -> Tensor:
    """Stride-1 SAME cross-correlation. x: [N,H,W,Cin], k: [kh,kw,Cin,Cout]."""
    if x.value.ndim != 4 or k.value.ndim != 4:
        raise ShapeError("conv2d_nobias expects 4-D input and kernel")
    N, H, W, Cin = x.shape
    kh, kw, kc, Cout = k.shape
    if kc != Cin:
        raise ShapeError(f"kernel expects {kc} input channels, input has {Cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel dimensions must be odd")
    ph, pw = kh // 2, kw // 2
    xv, kv = x.value, k.value
    xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    kmat = kv.transpose(2, 0, 1, 3).reshape(Cin * kh * kw, Cout)
    step = max(1, _IM2COL_BUDGET // (H * W * Cin * kh * kw))
    out = np.empty((N, H, W, Cout), dtype=np.result_type(xv, kv))
    for s in range(0, N, step):
        e = min(N, s + step)
        out[s:e] = (_patches(xp[s:e], kh, kw, H, W) @ kmat).reshape(e - s, H, W, Cout)

    def bw(g):
        gk = np.zeros_like(kmat) if k.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for s in range(0, N, step):
            e = min(N, s + step)
            g2 = g[s:e].reshape(-1, Cout)
            if gk is not None:
                gk += _patches(xp[s:e], kh, kw, H, W).T @ g2
            if gxp is not None:
                gcol = (g2 @ kmat.T).reshape(e - s, H, W, Cin, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[s:e, i:i + H, j:j + W, :] += gcol[..., i, j]
        gx = gxp[:, ph:ph + H, pw:pw + W, :] if gxp is not None else None
        if gk is not None:
            gk = gk.reshape(Cin, kh, kw, Cout).transpose(1, 2, 0, 3)
        return gx, gk

    return _node(out, (x, k), bw, "conv2d")


def pooled_size(n: int, pool: int = 2) -> int:
    """Floor-pooled length; an axis shorter than the pool passes through at length 1."""
    if n < 1:
        raise ShapeError("cannot pool an empty axis")
    return n // pool if n >= pool else n


def avgpool2d(x: Tensor, pool: Sequence[int] = (2, 2)) -> Tensor:
    """Non-overlapping mean pooling over axes 1 and 2 of [N,H,W,C].

    Trailing rows/columns that do not fill a window are dropped.  An axis
    already shorter than its window is left at its length (window shrinks to it).
    """
    N, H, W, C = x.shape
    if H < pool[0] and W < pool[1]:
        raise ShapeError(f"nothing to pool: {H}x{W} input with {tuple(pool)} window")
    ph = pool[0] if H >= pool[0] else H
    pw = pool[1] if W >= pool[1] else W
    Ho, Wo = H // ph, W // pw
    if Ho == 0 or Wo == 0:
        raise ShapeError("pooled dimension would be zero")
    v = x.value[:, :Ho * ph, :Wo * pw, :].reshape(N, Ho, ph, Wo, pw, C).mean(axis=(2, 4))

    def bw(g):
        gx = np.zeros_like(x.value)
        share = np.broadcast_to(g[:, :, None, :, None, :] / (ph * pw), (N, Ho, ph, Wo, pw, C))
        gx[:, :Ho * ph, :Wo * pw, :] = share.reshape(N, Ho * ph, Wo * pw, C)
        return (gx,)

    return _node(v, (x,), bw, "avgpool2d")


# ------------------------------------------------------------ normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value
    D = xv.shape[-1]

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gv
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, D).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, D).sum(axis=0)
        return gx, gg, gb

    return _node(xhat * gv + bias.value, (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity at inference or when rate is 0."""
    if not training or rate <= 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


# ----------------------------------------------------------------- attention

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_self_attention(x: Tensor, p: Mapping[str, Tensor], heads: int,
                              key_mask=None, return_weights: bool = False):
    """Scaled dot-product self-attention over [T,D] or [B,T,D].

    ``key_mask`` (same leading shape as x without D) marks which positions may
    be attended to; masked keys get a -1e30 logit so their weight is exactly 0.
    No residual is added here.
    """
    squeeze = x.value.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, T, D = x.shape
    if D % heads:
        raise ConfigError(f"model dim {D} not divisible by {heads} heads")
    dh = D // heads
    if key_mask is None:
        key_mask = np.ones((B, T), dtype=bool)
    key_mask = np.asarray(key_mask, dtype=bool).reshape(B, T)
    if not key_mask.any(axis=1).all():
        raise AllMasked("every key is masked for at least one sequence")

    def split(t):  # [B,T,D] -> [B,h,T,dh]
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(dense(x, p["wq"], p["bq"]))
    k = split(dense(x, p["wk"], p["bk"]))
    v = split(dense(x, p["wv"], p["bv"]))
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    bias = np.where(key_mask, 0.0, MASK_LOGIT).astype(x.dtype)[:, None, None, :]
    weights = softmax(add(logits, Tensor(bias)), axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, T, D))
    out = dense(ctx, p["wo"], p["bo"])
    if squeeze:
        out = reshape(out, (T, D))
    return (out, weights.value) if return_weights else out


def encoder_block(x: Tensor, p: Mapping[str, Tensor], heads: int, key_mask,
                  dropout_rate: float = 0.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm transformer encoder: attention + residual + LN, then FF + residual + LN."""
    att = multi_head_self_attention(x, p, heads, key_mask)
    x = layer_norm(add(x, dropout(att, dropout_rate, training, rng)), p["ln1_g"], p["ln1_b"])
    h = relu(dense(x, p["ff1_w"], p["ff1_b"]))
    h = dense(h, p["ff2_w"], p["ff2_b"])
    return layer_norm(add(x, dropout(h, dropout_rate, training, rng)), p["ln2_g"], p["ln2_b"])


# -------------------------------------------------------------- verification

def graph_nodes(root: Tensor) -> list[Tensor]:
    return _topo_order(root)


def kink_margin(root: Tensor) -> float:
    """Smallest distance of any ReLU/clip pre-activation in the graph to a kink.

    Exact zeros are skipped: they come from zero-padded frames passing through
    bias-free convolutions and stay zero under any parameter perturbation.
    """
    margin = np.inf
    for node in _topo_order(root):
        if node.op not in ("relu", "clip5"):
            continue
        pre = node._parents[0].value
        pre = pre[pre != 0]
        if pre.size == 0:
            continue
        dist = np.abs(pre) if node.op == "relu" else np.minimum(np.abs(pre), np.abs(pre - 5))
        margin = min(margin, float(dist.min()))
    return margin


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
               x: Tensor | Iterable[Tensor], eps: float = 1e-5,
               oracle_dtype=np.float64) -> float:
    """Max relative error between backward() and central finite differences.

    ``x`` is one tensor or a list of tensors; ``f`` is called with ``x`` when
    a single tensor is given and with no arguments otherwise.  Relative error
    is |a - n| / max(|a|, |n|, 1e-8).

    The analytic gradient is always taken in float64.  With ``oracle_dtype``
    set to ``np.longdouble`` the perturbed tensor is promoted while it is
    being differenced, so everything downstream of it runs in extended
    precision; this keeps the oracle's rounding noise well below gradients
    of order 1e-8.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    for t in xs:
        if t.value.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        t.zero_grad()
    backward(call())
    worst = 0.0
    for t in xs:
        analytic = t.grad.reshape(-1).copy()
        original = t.value
        t.value = original.astype(oracle_dtype)
        flat = t.value.reshape(-1)
        try:
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = call().value
                flat[i] = orig - eps
                down = call().value
                flat[i] = orig
                num = float((up - down) / (2 * eps))
                a = analytic[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        finally:
            t.value = original
    return worst
