"""Reverse-mode automatic differentiation over dense float64 tensors.

Supplies exactly the kernels the flow-volume transformer needs: affine maps,
masked multi-head attention, layer norm, stable cross-entropy losses, and a
bias-corrected Adam step. Arrays are numpy float64 throughout; every
differentiable kernel is checked against central finite differences in the
test suite.

Tensors are immutable once created. A graph is built by the forward pass and
consumed once by ``Tensor.backward()``, which visits each node exactly once in
reverse topological order and *accumulates* gradients (shared subexpressions
sum, they do not overwrite). Results are deterministic for a fixed BLAS
thread configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericsError, ParameterError, ShapeError

Array = np.ndarray

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def check_finite(values: Array, what: str) -> None:
    """Raise NumericsError if ``values`` contains NaN or Inf."""
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise NumericsError(f"{what} contains {bad} non-finite value(s)")


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], tuple] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self) -> None:
        """Backpropagate from a scalar output to every reachable leaf."""
        if self.data.shape != ():
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, Array] = {id(self): np.ones((), dtype=np.float64)}
        nodes: dict[int, Tensor] = {id(self): self}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    pid = id(parent)
                    if pid in grads:
                        grads[pid] = grads[pid] + pg
                    else:
                        grads[pid] = pg
                        nodes[pid] = parent
            else:
                node.grad = g if node.grad is None else node.grad + g
        # leaves left in the dict are parents whose backward never ran (leaf tensors)
        for pid, g in grads.items():
            node = nodes[pid]
            node.grad = g if node.grad is None else node.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order via iterative post-order DFS."""
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
    order.reverse()
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` after numpy broadcasting in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, _parents=(a, b), _backward=bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out, _parents=(a, b), _backward=bw)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if b.ndim == 2:
            # no batch broadcasting possible on b: collapse the batch into
            # one GEMM instead of many small stacked products
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.data.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out, _parents=(a, b), _backward=bw)


def transpose(x: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    out = np.swapaxes(x.data, ax1, ax2)

    def bw(g):
        return (np.swapaxes(g, ax1, ax2),)

    return Tensor(out, _parents=(x,), _backward=bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return Tensor(out, _parents=(x,), _backward=bw)


def getitem(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into a zero array."""
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return Tensor(out, _parents=(x,), _backward=bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=tuple(parts), _backward=bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return Tensor(out, _parents=(x,), _backward=bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error GELU: x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor(out, _parents=(x,), _backward=bw)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, _parents=(x,), _backward=bw)


def _sigmoid_np(z: Array) -> Array:
    # Piecewise form avoids overflow in exp for large |z|.
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf entries map to exactly 0."""
    m = np.max(x.data, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ParameterError("softmax: a full slice is -inf (all keys masked?)")
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return Tensor(s, _parents=(x,), _backward=bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate == 0 or no generator is supplied."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ParameterError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return Tensor(out, _parents=(x, gain, bias), _backward=bw)


# ---------------------------------------------------------------------------
# model-facing kernels
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight shaped [out, in]."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D [out,in], got {weight.shape}")
    out_dim, in_dim = weight.shape
    if x.ndim < 1 or x.shape[-1] != in_dim:
        raise ShapeError(f"linear input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (out_dim,):
        raise ShapeError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    if x.ndim == 1:
        return reshape(add(matmul(reshape(x, (1, in_dim)), transpose(weight)), bias),
                       (out_dim,))
    return add(matmul(x, transpose(weight)), bias)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., L, d] -> [..., n_heads, L, d/n_heads]."""
    *lead, L, d = x.shape
    return transpose(reshape(x, (*lead, L, n_heads, d // n_heads)), -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """[..., n_heads, L, dh] -> [..., L, n_heads*dh]."""
    *lead, h, L, dh = x.shape
    return reshape(transpose(x, -3, -2), (*lead, L, h * dh))


def masked_multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Array, n_heads: int
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with padded key positions excluded.

    q, k, v: [..., L, d]; mask: boolean [L] or [..., L], True = padding.
    Masked keys receive -inf before the softmax, so their attention weight is
    exactly zero and each row sums to 1 over the unmasked keys. Returns the
    merged output [..., L, d] and the attention weights [..., n_heads, L, L]
    (the latter feeds the interpretability pipeline).
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention inputs disagree: q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[-1]
    L = q.shape[-2]
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} is not divisible by {n_heads} heads")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != L:
        raise ShapeError(f"mask length {mask.shape} does not match sequence length {L}")
    if np.any(mask[..., 0]):
        raise ParameterError("attention mask marks position 0 (CLS) as padding")
    if np.any(np.all(mask, axis=-1)):
        raise ParameterError("attention mask excludes every key for some sequence")

    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    scale = 1.0 / math.sqrt(d // n_heads)
    scores = mul(matmul(qh, transpose(kh)), scale)
    key_bias = np.where(mask, -np.inf, 0.0)  # broadcast over heads and queries
    key_bias = key_bias[..., None, None, :]
    attn = softmax(add(scores, Tensor(key_bias)), axis=-1)
    out = merge_heads(matmul(attn, vh))
    return out, attn


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed with max-subtraction stability."""
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"softmax_cross_entropy expects logits [C>=2], got {logits.shape}")
    c = logits.shape[0]
    if not (0 <= label < c):
        raise ParameterError(f"label {label} out of range for {c} classes")
    z = logits.data
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    loss = lse - z[label]
    probs = np.exp(z - lse)

    def bw(g):
        grad = probs.copy()
        grad[label] -= 1.0
        return (g * grad,)

    return Tensor(loss, _parents=(logits,), _backward=bw)


def binary_cross_entropy_with_logits(logits: Tensor, targets: Array) -> Tensor:
    """Mean logistic loss over a batch of single-logit predictions."""
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and targets {y.shape} disagree")
    n = max(z.size, 1)
    loss = float(np.sum(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))) / n

    def bw(g):
        return (g * (_sigmoid_np(z) - y) / n,)

    return Tensor(loss, _parents=(logits,), _backward=bw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    first_moment: list[Array]
    second_moment: list[Array]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(
    params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Array],
    state: AdamState,
    lr: float,
) -> tuple[list[Tensor], AdamState]:
    """One bias-corrected Adam update; returns fresh leaf tensors.

    Moment buffers are updated in place inside ``state``; parameter tensors
    are never mutated (new leaves are returned), keeping Tensor immutability.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"adam_step got {len(params)} params, {len(grads)} grads, "
            f"state of size {len(state.first_moment)}"
        )
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise NumericsError(f"adam_step: gradient #{i} is missing")
        if p.data.shape != g.shape:
            raise ShapeError(f"adam_step: param #{i} {p.data.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"adam_step: gradient #{i} is non-finite; aborting update")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: list[Tensor] = []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params.append(Tensor(p.data - update, requires_grad=True))
    return new_params, state
