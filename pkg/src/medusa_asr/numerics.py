"""Dense float64 arrays with reverse-mode automatic differentiation.

A dynamic tape is rebuilt on every forward pass: each produced Tensor keeps
its parents and a closure that routes the output gradient back to them.
`backward()` walks the tape once in reverse topological order. Everything is
numpy under the hood; no fusion, no reuse of graphs across steps.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

# Additive mask value for disallowed attention slots. Large enough that
# exp(x - max) underflows to exactly 0.0, small enough to stay finite.
MASK_VALUE = -1e30

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """An input violates a documented precondition (not a shape issue)."""


# Per-thread so concurrent decode sessions cannot re-enable each other's tapes.
_tape_state = threading.local()


def _grad_enabled():
    return getattr(_tape_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    prev = _grad_enabled()
    _tape_state.enabled = False
    try:
        yield
    finally:
        _tape_state.enabled = prev


class Tensor:
    """A float64 array plus optional gradient and tape bookkeeping.

    `data` is always a C-contiguous float64 ndarray. `grad`, once populated
    by backward(), has the same shape. Tensors with requires_grad=False are
    treated as immutable constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        # asarray with order="C" keeps 0-d arrays 0-d (ascontiguousarray would not)
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def detach(self):
        return Tensor(self.data)

    def _accumulate(self, g):
        # Copy-on-write: the first contribution is adopted by reference (it may
        # alias a consumer's grad); only a second contribution forces a copy.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Record an op on the tape if grads are enabled and any parent needs them."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a, b):
    """Matrix product; stacked (batched) operands follow numpy semantics."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def reshape(t, shape):
    t = as_tensor(t)
    out_data = t.data.reshape(shape)

    def bwd(g):
        t._accumulate(g.reshape(t.shape))

    return _make(out_data, (t,), bwd)


def transpose(t, axes):
    t = as_tensor(t)
    out_data = np.ascontiguousarray(np.transpose(t.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        t._accumulate(np.transpose(g, inv))

    return _make(out_data, (t,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd)


def rows(t, start, stop):
    """Contiguous row slice t[start:stop] along the first axis."""
    t = as_tensor(t)
    out_data = t.data[start:stop]

    def bwd(g):
        gt = np.zeros_like(t.data)
        gt[start:stop] = g
        t._accumulate(gt)

    return _make(out_data, (t,), bwd)


def tsum(t, axis=None):
    t = as_tensor(t)
    out_data = np.sum(t.data, axis=axis)

    def bwd(g):
        if axis is None:
            t._accumulate(np.full(t.shape, g))
        else:
            t._accumulate(np.broadcast_to(np.expand_dims(g, axis), t.shape).copy())

    return _make(out_data, (t,), bwd)


def tmean(t, axis=None):
    t = as_tensor(t)
    n = t.size if axis is None else t.shape[axis]
    return mul(tsum(t, axis=axis), 1.0 / n)


def gather_rows(t, indices):
    """out[i] = t[i, indices[i]] for a 2-D tensor."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if t.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got shape {t.shape}")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= t.shape[1]):
        raise IndexError(f"gather_rows: index out of range for {t.shape[1]} columns")
    r = np.arange(t.shape[0])
    out_data = t.data[r, idx]

    def bwd(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, (r, idx), g)
        t._accumulate(gt)

    return _make(out_data, (t,), bwd)


def embedding_lookup(table, ids):
    """Row gather: out[i] = table[ids[i]]. Gradient scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _make(out_data, (table,), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def gelu(t):
    """GELU, tanh approximation."""
    t = as_tensor(t)
    x = t.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def bwd(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x**2)
        grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner
        t._accumulate(g * grad)

    return _make(out_data, (t,), bwd)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match feature width {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        n = x.shape[-1]
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            term = gx_hat - gx_hat.mean(axis=-1, keepdims=True) \
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return _make(out_data, (x, gain, bias), bwd)


def softmax(t):
    """Stable softmax over the last axis; each slice sums to 1."""
    t = as_tensor(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        t._accumulate(out_data * (g - dot))

    return _make(out_data, (t,), bwd)


def log_softmax(t):
    t = as_tensor(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse
    sm = np.exp(out_data)

    def bwd(g):
        t._accumulate(g - sm * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (t,), bwd)


# ---------------------------------------------------------------------------
# Losses and information measures
# ---------------------------------------------------------------------------


def cross_entropy(logits, target):
    """-log softmax(logits)[target] for a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got shape {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for vocabulary of {logits.shape[0]}")
    ls = log_softmax(logits)
    return mul(rows(reshape(ls, (logits.shape[0], 1)), target, target + 1), -1.0)


def sequence_cross_entropy(logits, targets):
    """Mean of -log softmax(logits[i])[targets[i]] over rows of a (T, V) tensor."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"sequence_cross_entropy expects (T, V) logits, got {logits.shape}")
    ls = log_softmax(logits)
    picked = gather_rows(ls, targets)
    return mul(tmean(picked), -1.0)


def kl_divergence(student_logits, teacher_probs):
    """KL(teacher || softmax(student_logits)); differentiable w.r.t. the logits.

    Accepts 1-D vectors or matching (T, V) batches; batches are averaged over rows.
    """
    student_logits = as_tensor(student_logits)
    p = np.asarray(teacher_probs, dtype=np.float64)
    if p.shape != student_logits.shape:
        raise ShapeError(
            f"kl_divergence: teacher shape {p.shape} != student shape {student_logits.shape}"
        )
    p_log_p = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    ls = log_softmax(student_logits)
    cross = tsum(mul(ls, p), axis=-1)
    per_row = add(p_log_p.sum(axis=-1), mul(cross, -1.0))
    if student_logits.ndim == 1:
        return per_row
    return tmean(per_row)


def entropy(p):
    """Shannon entropy (nats) of a probability vector; plain float, not differentiable."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ContractError(f"entropy expects a 1-D probability vector, got shape {p.shape}")
    if p.size == 0 or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError(
            f"entropy: input is not a probability vector (sum={p.sum():.9f}, min={p.min() if p.size else 'n/a'})"
        )
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def causal_mask(n_query, n_key, offset=0):
    """Additive mask (n_query, n_key): query i may attend keys j <= offset + i."""
    q_idx = np.arange(n_query)[:, None]
    k_idx = np.arange(n_key)[None, :]
    return np.where(k_idx <= q_idx + offset, 0.0, MASK_VALUE)


def causal_attention(q, k, v, mask):
    """Single-head scaled dot-product attention with an additive mask.

    q: (Tq, d), k: (Tk, d), v: (Tk, dv), mask: (Tq, Tk) of {0, MASK_VALUE}.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"attention: mask shape {mask.shape} != ({q.shape[0]}, {k.shape[0]})")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = add(mul(matmul(q, transpose(k, (1, 0))), scale), Tensor(mask))
    weights = softmax(scores)
    return matmul(weights, v)


def cross_attention(q, k, v):
    """Unmasked single-head attention (every query sees every key)."""
    q = as_tensor(q)
    k = as_tensor(k)
    return causal_attention(q, k, v, np.zeros((q.shape[0], k.shape[0])))


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss):
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Repeated calls without zero_grad accumulate. The loss must be scalar.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    """Per-element comparison of analytic vs central-difference gradients.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-6) so that
    near-zero gradients are judged on an absolute scale.
    """

    max_rel_error: float
    n_elements: int
    tol: float
    passed: bool
    rel_errors: np.ndarray = field(repr=False)


def grad_check(f, x, step=1e-4, tol=1e-4):
    """Compare f's analytic gradient at x against central finite differences."""
    x = as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(probe).item()
            flat[i] = orig - step
            f_minus = f(probe).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        max_rel_error=max_rel,
        n_elements=int(rel.size),
        tol=tol,
        passed=bool(max_rel < tol),
        rel_errors=rel,
    )
