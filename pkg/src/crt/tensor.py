"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A ``Tape`` records one forward pass as an append-ordered list of nodes, so a
node's parents always precede it and the backward sweep is a single reverse
iteration (no recursion, no topological sort). Tensors without a node are
plain value snapshots; mixing them into a traced expression is how constants
enter the graph. A fresh tape is built for every forward pass, which is also
what makes truncated backpropagation windows trivial: dropping the tape *is*
the detach.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, VocabularyError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

MASK_SENTINEL = -1e9  # additive "cannot attend" value; large but finite to keep softmax NaN-free

_debug_nan_checks = False


def set_debug_nan_checks(enabled: bool) -> None:
    """Enable finite-value assertions on every op result (slow; off by default)."""
    global _debug_nan_checks
    _debug_nan_checks = bool(enabled)


class Tensor:
    """A float64 array, optionally attached to a node of one live tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detached(self) -> "Tensor":
        """Value-only copy with no tape participation."""
        return Tensor(self.data.copy())

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __neg__(self):
        return negate(self)

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-ordered record of one forward pass.

    ``nodes[i].parents`` only holds indices < i, so ``backward`` visits nodes
    in reverse append order and accumulates parent gradients as it goes.
    Gradient storage is allocated lazily, only for nodes actually reached
    from the root.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, parents, backward) -> int:
        self.nodes.append(_Node(parents, backward))
        return len(self.nodes) - 1

    def leaf(self, value) -> Tensor:
        """Register an input (parameter or constant-to-differentiate) on this tape."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        node = self._push((), None)
        return Tensor(data, self, node)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar root; returns the per-node gradient map."""
        if root.tape is not self or root.node is None:
            raise ContractError("backward root is not on this tape")
        if root.data.shape != ():
            raise ContractError(f"backward root must be scalar, got shape {tuple(root.shape)}")
        grads: dict[int, np.ndarray] = {root.node: np.ones(())}
        nodes = self.nodes
        for idx in range(root.node, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = nodes[idx]
            if node.backward is None:
                continue
            for parent, contrib in zip(node.parents, node.backward(g)):
                if contrib is None:
                    continue
                acc = grads.get(parent)
                grads[parent] = contrib if acc is None else acc + contrib
        self._grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated for ``t`` by the last backward; zeros if unreached."""
        if t.tape is not self or t.node is None:
            raise ContractError("tensor is not on this tape")
        g = self._grads.get(t.node)
        return np.zeros(t.shape) if g is None else g


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse sweep of the tape that ``root`` lives on."""
    if root.tape is None:
        raise ContractError("backward root is not attached to a tape")
    return root.tape.backward(root)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, traced: Sequence[Tensor], backward_fn: Optional[Callable]) -> Tensor:
    """Wrap an op result; attaches a node when any operand is on a tape."""
    if _debug_nan_checks and np.isnan(data).any():
        raise FloatingPointError("NaN produced by tensor operation")
    tape = None
    for t in traced:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node for t in traced if t.node is not None)
    return Tensor(data, tape, tape._push(parents, backward_fn))


def _binary_emit(data, a: Tensor, b: Tensor, grad_a, grad_b) -> Tensor:
    """Emit with per-operand gradient closures, skipping untraced operands."""
    la, lb = a.node is not None, b.node is not None
    if not (la or lb):
        return _emit(data, (), None)
    if la and lb:
        fn = lambda g: (grad_a(g), grad_b(g))
        traced = (a, b)
    elif la:
        fn = lambda g: (grad_a(g),)
        traced = (a,)
    else:
        fn = lambda g: (grad_b(g),)
        traced = (b,)
    return _emit(data, traced, fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {tuple(a.shape)} x {tuple(b.shape)}")
    ad, bd = a.data, b.data
    return _binary_emit(ad @ bd, a, b, lambda g: g @ bd.T, lambda g: ad.T @ g)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {tuple(a.shape)}")
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def solve(a, b) -> Tensor:
    """X with a @ X = b, differentiable through the factorization."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1] or b.data.ndim != 2 or b.shape[0] != a.shape[0]:
        raise DimensionError(f"solve shapes incompatible: {tuple(a.shape)} x {tuple(b.shape)}")
    x = np.linalg.solve(a.data, b.data)
    at = a.data.T

    def grad_a(g):
        return -np.linalg.solve(at, g) @ x.T

    def grad_b(g):
        return np.linalg.solve(at, g)

    return _binary_emit(x, a, b, grad_a, grad_b)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _binary_emit(a.data + b.data, a, b, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _binary_emit(a.data - b.data, a, b, lambda g: g, lambda g: -g)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    ad, bd = a.data, b.data
    return _binary_emit(ad * bd, a, b, lambda g: g * bd, lambda g: g * ad)


def add_bias(a, bias) -> Tensor:
    """Row-broadcast bias add: [m x d] + [d]. The one sanctioned broadcast."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias shapes incompatible: {tuple(a.shape)} + {tuple(bias.shape)}")
    return _binary_emit(a.data + bias.data, a, bias, lambda g: g, lambda g: g.sum(axis=0))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def negate(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # saturated inputs overflow exp, then settle at 0 exactly
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(np.float64)
    return _emit(out, (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Gaussian-error linear unit, exact erf form."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def grad(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _emit(out, (a,), grad)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "negate": negate, "exp": exp,
          "relu": relu, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def apply_unary(kind: str, a) -> Tensor:
    try:
        return _UNARY[kind](a)
    except KeyError:
        raise ContractError(f"unknown unary kind {kind!r}") from None


def apply_binary(kind: str, a, b) -> Tensor:
    try:
        return _BINARY[kind](a, b)
    except KeyError:
        raise ContractError(f"unknown binary kind {kind!r}") from None


# ---------------------------------------------------------------------------
# reductions and row-wise ops


def reduce_sum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax_rows(a, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with an optional additive mask of 0 / MASK_SENTINEL entries."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {tuple(a.shape)}")
    z = a.data
    if mask is not None:
        if mask.shape != z.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match {tuple(a.shape)}")
        if not (mask > MASK_SENTINEL / 2).any(axis=1).all():
            raise ContractError("no attendable position: a row is fully masked")
        z = z + mask
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _emit(out, (a,), grad)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by a learned affine map."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if a.data.ndim != 2 or a.shape[1] < 2:
        raise DimensionError(f"layer_norm needs rows of width >= 2, got shape {tuple(a.shape)}")
    if gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise DimensionError("layer_norm gain/bias must be vectors of the row width")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    la, lg, lb = a.node is not None, gain.node is not None, bias.node is not None
    if not (la or lg or lb):
        return _emit(out, (), None)

    gd = gain.data

    def backward_fn(g):
        res = []
        if la:
            gx = g * gd
            term = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            res.append(term * inv)
        if lg:
            res.append((g * xhat).sum(axis=0))
        if lb:
            res.append(g.sum(axis=0))
        return tuple(res)

    traced = tuple(t for t, live in ((a, la), (gain, lg), (bias, lb)) if live)
    return _emit(out, traced, backward_fn)


# ---------------------------------------------------------------------------
# row assembly


def rows_concat(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"rows_concat widths differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    p = a.shape[0]
    return _binary_emit(np.concatenate([a.data, b.data], axis=0), a, b,
                        lambda g: g[:p], lambda g: g[p:])


def rows_stack(parts: Sequence) -> Tensor:
    """Concatenate many row blocks in one node."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("rows_stack needs at least one block")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise DimensionError("rows_stack blocks must share their width")
    data = np.concatenate([p.data for p in parts], axis=0)
    live = [p.node is not None for p in parts]
    if not any(live):
        return _emit(data, (), None)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)) if live[i])

    return _emit(data, tuple(p for p, l in zip(parts, live) if l), backward_fn)


def cols_concat(parts: Sequence) -> Tensor:
    """Concatenate blocks along columns (head merge)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("cols_concat needs at least one block")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError("cols_concat blocks must share their row count")
    data = np.concatenate([p.data for p in parts], axis=1)
    live = [p.node is not None for p in parts]
    if not any(live):
        return _emit(data, (), None)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)) if live[i])

    return _emit(data, tuple(p for p, l in zip(parts, live) if l), backward_fn)


def rows_slice(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise IndexError(f"rows_slice [{start}:{stop}] out of range for {n} rows")
    shape = a.data.shape

    def backward_fn(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _emit(a.data[start:stop], (a,), backward_fn)


def take_rows(a, indices) -> Tensor:
    """Gather rows by index; backward scatters with accumulation."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take_rows indices must be one-dimensional")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows index out of range for {n} rows")
    shape = a.data.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), backward_fn)


def embedding_lookup(table, ids) -> Tensor:
    """Gather embedding rows for a list of token ids."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]
    if idx.size:
        bad = (idx < 0) | (idx >= vocab)
        if bad.any():
            raise VocabularyError(int(idx[bad][0]), vocab)
    shape = table.data.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(table.data[idx], (table,), backward_fn)


def cross_entropy(logits, targets, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax (natural log).

    ``weights`` optionally reweights positions (e.g. scoring only query
    positions of a probe task); the result is then the weighted mean.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n x V] logits, got {tuple(logits.shape)}")
    idx = np.asarray(targets, dtype=np.intp)
    n, vocab = logits.shape
    if idx.shape != (n,):
        raise DimensionError(f"cross_entropy got {idx.size} targets for {n} rows")
    bad = (idx < 0) | (idx >= vocab)
    if bad.any():
        raise VocabularyError(int(idx[bad][0]), vocab)
    if weights is None:
        w = np.ones(n)
        total = float(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionError("cross_entropy weights must match the row count")
        total = float(w.sum())
        if total <= 0.0:
            raise ContractError("cross_entropy weights sum to zero")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), idx]
    out = np.asarray((nll * w).sum() / total)

    def backward_fn(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), idx] -= 1.0
        return (p * ((float(g) / total) * w)[:, None],)

    return _emit(out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# numerical utilities


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    The relative error divides by max(|analytic|, |numeric|, 1e-8) per
    coordinate, so exactly-zero gradients compare cleanly.
    """
    x = _as_tensor(x)
    tape = Tape()
    xt = tape.leaf(x.data)
    y = f(xt)
    tape.backward(y)
    analytic = tape.grad(xt)

    numeric = np.zeros_like(x.data)
    flat = x.data.copy()
    for i in range(flat.size):
        orig = flat.flat[i]
        flat.flat[i] = orig + step
        hi = f(Tensor(flat)).item()
        flat.flat[i] = orig - step
        lo = f(Tensor(flat)).item()
        flat.flat[i] = orig
        numeric.flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def spectral_norm(a, iters: int = 1000, tol: float = 1e-10) -> float:
    """Largest singular value via power iteration on the Gram operator."""
    if iters < 1:
        raise ContractError("spectral_norm needs iters >= 1")
    m = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"spectral_norm expects a matrix, got shape {m.shape}")
    q = m.shape[1]
    # deterministic start, slightly tilted to avoid symmetric dead spots
    v = np.ones(q) + 1e-3 * np.arange(q)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = m.T @ (m @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        new_est = math.sqrt(norm_w)
        if abs(new_est - est) < tol:
            return new_est
        est = new_est
    return est
