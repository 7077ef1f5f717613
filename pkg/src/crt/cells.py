"""Gated recurrent cells with gate-trace recording.

Two cell kinds share one parameter layout: a plain GRU with a dense
candidate recurrent weight, and an orthogonality-constrained variant whose
candidate recurrent weight is produced by a Cayley map of a trainable
skew-symmetric matrix, so it is orthogonal by construction at every
optimizer step rather than by projection.

Hidden states and inputs are row matrices [lanes x width]; a single vector
is the one-row case. Every step records its gate activations as plain
arrays so the analysis tooling can evaluate per-step Jacobian bound
coefficients after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class CayleyParams:
    """Free parameters of the orthogonal candidate weight.

    ``a_free`` fills the strictly lower triangle of a skew-symmetric matrix;
    ``d_signs`` is a fixed diagonal of +/-1 drawn once at init.
    """

    a_free: Tensor
    d_signs: np.ndarray

    @property
    def size(self) -> int:
        return self.d_signs.shape[0]


@dataclass
class GruParams:
    w_r: Tensor
    w_u: Tensor
    w_c: Tensor
    u_r: Tensor
    u_u: Tensor
    u_c: Optional[Tensor]  # dense candidate weight; None for the orthogonal kind
    b_r: Tensor
    b_u: Tensor
    b_c: Tensor
    cell_kind: str = "gru"  # "gru" | "ncgru"
    cayley: Optional[CayleyParams] = None

    @property
    def d_in(self) -> int:
        return self.w_r.shape[0]

    @property
    def d_h(self) -> int:
        return self.u_r.shape[0]

    def candidate_recurrent(self) -> Tensor:
        """The candidate recurrent weight actually used by the cell."""
        if self.cell_kind == "ncgru":
            return cayley_orthogonal(self.cayley.a_free, self.cayley.d_signs)
        return self.u_c


@dataclass
class GateTrace:
    """Recorded activations of one step, as detached [lanes x d_h] arrays."""

    r: np.ndarray
    u: np.ndarray
    c: np.ndarray
    h: np.ndarray
    h_prev: np.ndarray


def init_gru_params(rng: np.random.Generator, d_in: int, d_h: int, cell_kind: str = "gru") -> GruParams:
    """Uniform +/- 1/sqrt(d_h) dense weights, zero biases, near-identity Cayley start."""
    if cell_kind not in ("gru", "ncgru"):
        raise ContractError(f"unknown cell kind {cell_kind!r}")
    s = 1.0 / np.sqrt(d_h)

    def w(rows, cols):
        return Tensor(rng.uniform(-s, s, size=(rows, cols)))

    cayley = None
    u_c = None
    if cell_kind == "ncgru":
        n_free = d_h * (d_h - 1) // 2
        cayley = CayleyParams(
            a_free=Tensor(rng.uniform(-0.01, 0.01, size=n_free)),
            d_signs=np.where(rng.random(d_h) < 0.5, -1.0, 1.0),
        )
    else:
        u_c = w(d_h, d_h)
    return GruParams(
        w_r=w(d_in, d_h), w_u=w(d_in, d_h), w_c=w(d_in, d_h),
        u_r=w(d_h, d_h), u_u=w(d_h, d_h), u_c=u_c,
        b_r=Tensor(np.zeros(d_h)), b_u=Tensor(np.zeros(d_h)), b_c=Tensor(np.zeros(d_h)),
        cell_kind=cell_kind, cayley=cayley,
    )


def skew_from_free(a_free: Tensor, size: int) -> Tensor:
    """Build L - L^T from the strictly-lower-triangular entries in ``a_free``."""
    n_free = size * (size - 1) // 2
    if a_free.data.shape != (n_free,):
        raise DimensionError(f"expected {n_free} free entries for size {size}, got {a_free.data.shape}")
    rows, cols = np.tril_indices(size, k=-1)
    full = np.zeros((size, size))
    full[rows, cols] = a_free.data
    full[cols, rows] = -a_free.data

    def backward_fn(g):
        return (g[rows, cols] - g[cols, rows],)

    return T._emit(full, (a_free,), backward_fn)


def cayley_orthogonal(a_free: Tensor, d_signs: np.ndarray) -> Tensor:
    """Orthogonal matrix (I + A)^-1 (I - A) D for skew-symmetric A.

    I + A is always invertible because A's eigenvalues are purely imaginary.
    Differentiable with respect to the free entries through the linear solve.
    """
    if not np.all(np.abs(d_signs) == 1.0):
        raise ContractError("sign diagonal entries must be +1 or -1")
    size = d_signs.shape[0]
    a = skew_from_free(a_free, size)
    eye = Tensor(np.eye(size))
    q = T.solve(T.add(eye, a), T.sub(eye, a))
    return T.matmul(q, Tensor(np.diag(d_signs)))


def orthogonality_error(u) -> float:
    """Frobenius norm of U^T U - I."""
    m = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"orthogonality_error expects a square matrix, got {m.shape}")
    return float(np.linalg.norm(m.T @ m - np.eye(m.shape[0]), "fro"))


def gru_step(p: GruParams, x: Tensor, h_prev: Tensor, u_c: Optional[Tensor] = None):
    """One gated update, composed from traced tensor ops.

    Returns the new hidden state and the recorded gate trace. Pass ``u_c``
    to reuse a candidate weight already materialized for a whole scan.
    """
    if x.data.ndim != 2 or h_prev.data.ndim != 2 or x.shape[0] != h_prev.shape[0]:
        raise DimensionError(f"gru_step needs matching lane counts: {tuple(x.shape)} vs {tuple(h_prev.shape)}")
    if x.shape[1] != p.d_in or h_prev.shape[1] != p.d_h:
        raise DimensionError(
            f"gru_step widths {tuple(x.shape)} / {tuple(h_prev.shape)} do not match params "
            f"({p.d_in} -> {p.d_h})")
    if u_c is None:
        u_c = p.candidate_recurrent()
    r = T.sigmoid(T.add_bias(T.add(T.matmul(x, p.w_r), T.matmul(h_prev, p.u_r)), p.b_r))
    u = T.sigmoid(T.add_bias(T.add(T.matmul(x, p.w_u), T.matmul(h_prev, p.u_u)), p.b_u))
    c = T.tanh(T.add_bias(T.add(T.matmul(x, p.w_c), T.matmul(T.hadamard(r, h_prev), u_c)), p.b_c))
    ones = Tensor(np.ones(u.shape))
    h = T.add(T.hadamard(T.sub(ones, u), h_prev), T.hadamard(u, c))
    trace = GateTrace(r=r.data.copy(), u=u.data.copy(), c=c.data.copy(),
                      h=h.data.copy(), h_prev=h_prev.data.copy())
    return h, trace


def _scan_node(p: GruParams, xs: Tensor, h0: Tensor, u_c: Tensor, steps: int, lanes: int):
    """Whole-scan tape node: the forward loop stores gate activations and the
    backward replays them in reverse, accumulating parameter gradients in
    batched form. One node instead of ~20 per step keeps long unrolls cheap.
    """
    w_r, w_u, w_c = p.w_r.data, p.w_u.data, p.w_c.data
    u_r, u_u = p.u_r.data, p.u_u.data
    ucd = u_c.data
    b_r, b_u, b_c = p.b_r.data, p.b_u.data, p.b_c.data
    xsd = xs.data

    # hoisted input-side projections for every step
    pre_r = xsd @ w_r + b_r
    pre_u = xsd @ w_u + b_u
    pre_c = xsd @ w_c + b_c

    h = h0.data
    rs = np.empty((steps, lanes, p.d_h))
    us = np.empty_like(rs)
    cs = np.empty_like(rs)
    rhs = np.empty_like(rs)   # r * h_prev, reused by dU_c accumulation
    hs_prev = np.empty_like(rs)
    out = np.empty((steps * lanes, p.d_h))
    # lane-major layout: lane b occupies rows [b*steps, (b+1)*steps)
    idx = np.arange(lanes) * steps
    traces = []
    with np.errstate(over="ignore"):  # saturated gate pre-activations settle at exactly 0/1
        for t in range(steps):
            rows = idx + t
            r = 1.0 / (1.0 + np.exp(-(pre_r[rows] + h @ u_r)))
            u = 1.0 / (1.0 + np.exp(-(pre_u[rows] + h @ u_u)))
            rh = r * h
            c = np.tanh(pre_c[rows] + rh @ ucd)
            hs_prev[t] = h
            h = (1.0 - u) * h + u * c
            rs[t], us[t], cs[t], rhs[t] = r, u, c, rh
            out[rows] = h
            traces.append(GateTrace(r=r.copy(), u=u.copy(), c=c.copy(), h=h.copy(), h_prev=hs_prev[t].copy()))

    live = {name: t.node is not None for name, t in (
        ("xs", xs), ("h0", h0), ("w_r", p.w_r), ("w_u", p.w_u), ("w_c", p.w_c),
        ("u_r", p.u_r), ("u_u", p.u_u), ("u_c", u_c), ("b_r", p.b_r), ("b_u", p.b_u), ("b_c", p.b_c))}

    def backward_fn(g):
        dh = np.zeros((lanes, p.d_h))
        da_r = np.empty((steps, lanes, p.d_h))
        da_u = np.empty_like(da_r)
        da_c = np.empty_like(da_r)
        du_r = np.zeros_like(u_r)
        du_u = np.zeros_like(u_u)
        du_c = np.zeros_like(ucd)
        urt, uut, uct = u_r.T, u_u.T, ucd.T
        for t in range(steps - 1, -1, -1):
            dh = dh + g[idx + t]
            r, u, c, hp = rs[t], us[t], cs[t], hs_prev[t]
            dc = dh * u
            du = dh * (c - hp)
            dhp = dh * (1.0 - u)
            ac = dc * (1.0 - c * c)
            drh = ac @ uct
            dr = drh * hp
            dhp = dhp + drh * r
            au = du * u * (1.0 - u)
            ar = dr * r * (1.0 - r)
            dhp = dhp + au @ uut + ar @ urt
            du_r += hp.T @ ar
            du_u += hp.T @ au
            du_c += rhs[t].T @ ac
            da_r[t], da_u[t], da_c[t] = ar, au, ac
            dh = dhp
        # batched input-side gradients
        ar_flat = np.empty((steps * lanes, p.d_h))
        au_flat = np.empty_like(ar_flat)
        ac_flat = np.empty_like(ar_flat)
        for t in range(steps):
            ar_flat[idx + t] = da_r[t]
            au_flat[idx + t] = da_u[t]
            ac_flat[idx + t] = da_c[t]
        grads = []
        if live["xs"]:
            grads.append(ar_flat @ w_r.T + au_flat @ w_u.T + ac_flat @ w_c.T)
        if live["h0"]:
            grads.append(dh)
        if live["w_r"]:
            grads.append(xsd.T @ ar_flat)
        if live["w_u"]:
            grads.append(xsd.T @ au_flat)
        if live["w_c"]:
            grads.append(xsd.T @ ac_flat)
        if live["u_r"]:
            grads.append(du_r)
        if live["u_u"]:
            grads.append(du_u)
        if live["u_c"]:
            grads.append(du_c)
        if live["b_r"]:
            grads.append(ar_flat.sum(axis=0))
        if live["b_u"]:
            grads.append(au_flat.sum(axis=0))
        if live["b_c"]:
            grads.append(ac_flat.sum(axis=0))
        return tuple(grads)

    operands = [xs, h0, p.w_r, p.w_u, p.w_c, p.u_r, p.u_u, u_c, p.b_r, p.b_u, p.b_c]
    traced = tuple(t for t in operands if t.node is not None)
    hs = T._emit(out, traced, backward_fn)
    return hs, traces


def rnn_scan(p: GruParams, xs: Tensor, h0: Tensor, lanes: int = 1, fast: bool = True):
    """Fold the cell over a sequence, fully on tape.

    ``xs`` holds ``lanes`` blocks of consecutive step rows (lane-major), so a
    one-lane scan takes the plain [n x d_in] sequence. Returns the stacked
    hidden states in the same layout, the final state per lane, and the
    per-step gate traces. ``fast=False`` composes ``gru_step`` ops instead of
    the fused scan node; both paths compute identical values.
    """
    if xs.data.ndim != 2 or xs.shape[0] % lanes != 0:
        raise DimensionError(f"scan input shape {tuple(xs.shape)} not divisible into {lanes} lanes")
    steps = xs.shape[0] // lanes
    if steps < 1:
        raise ContractError("rnn_scan needs at least one step")
    if h0.shape != (lanes, p.d_h):
        raise DimensionError(f"initial state shape {tuple(h0.shape)} != ({lanes}, {p.d_h})")
    u_c = p.candidate_recurrent()
    if fast:
        hs, traces = _scan_node(p, xs, h0, u_c, steps, lanes)
    else:
        idx = np.arange(lanes) * steps
        h = h0
        step_hs = []
        traces = []
        for t in range(steps):
            xt = T.take_rows(xs, idx + t)
            h, trace = gru_step(p, xt, h, u_c=u_c)
            step_hs.append(h)
            traces.append(trace)
        hs_time_major = T.rows_stack(step_hs)  # rows: t*lanes + b
        perm = np.arange(steps * lanes).reshape(steps, lanes).T.ravel()
        hs = T.take_rows(hs_time_major, perm)
    last_rows = np.arange(1, lanes + 1) * steps - 1
    h_last = T.take_rows(hs, last_rows)
    return hs, h_last, traces
