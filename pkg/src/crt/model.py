"""Full model assembly and stream-stateful training.

A stream is processed one segment at a time. Each segment is embedded,
position-encoded, prefixed with the current memory vector as row 0, pushed
through the layer stack, and projected to logits; the transformer outputs
(memory row dropped) then drive a recurrent cell whose final hidden state
becomes the memory for the next segment. Training keeps a window of
consecutive segments on one tape so the loss can reach back through the
memory vector, then detaches values and starts a fresh tape.

Batched training stacks independent stream lanes as extra rows with a
block-diagonal attention mask, so the single-lane and batched paths are the
same code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attention import (LayerParams, block_diag_mask, causal_mask_with_memory,
                        init_layer_params, transformer_layer)
from .cells import GateTrace, GruParams, init_gru_params, orthogonality_error, rnn_scan
from .errors import ContractError, DimensionError
from .optim import Adam, OptimizerConfig
from .tensor import Tape, Tensor


@dataclass
class ModelConfig:
    layers: int = 2
    d_m: int = 64
    heads: int = 2
    n: int = 32                  # segment length
    vocab: int = 0               # 0 until bound to a corpus
    d_ff: int = 0                # 0 means 4 * d_m
    cell_kind: str = "gru"       # "gru" | "ncgru"
    use_memory_rnn: bool = True
    use_pos_rnn: bool = True
    bptt_window: int = 2         # segments per gradient window
    tie_output: bool = False
    dropout: float = 0.0
    ffn_activation: str = "gelu"
    seed: int = 0

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff > 0 else 4 * self.d_m

    def validate(self) -> None:
        if self.n < 1:
            raise ContractError("segment length must be >= 1")
        if self.bptt_window < 1:
            raise ContractError("bptt_window must be >= 1")
        if self.heads < 1 or self.d_m % self.heads != 0:
            raise ContractError(f"heads ({self.heads}) must divide d_m ({self.d_m})")
        if self.cell_kind not in ("gru", "ncgru"):
            raise ContractError(f"unknown cell kind {self.cell_kind!r}")
        if self.ffn_activation not in ("gelu", "relu"):
            raise ContractError(f"unknown ffn activation {self.ffn_activation!r}")


@dataclass
class ModelParams:
    embedding: Tensor                # [V x d_m]
    out_proj: Tensor                 # [d_m x V]; bypassed when output is tied
    out_bias: Tensor                 # [V]
    layers: list[LayerParams]
    memory_rnn: GruParams
    pos_rnn: GruParams
    sinusoid: np.ndarray             # [n x d_m] fixed table for the baseline encoding


@dataclass
class StreamState:
    m: Tensor                        # [lanes x d_m]
    pos_h: Tensor                    # [lanes x d_m]
    segments_since_detach: int = 0
    tape: Optional[Tape] = None
    lanes: int = 1


def sinusoid_table(n: int, d_m: int) -> np.ndarray:
    """Classic alternating sine/cosine position table."""
    pos = np.arange(n)[:, None]
    dim = np.arange(0, d_m, 2)[None, :]
    angle = pos / np.power(10000.0, dim / d_m)
    table = np.zeros((n, d_m))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_m // 2])
    return table


def init_model_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """All learnable arrays. Every component is allocated regardless of the
    variant flags so one seed yields identical shared weights across the
    ablation lattice."""
    cfg.validate()
    if cfg.vocab < 1:
        raise ContractError("vocab size must be set before initializing parameters")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    s = 1.0 / np.sqrt(cfg.d_m)
    return ModelParams(
        embedding=Tensor(rng.uniform(-s, s, size=(cfg.vocab, cfg.d_m))),
        out_proj=Tensor(rng.uniform(-s, s, size=(cfg.d_m, cfg.vocab))),
        out_bias=Tensor(np.zeros(cfg.vocab)),
        layers=[init_layer_params(rng, cfg.d_m, cfg.heads, cfg.ffn_width)
                for _ in range(cfg.layers)],
        memory_rnn=init_gru_params(rng, cfg.d_m, cfg.d_m, cfg.cell_kind),
        pos_rnn=init_gru_params(rng, cfg.d_m, cfg.d_m, cfg.cell_kind),
        sinusoid=sinusoid_table(cfg.n, cfg.d_m),
    )


def init_stream_state(cfg: ModelConfig, lanes: int = 1, tape: Optional[Tape] = None) -> StreamState:
    zeros = np.zeros((lanes, cfg.d_m))
    return StreamState(m=Tensor(zeros), pos_h=Tensor(zeros.copy()), segments_since_detach=0,
                       tape=tape, lanes=lanes)


# ---------------------------------------------------------------------------
# parameter tree walking


def _walk(obj, prefix, out, include_fixed):
    if isinstance(obj, Tensor):
        out.append((prefix, obj))
    elif isinstance(obj, np.ndarray):
        if include_fixed:
            out.append((prefix, obj))
    elif is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, out, include_fixed)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _walk(item, f"{prefix}.{i}", out, include_fixed)
    # scalars and strings carry no arrays


def named_tensors(params) -> list[tuple[str, Tensor]]:
    """Trainable arrays, in stable field order."""
    out: list[tuple[str, Tensor]] = []
    _walk(params, "", out, include_fixed=False)
    return out


def named_arrays(params) -> list[tuple[str, np.ndarray]]:
    """Every array including fixed ones (sign diagonals, sinusoid table)."""
    out: list[tuple[str, object]] = []
    _walk(params, "", out, include_fixed=True)
    return [(name, t.data if isinstance(t, Tensor) else t) for name, t in out]


def bind_params(params, tape: Tape):
    """Copy of the parameter tree with every trainable tensor registered on ``tape``."""
    if isinstance(params, Tensor):
        return tape.leaf(params)
    if is_dataclass(params) and not isinstance(params, type):
        return replace(params, **{f.name: bind_params(getattr(params, f.name), tape)
                                  for f in fields(params)})
    if isinstance(params, list):
        return [bind_params(x, tape) for x in params]
    return params


# ---------------------------------------------------------------------------
# segment forward


_mask_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _segment_layout(n: int, lanes: int):
    """Mask plus the gather indices that drop the per-lane memory rows."""
    key = (n, lanes)
    cached = _mask_cache.get(key)
    if cached is None:
        mask = block_diag_mask(causal_mask_with_memory(n), lanes)
        width = n + 1
        token_rows = np.concatenate([b * width + 1 + np.arange(n) for b in range(lanes)])
        mem_rows = np.arange(lanes) * width
        cached = (mask, token_rows, mem_rows)
        _mask_cache[key] = cached
    return cached


@dataclass
class SegmentRun:
    logits: Tensor                   # [lanes*n x V]
    y: Tensor                        # transformer outputs, memory row dropped
    new_state: StreamState
    mem_traces: list[GateTrace] = field(default_factory=list)
    pos_traces: list[GateTrace] = field(default_factory=list)


def run_segment(tokens, state: StreamState, p: ModelParams, cfg: ModelConfig, *,
                inject: Optional[tuple[int, Tensor]] = None,
                dropout_rng: Optional[np.random.Generator] = None) -> SegmentRun:
    """One segment forward pass; see module docstring for the wiring.

    ``inject`` replaces transformer output row ``i`` (single lane only) just
    before it enters the memory cell, leaving the logits path untouched;
    this is the hook the gradient-flow analysis drives.
    """
    ids = np.asarray(tokens, dtype=np.intp).reshape(-1)
    lanes = state.lanes
    n = cfg.n
    if ids.size != lanes * n:
        raise ContractError(f"expected {lanes}x{n} token ids, got {ids.size}")
    if state.m.shape != (lanes, cfg.d_m):
        raise ContractError(f"stream state shape {tuple(state.m.shape)} does not match config")
    if inject is not None and lanes != 1:
        raise ContractError("output-row injection supports a single lane")

    emb = T.embedding_lookup(p.embedding, ids)
    pos_traces: list[GateTrace] = []
    if cfg.use_pos_rnn:
        pos_hs, pos_last, pos_traces = rnn_scan(p.pos_rnn, emb, state.pos_h, lanes=lanes)
        x = T.add(emb, pos_hs)
        new_pos_h = pos_last
    else:
        x = T.add(emb, Tensor(np.tile(p.sinusoid[:n], (lanes, 1))))
        new_pos_h = state.pos_h

    mask, token_rows, _ = _segment_layout(n, lanes)
    parts = []
    for b in range(lanes):
        parts.append(T.rows_slice(state.m, b, b + 1))
        parts.append(T.rows_slice(x, b * n, (b + 1) * n) if lanes > 1 else x)
    block = T.rows_stack(parts)
    for layer in p.layers:
        block = transformer_layer(block, layer, mask, activation=cfg.ffn_activation,
                                  dropout=cfg.dropout, rng=dropout_rng)
    y = T.take_rows(block, token_rows)

    head = T.transpose(p.embedding) if cfg.tie_output else p.out_proj
    logits = T.add_bias(T.matmul(y, head), p.out_bias)

    mem_traces: list[GateTrace] = []
    if cfg.use_memory_rnn:
        y_mem = y
        if inject is not None:
            pos, row = inject
            if not 0 <= pos < n:
                raise ContractError(f"injection position {pos} outside segment of length {n}")
            if row.shape != (1, cfg.d_m):
                raise ContractError("injection row must have shape (1, d_m)")
            pieces = []
            if pos > 0:
                pieces.append(T.rows_slice(y, 0, pos))
            pieces.append(row)
            if pos + 1 < n:
                pieces.append(T.rows_slice(y, pos + 1, n))
            y_mem = T.rows_stack(pieces)
        _, m_new, mem_traces = rnn_scan(p.memory_rnn, y_mem, state.m, lanes=lanes)
    else:
        m_new = state.m

    new_state = StreamState(m=m_new, pos_h=new_pos_h,
                            segments_since_detach=state.segments_since_detach + 1,
                            tape=state.tape, lanes=lanes)
    return SegmentRun(logits=logits, y=y, new_state=new_state,
                      mem_traces=mem_traces, pos_traces=pos_traces)


def forward_segment(tokens, state: StreamState, p: ModelParams, cfg: ModelConfig):
    """Segment forward pass returning (logits, new stream state)."""
    run = run_segment(tokens, state, p, cfg)
    return run.logits, run.new_state


def apply_pos_encoding(emb: Tensor, state: StreamState, p: ModelParams):
    """Recurrent position encoding over one segment of embeddings.

    Returns the encoded rows (embedding plus the cell's hidden state at each
    step) and the final hidden state to carry into the next segment.
    """
    hs, last, _ = rnn_scan(p.pos_rnn, emb, state.pos_h, lanes=state.lanes)
    return T.add(emb, hs), last


@dataclass
class InjectionRun:
    """Replay of two consecutive segments with an optional output-row override."""

    y_first: np.ndarray
    y_second: np.ndarray
    m_between: np.ndarray            # memory entering the second segment
    mem_traces_first: list[GateTrace]
    mem_traces_second: list[GateTrace]


def forward_with_injection(tokens_first, tokens_second, state: StreamState,
                           p: ModelParams, cfg: ModelConfig, *,
                           inject: Optional[tuple[int, Tensor]] = None) -> InjectionRun:
    """Run two segments, optionally overriding one transformer output row of
    the first segment before it reaches the memory cell."""
    if state.lanes != 1:
        raise ContractError("injection replay supports a single lane")
    first = run_segment(tokens_first, state, p, cfg, inject=inject)
    second = run_segment(tokens_second, first.new_state, p, cfg)
    return InjectionRun(
        y_first=first.y.data.copy(),
        y_second=second.y.data.copy(),
        m_between=first.new_state.m.data.copy(),
        mem_traces_first=first.mem_traces,
        mem_traces_second=second.mem_traces,
    )


# ---------------------------------------------------------------------------
# stream training


@dataclass
class StepRecord:
    step: int
    segment: int
    loss: float
    ppl: float
    grad_norm: float
    ortho_err: float
    wall_ms: float


def memory_orthogonality(p: ModelParams) -> float:
    return orthogonality_error(p.memory_rnn.candidate_recurrent())


def train_stream(tokens, cfg: ModelConfig, opt_cfg: OptimizerConfig, *,
                 params: Optional[ModelParams] = None,
                 target_mask: Optional[np.ndarray] = None,
                 progress: Optional[Callable[[StepRecord, ModelParams], bool]] = None,
                 ) -> tuple[ModelParams, list[StepRecord]]:
    """Streamed training over contiguous lane shards.

    Every optimizer step runs ``bptt_window`` consecutive segments per lane
    on one tape, backpropagates the window loss (which therefore reaches the
    previous segments through the memory vector), updates the weights, and
    carries memory and position state forward as detached values. A lane
    that exhausts its shard wraps to the shard start with reset state.

    ``target_mask`` marks the input positions whose next-token loss counts;
    omitted, every position counts. ``progress`` may return True to stop
    early; it sees each step record and the live parameters.
    """
    cfg.validate()
    ids = np.asarray(tokens, dtype=np.intp).reshape(-1)
    if ids.size == 0:
        raise ContractError("empty corpus")
    lanes = max(1, opt_cfg.batch_lanes)
    window = cfg.bptt_window
    shard = ids.size // lanes
    if shard < cfg.n * window + 1:
        raise ContractError(
            f"corpus too short: each of {lanes} lanes needs {cfg.n * window + 1} tokens, has {shard}")
    if target_mask is not None:
        target_mask = np.asarray(target_mask, dtype=np.float64).reshape(-1)
        if target_mask.shape != ids.shape:
            raise ContractError("target mask length must match the corpus")

    if params is None:
        params = init_model_params(cfg)
    dropout_rng = np.random.default_rng([cfg.seed, 0xD0]) if cfg.dropout > 0.0 else None
    opt = Adam(opt_cfg)
    trainable = named_tensors(params)

    lane_starts = np.arange(lanes) * shard
    ptr = np.zeros(lanes, dtype=np.intp)
    m_vals = np.zeros((lanes, cfg.d_m))
    pos_vals = np.zeros((lanes, cfg.d_m))

    records: list[StepRecord] = []
    segments_done = 0
    step = 0
    # zero-weight windows advance the stream without counting as a step;
    # bail out if a full shard cycle produces nothing to score
    max_skip = shard // (cfg.n * window) + 2
    skipped = 0
    while step < opt_cfg.steps:
        t0 = time.perf_counter()
        # wrap lanes without room for a full window plus lookahead
        for b in range(lanes):
            if ptr[b] + cfg.n * window + 1 > shard:
                ptr[b] = 0
                m_vals[b] = 0.0
                pos_vals[b] = 0.0

        tape = Tape()
        bound = bind_params(params, tape)
        state = StreamState(m=Tensor(m_vals.copy()), pos_h=Tensor(pos_vals.copy()),
                            segments_since_detach=0, tape=tape, lanes=lanes)
        pieces: list[tuple[Tensor, float]] = []
        for w in range(window):
            offs = lane_starts + ptr + w * cfg.n
            seg_ids = np.concatenate([ids[o:o + cfg.n] for o in offs])
            seg_targets = np.concatenate([ids[o + 1:o + cfg.n + 1] for o in offs])
            run = run_segment(seg_ids, state, bound, cfg, dropout_rng=dropout_rng)
            state = run.new_state
            if target_mask is None:
                pieces.append((T.cross_entropy(run.logits, seg_targets), float(seg_ids.size)))
            else:
                weights = np.concatenate([target_mask[o:o + cfg.n] for o in offs])
                count = float(weights.sum())
                if count > 0.0:
                    pieces.append((T.cross_entropy(run.logits, seg_targets, weights=weights), count))
            segments_done += lanes

        ptr += cfg.n * window
        m_vals = state.m.data.copy()
        pos_vals = state.pos_h.data.copy()

        if not pieces:
            skipped += 1
            if skipped > max_skip:
                raise ContractError("target mask marks no position reachable by the stream")
            continue
        skipped = 0
        step += 1
        total = sum(c for _, c in pieces)
        loss = pieces[0][0] if len(pieces) == 1 else None
        if loss is None:
            acc = T.scale(pieces[0][0], pieces[0][1] / total)
            for ce, c in pieces[1:]:
                acc = T.add(acc, T.scale(ce, c / total))
            loss = acc
        tape.backward(loss)
        bound_tensors = named_tensors(bound)
        grad_norm = opt.step((name, tensor.data, tape.grad(leaf))
                             for (name, tensor), (_, leaf) in zip(trainable, bound_tensors))

        record = StepRecord(
            step=step, segment=segments_done,
            loss=float(loss.data), ppl=float(np.exp(loss.data)),
            grad_norm=grad_norm, ortho_err=memory_orthogonality(params),
            wall_ms=(time.perf_counter() - t0) * 1e3)
        records.append(record)
        if progress is not None and progress(record, params):
            break
    return params, records
